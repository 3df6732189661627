use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use clickme_game::partner::RevealThreshold;
use clickme_game::server::{router, AppState, RoundView, ServerMessage};
use clickme_game::{Catalog, CatalogImage, GameStore, RoundStatus};
use futures_util::{SinkExt, StreamExt};
use gala_core::imageops::Image;
use http_body_util::BodyExt;
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

fn state() -> AppState {
    let catalog = Catalog::new((0..2).map(|i| CatalogImage {
        id: format!("img{i}"),
        label: 3 + i,
        image: Image::filled(128, 128, 3, 0.8),
    }));
    AppState::new(
        GameStore::in_memory(catalog),
        Arc::new(RevealThreshold { label: 3, classes: 10, threshold: 200 }),
    )
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

#[tokio::test]
async fn http_contract() {
    let s = state();
    let (code, body) = call(&s, "POST", "/api/rounds", Some(serde_json::json!({"user_id": "p1", "image_id": "img0"}))).await;
    assert_eq!(code, StatusCode::OK);
    let round: RoundView = serde_json::from_slice(&body).unwrap();
    assert_eq!((round.status, round.revealed_pixels, round.label), (RoundStatus::Active, 0, 3));
    assert_eq!((round.player_bubble_size, round.partner_bubble_size, round.duration_budget_ms), (14, 21, 7000));

    let (code, _) = call(&s, "POST", "/api/rounds", Some(serde_json::json!({"user_id": "p1"}))).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = call(&s, "POST", "/api/rounds", Some(serde_json::json!({"user_id": "p2", "image_id": "zzz"}))).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (code, body) = call(&s, "GET", "/api/images/img0", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(&body[1..4], b"PNG");

    let flag = serde_json::json!({"user_id": "p2", "image_id": "img1", "reason": "wrong_label"});
    let (code, body) = call(&s, "POST", "/api/flags", Some(flag)).await;
    assert_eq!(code, StatusCode::OK);
    let x: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(x["count"], 1);
    let (code, _) = call(&s, "GET", "/api/maps/img0", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn websocket_round_to_solution() {
    let s = state();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(s.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });

    let (_, body) = call(&s, "POST", "/api/rounds", Some(serde_json::json!({"user_id": "ws", "image_id": "img0"}))).await;
    let round: RoundView = serde_json::from_slice(&body).unwrap();
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/api/rounds/{}/ws", round.round_id))
        .await
        .unwrap();

    let next = async |ws: &mut tokio_tungstenite::WebSocketStream<_>| -> ServerMessage {
        loop {
            match ws.next().await.unwrap().unwrap() {
                Message::Text(t) => return serde_json::from_str(&t).unwrap(),
                _ => continue,
            }
        }
    };

    ws.send(Message::text(r#"{"type":"bubbles","events":[{"t_ms":400,"x":0,"y":0}]}"#)).await.unwrap();
    match next(&mut ws).await {
        ServerMessage::Partner { solved, top5 } => {
            assert!(!solved);
            assert_eq!(top5.len(), 5);
        }
        other => panic!("expected a partner message, got {other:?}"),
    }
    ws.send(Message::text("not json")).await.unwrap();
    assert!(matches!(next(&mut ws).await, ServerMessage::Error { .. }));

    ws.send(Message::text(r#"{"type":"bubbles","events":[{"t_ms":1750,"x":64,"y":64}]}"#)).await.unwrap();
    assert_eq!(next(&mut ws).await, ServerMessage::Partner { top5: vec![3, 0, 1, 2, 4], solved: true });
    assert_eq!(
        next(&mut ws).await,
        ServerMessage::End { status: RoundStatus::Solved, score: (7000.0 - 1750.0) / 7000.0 }
    );

    let (_, body) = call(&s, "GET", "/api/leaderboard", None).await;
    let board: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(board[0]["user_id"], "ws");
    let (code, body) = call(&s, "GET", "/api/maps/img0", None).await;
    assert_eq!(code, StatusCode::OK);
    let map: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(map["participant_count"], 1);
}
