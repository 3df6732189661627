//! HTTP and WebSocket front end over a shared [`GameStore`].

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::GameError;
use crate::partner::PartnerClassifier;
use crate::round::{Bubble, RoundState, RoundStatus, DURATION_BUDGET_MS};
use crate::store::{unix_ms, Exclusion, FinalizedRound, FlagReason, GameStore, LeaderEntry};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Mutex<GameStore>>,
    pub partner: Arc<dyn PartnerClassifier>,
}

impl AppState {
    pub fn new(store: GameStore, partner: Arc<dyn PartnerClassifier>) -> Self {
        Self { store: Arc::new(Mutex::new(store)), partner }
    }

    fn lock(&self) -> MutexGuard<'_, GameStore> {
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundView {
    pub round_id: u64,
    pub user_id: String,
    pub image_id: String,
    pub label: usize,
    pub started_at_unix_ms: u64,
    pub duration_budget_ms: u64,
    pub player_bubble_size: u32,
    pub partner_bubble_size: u32,
    pub height: usize,
    pub width: usize,
    pub status: RoundStatus,
    pub score: f64,
    pub revealed_pixels: usize,
}

impl From<&RoundState> for RoundView {
    fn from(r: &RoundState) -> Self {
        Self {
            round_id: r.round_id,
            user_id: r.user_id.clone(),
            image_id: r.image_id.clone(),
            label: r.label,
            started_at_unix_ms: r.started_at_unix_ms,
            duration_budget_ms: r.duration_budget_ms,
            player_bubble_size: r.player_bubble_size,
            partner_bubble_size: r.partner_bubble_size,
            height: r.height,
            width: r.width,
            status: r.status,
            score: r.score,
            revealed_pixels: r.revealed_pixels(),
        }
    }
}

fn finished_view(f: &FinalizedRound) -> RoundView {
    let mut r = RoundState::new(f.round_id, f.user_id.clone(), f.image_id.clone(), f.label, f.height, f.width, 0);
    // replaying the kept events cannot fail: they were validated when played
    let _ = r.apply_bubbles(&f.events);
    r.status = f.status;
    r.score = f.score;
    RoundView::from(&r)
}

#[derive(Debug, Clone, Deserialize)]
pub struct StartRequest {
    pub user_id: String,
    #[serde(default)]
    pub image_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FlagRequest {
    pub user_id: String,
    pub image_id: String,
    pub reason: FlagReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapView {
    pub image_id: String,
    pub label: usize,
    pub participant_count: u32,
    pub height: usize,
    pub width: usize,
    /// Row-major share of players who revealed each pixel.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    Bubbles { events: Vec<Bubble> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Partner { top5: Vec<usize>, solved: bool },
    End { status: RoundStatus, score: f64 },
    Error { message: String },
}

pub struct ApiError(GameError);

impl From<GameError> for ApiError {
    fn from(e: GameError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = match &self.0 {
            GameError::UnknownImage(_) | GameError::UnknownRound(_) => StatusCode::NOT_FOUND,
            GameError::ActiveRoundExists { .. }
            | GameError::RoundNotActive(_)
            | GameError::AlreadyFinalized(_)
            | GameError::StillActive(_)
            | GameError::NoImages => StatusCode::CONFLICT,
            GameError::InvalidUser(_) | GameError::InvalidEvent(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (code, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/rounds", post(start_round))
        .route("/api/rounds/{round_id}", get(round))
        .route("/api/rounds/{round_id}/ws", get(round_socket))
        .route("/api/images/{image_id}", get(image_png))
        .route("/api/leaderboard", get(leaderboard))
        .route("/api/maps/{image_id}", get(image_map))
        .route("/api/flags", post(flag))
        .with_state(state)
}

async fn start_round(State(state): State<AppState>, Json(req): Json<StartRequest>) -> ApiResult<Json<RoundView>> {
    let r = state.lock().start_round(&req.user_id, req.image_id.as_deref())?;
    Ok(Json(RoundView::from(&r)))
}

async fn round(State(state): State<AppState>, Path(round_id): Path<u64>) -> ApiResult<Json<RoundView>> {
    let store = state.lock();
    if let Some(r) = store.active_round(round_id) {
        return Ok(Json(RoundView::from(r)));
    }
    let f = store.finalized_round(round_id).ok_or(GameError::UnknownRound(round_id))?;
    Ok(Json(finished_view(f)))
}

async fn image_png(State(state): State<AppState>, Path(image_id): Path<String>) -> ApiResult<Response> {
    let bytes = state.lock().catalog().get(&image_id)?.image.encode_png().map_err(GameError::from)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn leaderboard(State(state): State<AppState>) -> Json<Vec<LeaderEntry>> {
    Json(state.lock().leaderboard())
}

async fn image_map(State(state): State<AppState>, Path(image_id): Path<String>) -> ApiResult<Json<MapView>> {
    let store = state.lock();
    let label = store.catalog().get(&image_id)?.label;
    let map = store
        .image_map(&image_id)?
        .ok_or_else(|| GameError::UnknownImage(format!("{image_id} (no finished rounds)")))?;
    Ok(Json(MapView {
        image_id,
        label,
        participant_count: map.participant_count,
        height: map.grid.height,
        width: map.grid.width,
        values: map.grid.data,
    }))
}

async fn flag(State(state): State<AppState>, Json(req): Json<FlagRequest>) -> ApiResult<Json<Exclusion>> {
    Ok(Json(state.lock().flag_image(&req.user_id, &req.image_id, req.reason)?))
}

async fn round_socket(
    State(state): State<AppState>,
    Path(round_id): Path<u64>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    {
        let store = state.lock();
        if store.active_round(round_id).is_none() && store.finalized_round(round_id).is_none() {
            return Err(GameError::UnknownRound(round_id).into());
        }
    }
    Ok(ws.on_upgrade(move |socket| session(socket, state, round_id)))
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    match serde_json::to_string(msg) {
        Ok(text) => socket.send(Message::Text(text.into())).await.is_ok(),
        Err(_) => false,
    }
}

fn ended(store: &GameStore, round_id: u64) -> Option<ServerMessage> {
    store
        .finalized_round(round_id)
        .map(|f| ServerMessage::End { status: f.status, score: f.score })
}

/// Drive one round over a socket until it ends or the client leaves.
async fn session(mut socket: WebSocket, state: AppState, round_id: u64) {
    let (end, started) = {
        let store = state.lock();
        (ended(&store, round_id), store.active_round(round_id).map_or(0, |r| r.started_at_unix_ms))
    };
    if let Some(end) = end {
        send(&mut socket, &end).await;
        return;
    }
    let remaining = (started + DURATION_BUDGET_MS).saturating_sub(unix_ms());
    let deadline = tokio::time::Instant::now() + Duration::from_millis(remaining);
    loop {
        let msg = tokio::select! {
            m = socket.recv() => m,
            _ = tokio::time::sleep_until(deadline) => {
                let end = {
                    let mut store = state.lock();
                    let _ = store.tick(round_id, DURATION_BUDGET_MS);
                    ended(&store, round_id)
                };
                if let Some(end) = end {
                    send(&mut socket, &end).await;
                }
                return;
            }
        };
        let text = match msg {
            Some(Ok(Message::Text(t))) => t,
            Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
            Some(Ok(_)) => continue,
        };
        let events = match serde_json::from_str::<ClientMessage>(&text) {
            Ok(ClientMessage::Bubbles { events }) => events,
            Err(e) => {
                send(&mut socket, &ServerMessage::Error { message: format!("bad message: {e}") }).await;
                continue;
            }
        };
        let request = {
            let mut store = state.lock();
            match store.apply_bubbles(round_id, &events) {
                Ok(kept) if kept == events.len() && kept > 0 => {
                    let now = events[kept - 1].t_ms;
                    store.partner_request(round_id, now).map(|v| v.map(|v| (now, v)))
                }
                Ok(_) => Ok(None),
                Err(e) => Err(e),
            }
        };
        match request {
            Ok(Some((now, view))) => {
                let partner = state.partner.clone();
                let answer = tokio::task::spawn_blocking(move || partner.predict(&view))
                    .await
                    .unwrap_or_else(|e| Err(format!("partner task failed: {e}")));
                let verdict = state.lock().partner_result(round_id, now, answer);
                match verdict {
                    Ok(Some(v)) => {
                        if !send(&mut socket, &ServerMessage::Partner { top5: v.top5, solved: v.solved }).await {
                            return;
                        }
                    }
                    Ok(None) => {}
                    Err(e) => {
                        send(&mut socket, &ServerMessage::Error { message: e.to_string() }).await;
                    }
                }
            }
            Ok(None) => {}
            Err(e) => {
                send(&mut socket, &ServerMessage::Error { message: e.to_string() }).await;
            }
        }
        let end = ended(&state.lock(), round_id);
        if let Some(end) = end {
            send(&mut socket, &end).await;
            return;
        }
    }
}

/// Serve until the process is stopped, snapshotting the store once a minute.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "game server listening");
    let snap = state.clone();
    tokio::spawn(async move {
        let mut every = tokio::time::interval(Duration::from_secs(60));
        loop {
            every.tick().await;
            if let Err(e) = snap.lock().snapshot() {
                tracing::warn!(error = %e, "snapshot failed");
            }
        }
    });
    axum::serve(listener, router(state)).await
}

