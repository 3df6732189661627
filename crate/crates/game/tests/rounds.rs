use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use clickme_game::partner::{RevealThreshold, Unavailable};
use clickme_game::store::{round_map, FlagReason, LOG_FILE};
use clickme_game::{Bubble, Catalog, CatalogImage, GameStore, PartnerClassifier, RoundState, RoundStatus};
use gala_core::clickme::{import_maps, PARTNER_BUBBLE, PLAYER_BUBBLE};
use gala_core::imageops::Image;

const SIDE: usize = 256;

fn catalog() -> Catalog {
    Catalog::new((0..4).map(|i| CatalogImage {
        id: format!("img{i}"),
        label: i,
        image: Image::filled(SIDE, SIDE, 3, 0.2 + 0.1 * i as f64),
    }))
}

fn square(cx: u32, cy: u32, size: usize) -> BTreeSet<(usize, usize)> {
    let half = (size / 2) as i64;
    let mut out = BTreeSet::new();
    for y in cy as i64 - half..cy as i64 - half + size as i64 {
        for x in cx as i64 - half..cx as i64 - half + size as i64 {
            if (0..SIDE as i64).contains(&x) && (0..SIDE as i64).contains(&y) {
                out.insert((y as usize, x as usize));
            }
        }
    }
    out
}

fn bubble(t_ms: u64, x: u32, y: u32) -> Bubble {
    Bubble { t_ms, x, y }
}

#[test]
fn scripted_session_solves_with_exact_score_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let stub = RevealThreshold { label: 2, classes: 10, threshold: 200 };
    let script = [bubble(500, 0, 0), bubble(1200, 100, 100)];
    let (round_id, score, map) = {
        let mut store = GameStore::open(dir.path(), catalog()).unwrap();
        let r = store.start_round("ann", Some("img2")).unwrap();
        // a corner bubble shows 11 x 11 pixels to the partner: not enough
        let v = store.play(r.round_id, &script[..1], &stub).unwrap().unwrap();
        assert!(!v.solved);
        let v = store.play(r.round_id, &script[1..], &stub).unwrap().unwrap();
        assert!(v.solved);
        let f = store.finalized_round(r.round_id).unwrap().clone();
        assert_eq!(f.status, RoundStatus::Solved);
        (r.round_id, f.score, round_map(&f).unwrap())
    };
    assert_eq!(score, (7000.0 - 1200.0) / 7000.0);

    let replayed = GameStore::open(dir.path(), catalog()).unwrap();
    let f = replayed.finalized_round(round_id).unwrap();
    assert_eq!(f.score, score);
    assert_eq!(round_map(f).unwrap(), map);

    let mut expect = vec![0.0; SIDE * SIDE];
    for e in &script {
        for (y, x) in square(e.x, e.y, PLAYER_BUBBLE) {
            expect[y * SIDE + x] += 1.0;
        }
    }
    assert_eq!(map.grid.data, expect);
}

#[test]
fn timeout_scores_zero_and_keeps_the_map() {
    let mut store = GameStore::in_memory(catalog());
    let r = store.start_round("bo", Some("img1")).unwrap();
    let never = RevealThreshold { label: 1, classes: 10, threshold: usize::MAX };
    store.play(r.round_id, &[bubble(300, 40, 40), bubble(900, 60, 60)], &never).unwrap();
    assert!(store.tick(r.round_id, 7000).unwrap());
    let f = store.finalized_round(r.round_id).unwrap();
    assert_eq!((f.status, f.score), (RoundStatus::Timeout, 0.0));
    let map = store.image_map("img1").unwrap().unwrap();
    assert!(map.grid.data.iter().filter(|&&v| v > 0.0).count() >= PLAYER_BUBBLE * PLAYER_BUBBLE);
}

#[test]
fn zero_events_at_budget_times_out() {
    let mut store = GameStore::in_memory(catalog());
    let r = store.start_round("cy", None).unwrap();
    assert!(store.partner_request(r.round_id, 7000).unwrap().is_none());
    let f = store.finalized_round(r.round_id).unwrap();
    assert_eq!((f.status, f.score), (RoundStatus::Timeout, 0.0));
}

#[test]
fn partner_mask_is_the_union_and_covers_the_player() {
    let mut r = RoundState::new(1, "u", "img0", 0, SIDE, SIDE, 0);
    let events = [bubble(1, 100, 100), bubble(2, 110, 104), bubble(3, 5, 250), bubble(4, 255, 0)];
    r.apply_bubbles(&events).unwrap();
    let mut union = BTreeSet::new();
    for e in &events {
        union.extend(square(e.x, e.y, PARTNER_BUBBLE));
    }
    let got: BTreeSet<(usize, usize)> = (0..SIDE * SIDE)
        .filter(|&i| r.revealed_mask[i])
        .map(|i| (i / SIDE, i % SIDE))
        .collect();
    assert_eq!(got, union);
    let player = r.player_map().unwrap();
    for (i, &v) in player.grid.data.iter().enumerate() {
        if v > 0.0 {
            assert!(r.revealed_mask[i]);
        }
    }
}

#[test]
fn partner_view_is_gray_outside_the_mask() {
    let img = Image::filled(SIDE, SIDE, 3, 0.9);
    let mut r = RoundState::new(1, "u", "img0", 0, SIDE, SIDE, 0);
    r.apply_bubbles(&[bubble(1, 50, 50)]).unwrap();
    let view = r.partner_image(&img).unwrap();
    assert_eq!(view.at(50, 50, 0), 0.9);
    assert_eq!(view.at(0, 0, 0), 0.5);
    let shown = view.data.chunks_exact(3).filter(|px| px[0] == 0.9).count();
    assert_eq!(shown, PARTNER_BUBBLE * PARTNER_BUBBLE);
}

struct Counting(AtomicUsize);

impl PartnerClassifier for Counting {
    fn predict(&self, _masked: &Image) -> Result<Vec<usize>, String> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok(vec![9, 8, 7, 6, 5])
    }
}

#[test]
fn partner_calls_are_spaced_100ms() {
    let mut store = GameStore::in_memory(catalog());
    let r = store.start_round("dee", Some("img0")).unwrap();
    let calls = Counting(AtomicUsize::new(0));
    for t in [10, 50, 109, 110, 150, 215] {
        store.play(r.round_id, &[bubble(t, 20, 20)], &calls).unwrap();
    }
    assert_eq!(calls.0.load(Ordering::SeqCst), 3);
}

#[test]
fn failing_partner_does_not_end_the_round() {
    let mut store = GameStore::in_memory(catalog());
    let r = store.start_round("eve", None).unwrap();
    assert!(store.play(r.round_id, &[bubble(10, 20, 20)], &Unavailable).unwrap().is_none());
    let active = store.active_round(r.round_id).unwrap();
    assert_eq!((active.status, active.partner_failures), (RoundStatus::Active, 1));
}

#[test]
fn active_round_survives_restart_and_snapshot_matches_replay() {
    let dir = tempfile::tempdir().unwrap();
    let stub = RevealThreshold { label: 0, classes: 10, threshold: 200 };
    let id = {
        let mut s = GameStore::open(dir.path(), catalog()).unwrap();
        let a = s.start_round("a", Some("img0")).unwrap();
        s.play(a.round_id, &[bubble(700, 128, 128)], &stub).unwrap();
        s.snapshot().unwrap();
        let b = s.start_round("b", Some("img1")).unwrap();
        s.apply_bubbles(b.round_id, &[bubble(40, 10, 10)]).unwrap();
        b.round_id
    };
    let with_snapshot = GameStore::open(dir.path(), catalog()).unwrap();
    let pending = with_snapshot.active_round(id).unwrap();
    assert_eq!(pending.events, vec![bubble(40, 10, 10)]);

    let bare = tempfile::tempdir().unwrap();
    std::fs::copy(dir.path().join(LOG_FILE), bare.path().join(LOG_FILE)).unwrap();
    let full = GameStore::open(bare.path(), catalog()).unwrap();
    assert_eq!(full.active_round(id), with_snapshot.active_round(id));
    assert_eq!(full.leaderboard(), with_snapshot.leaderboard());
    assert_eq!(
        full.finalized_rounds().collect::<Vec<_>>(),
        with_snapshot.finalized_rounds().collect::<Vec<_>>()
    );
    assert_eq!(full.log_entries(), with_snapshot.log_entries());
}

#[test]
fn leaderboard_matches_a_recount() {
    let mut store = GameStore::in_memory(catalog());
    let plan = [("ann", "img0", Some(1000)), ("bo", "img1", None), ("ann", "img2", Some(4200)), ("bo", "img3", Some(0))];
    for (user, image, solve) in plan {
        let r = store.start_round(user, Some(image)).unwrap();
        match solve {
            Some(t) => {
                store.apply_bubbles(r.round_id, &[bubble(t, 30, 30)]).unwrap();
                store.partner_result(r.round_id, t, Ok(vec![r.label])).unwrap();
            }
            None => {
                store.tick(r.round_id, 9000).unwrap();
            }
        }
    }
    let mut recount: BTreeMap<String, f64> = BTreeMap::new();
    for f in store.finalized_rounds() {
        *recount.entry(f.user_id.clone()).or_default() += f.score;
    }
    for e in store.leaderboard() {
        assert_eq!(e.total, recount[&e.user_id]);
    }
    assert_eq!(recount["ann"], 6000.0 / 7000.0 + 2800.0 / 7000.0);
    assert_eq!(recount["bo"], 1.0);
}

#[test]
fn export_lists_played_unflagged_images() {
    let mut store = GameStore::in_memory(catalog());
    for (user, image) in [("a", "img0"), ("b", "img1")] {
        let r = store.start_round(user, Some(image)).unwrap();
        store.apply_bubbles(r.round_id, &[bubble(100, 64, 64)]).unwrap();
        store.tick(r.round_id, 7000).unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    let recs = store.export(out.path()).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(import_maps(out.path()).unwrap().len(), 2);

    store.flag_image("c", "img1", FlagReason::BadQuality).unwrap();
    let out = tempfile::tempdir().unwrap();
    let ids: Vec<String> = store.export(out.path()).unwrap().into_iter().map(|r| r.image_id).collect();
    assert_eq!(ids, vec!["img0".to_string()]);
}
