//! Game state behind an append-only NDJSON log.
//!
//! Every change is a [`LogEntry`] applied by the same code that replays the
//! log, so a restarted store reaches the identical state.
//! Snapshots record the state after a known number of entries; opening a store
//! loads the snapshot and replays the rest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gala_core::clickme::{aggregate_maps, export_maps, ImportanceMap, MapIndexRecord};
use gala_core::dataset::Sample;
use gala_core::imageops::Image;
use serde::{Deserialize, Serialize};

use crate::error::{GameError, Result};
use crate::partner::PartnerClassifier;
use crate::round::{Bubble, RoundState, RoundStatus, Verdict, TOP_K};

pub const LOG_FILE: &str = "game-log.ndjson";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogImage {
    pub id: String,
    pub label: usize,
    pub image: Image,
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    images: BTreeMap<String, CatalogImage>,
}

impl Catalog {
    pub fn new(images: impl IntoIterator<Item = CatalogImage>) -> Self {
        Self { images: images.into_iter().map(|i| (i.id.clone(), i)).collect() }
    }

    /// Ids are the file stems of the sample paths.
    pub fn from_samples(samples: &[Sample]) -> Self {
        Self::new(samples.iter().map(|s| CatalogImage {
            id: Path::new(&s.id)
                .file_stem()
                .map_or_else(|| s.id.clone(), |f| f.to_string_lossy().into_owned()),
            label: s.label,
            image: s.image.clone(),
        }))
    }

    pub fn get(&self, id: &str) -> Result<&CatalogImage> {
        self.images.get(id).ok_or_else(|| GameError::UnknownImage(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    BadQuality,
    WrongLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub image_id: String,
    /// Distinct users who flagged the image.
    pub count: usize,
    pub users: BTreeSet<String>,
    pub reasons: BTreeMap<FlagReason, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    RoundStarted { round_id: u64, user_id: String, image_id: String, started_at_unix_ms: u64 },
    Bubbles { round_id: u64, events: Vec<Bubble> },
    Verdict { round_id: u64, t_ms: u64, top5: Vec<usize> },
    PartnerFailed { round_id: u64, t_ms: u64 },
    Timeout { round_id: u64, t_ms: u64 },
    Flag { user_id: String, image_id: String, reason: FlagReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizedRound {
    pub round_id: u64,
    pub user_id: String,
    pub image_id: String,
    pub label: usize,
    pub status: RoundStatus,
    pub score: f64,
    pub ended_at_ms: u64,
    pub height: usize,
    pub width: usize,
    pub events: Vec<Bubble>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderEntry {
    pub user_id: String,
    pub total: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ActiveRecord {
    round_id: u64,
    user_id: String,
    image_id: String,
    started_at_unix_ms: u64,
    events: Vec<Bubble>,
    last_partner_ms: Option<u64>,
    partner_failures: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    log_entries: u64,
    next_round_id: u64,
    active: Vec<ActiveRecord>,
    finalized: Vec<FinalizedRound>,
    flags: Vec<Exclusion>,
}

/// Player-size rasterization of a finished round.
pub fn round_map(round: &FinalizedRound) -> Result<ImportanceMap> {
    let mut r = RoundState::new(round.round_id, "", &round.image_id, round.label, round.height, round.width, 0);
    r.events = round.events.clone();
    r.player_map()
}

pub fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

pub fn valid_user_id(user: &str) -> bool {
    !user.is_empty()
        && user.len() <= 64
        && user.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
}

pub struct GameStore {
    catalog: Catalog,
    dir: Option<PathBuf>,
    log: Option<BufWriter<fs::File>>,
    entries: u64,
    next_round_id: u64,
    active: BTreeMap<u64, RoundState>,
    by_user: BTreeMap<String, u64>,
    finalized: BTreeMap<u64, FinalizedRound>,
    flags: BTreeMap<String, Exclusion>,
}

impl GameStore {
    pub fn in_memory(catalog: Catalog) -> Self {
        Self {
            catalog,
            dir: None,
            log: None,
            entries: 0,
            next_round_id: 1,
            active: BTreeMap::new(),
            by_user: BTreeMap::new(),
            finalized: BTreeMap::new(),
            flags: BTreeMap::new(),
        }
    }

    /// Load the snapshot in `dir` if there is one, replay the log past it,
    /// and keep appending to the same log.
    pub fn open(dir: &Path, catalog: Catalog) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut store = Self::in_memory(catalog);
        let snap_path = dir.join(SNAPSHOT_FILE);
        if snap_path.exists() {
            let snap: Snapshot = serde_json::from_slice(&fs::read(&snap_path)?)
                .map_err(|e| GameError::CorruptLog(format!("{SNAPSHOT_FILE}: {e}")))?;
            store.restore(snap)?;
        }
        let log_path = dir.join(LOG_FILE);
        if log_path.exists() {
            let file = fs::File::open(&log_path)?;
            let mut seen = 0u64;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                seen += 1;
                if seen <= store.entries {
                    continue;
                }
                let entry: LogEntry = serde_json::from_str(&line)
                    .map_err(|e| GameError::CorruptLog(format!("{LOG_FILE} line {}: {e}", n + 1)))?;
                store
                    .apply(&entry)
                    .map_err(|e| GameError::CorruptLog(format!("{LOG_FILE} line {}: {e}", n + 1)))?;
                store.entries += 1;
            }
        }
        store.log = Some(BufWriter::new(
            fs::OpenOptions::new().create(true).append(true).open(&log_path)?,
        ));
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    fn restore(&mut self, snap: Snapshot) -> Result<()> {
        self.entries = snap.log_entries;
        self.next_round_id = snap.next_round_id;
        for rec in snap.active {
            let img = self.catalog.get(&rec.image_id)?;
            let mut r = RoundState::new(
                rec.round_id,
                rec.user_id.clone(),
                rec.image_id,
                img.label,
                img.image.height,
                img.image.width,
                rec.started_at_unix_ms,
            );
            r.apply_bubbles(&rec.events)?;
            r.last_partner_ms = rec.last_partner_ms;
            r.partner_failures = rec.partner_failures;
            self.by_user.insert(rec.user_id, rec.round_id);
            self.active.insert(rec.round_id, r);
        }
        self.finalized = snap.finalized.into_iter().map(|f| (f.round_id, f)).collect();
        self.flags = snap.flags.into_iter().map(|x| (x.image_id.clone(), x)).collect();
        Ok(())
    }

    /// Write the current state next to the log. No-op for in-memory stores.
    pub fn snapshot(&mut self) -> Result<()> {
        let Some(dir) = self.dir.clone() else { return Ok(()) };
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        let snap = Snapshot {
            log_entries: self.entries,
            next_round_id: self.next_round_id,
            active: self
                .active
                .values()
                .map(|r| ActiveRecord {
                    round_id: r.round_id,
                    user_id: r.user_id.clone(),
                    image_id: r.image_id.clone(),
                    started_at_unix_ms: r.started_at_unix_ms,
                    events: r.events.clone(),
                    last_partner_ms: r.last_partner_ms,
                    partner_failures: r.partner_failures,
                })
                .collect(),
            finalized: self.finalized.values().cloned().collect(),
            flags: self.flags.values().cloned().collect(),
        };
        let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec(&snap)?)?;
        fs::rename(tmp, dir.join(SNAPSHOT_FILE))?;
        Ok(())
    }

    fn commit(&mut self, entry: LogEntry) -> Result<()> {
        self.apply(&entry)?;
        if let Some(log) = self.log.as_mut() {
            writeln!(log, "{}", serde_json::to_string(&entry)?)?;
            log.flush()?;
        }
        self.entries += 1;
        Ok(())
    }

    fn active_mut(&mut self, round_id: u64) -> Result<&mut RoundState> {
        if self.finalized.contains_key(&round_id) {
            return Err(GameError::RoundNotActive(round_id));
        }
        self.active.get_mut(&round_id).ok_or(GameError::UnknownRound(round_id))
    }

    fn apply(&mut self, entry: &LogEntry) -> Result<()> {
        match entry {
            LogEntry::RoundStarted { round_id, user_id, image_id, started_at_unix_ms } => {
                if let Some(&open) = self.by_user.get(user_id) {
                    return Err(GameError::ActiveRoundExists { user: user_id.clone(), round_id: open });
                }
                if self.active.contains_key(round_id) || self.finalized.contains_key(round_id) {
                    return Err(GameError::CorruptLog(format!("round {round_id} started twice")));
                }
                let img = self.catalog.get(image_id)?;
                let r = RoundState::new(
                    *round_id,
                    user_id.clone(),
                    image_id.clone(),
                    img.label,
                    img.image.height,
                    img.image.width,
                    *started_at_unix_ms,
                );
                self.active.insert(*round_id, r);
                self.by_user.insert(user_id.clone(), *round_id);
                self.next_round_id = self.next_round_id.max(round_id + 1);
            }
            LogEntry::Bubbles { round_id, events } => {
                self.active_mut(*round_id)?.apply_bubbles(events)?;
            }
            LogEntry::Verdict { round_id, t_ms, top5 } => {
                self.active_mut(*round_id)?.apply_verdict(*t_ms, top5)?;
            }
            LogEntry::PartnerFailed { round_id, t_ms } => {
                let r = self.active_mut(*round_id)?;
                r.last_partner_ms = Some(*t_ms);
                r.partner_failures += 1;
            }
            LogEntry::Timeout { round_id, t_ms } => {
                let r = self.active_mut(*round_id)?;
                if !r.tick(*t_ms) {
                    return Err(GameError::InvalidEvent(format!("round {round_id} cannot time out at {t_ms} ms")));
                }
            }
            LogEntry::Flag { user_id, image_id, reason } => {
                self.catalog.get(image_id)?;
                let x = self.flags.entry(image_id.clone()).or_insert_with(|| Exclusion {
                    image_id: image_id.clone(),
                    count: 0,
                    users: BTreeSet::new(),
                    reasons: BTreeMap::new(),
                });
                if x.users.insert(user_id.clone()) {
                    *x.reasons.entry(*reason).or_default() += 1;
                    x.count = x.users.len();
                }
            }
        }
        if let LogEntry::Bubbles { round_id, .. }
        | LogEntry::Verdict { round_id, .. }
        | LogEntry::Timeout { round_id, .. } = entry
        {
            if self.active.get(round_id).is_some_and(|r| !r.is_active()) {
                self.finalize_round(*round_id)?;
            }
        }
        Ok(())
    }

    /// Move an ended round into the permanent record. Stores call this as soon
    /// as a round ends; a second call is an error.
    pub fn finalize_round(&mut self, round_id: u64) -> Result<&FinalizedRound> {
        if self.finalized.contains_key(&round_id) {
            return Err(GameError::AlreadyFinalized(round_id));
        }
        let r = self.active.get(&round_id).ok_or(GameError::UnknownRound(round_id))?;
        if r.is_active() {
            return Err(GameError::StillActive(round_id));
        }
        let r = self.active.remove(&round_id).expect("checked above");
        self.by_user.remove(&r.user_id);
        let done = FinalizedRound {
            round_id,
            user_id: r.user_id,
            image_id: r.image_id,
            label: r.label,
            status: r.status,
            score: r.score,
            ended_at_ms: r.ended_at_ms.unwrap_or(r.duration_budget_ms),
            height: r.height,
            width: r.width,
            events: r.events,
        };
        Ok(self.finalized.entry(round_id).or_insert(done))
    }

    fn rounds_played(&self, image_id: &str) -> usize {
        self.active.values().filter(|r| r.image_id == image_id).count()
            + self.finalized.values().filter(|r| r.image_id == image_id).count()
    }

    /// Start a round on `image_id`, or on the least-played unflagged image.
    pub fn start_round(&mut self, user_id: &str, image_id: Option<&str>) -> Result<RoundState> {
        if !valid_user_id(user_id) {
            return Err(GameError::InvalidUser(user_id.to_string()));
        }
        if let Some(&open) = self.by_user.get(user_id) {
            return Err(GameError::ActiveRoundExists { user: user_id.to_string(), round_id: open });
        }
        let image_id = match image_id {
            Some(id) => {
                self.catalog.get(id)?;
                if self.flags.contains_key(id) {
                    return Err(GameError::UnknownImage(format!("{id} (excluded)")));
                }
                id.to_string()
            }
            None => self
                .catalog
                .ids()
                .filter(|id| !self.flags.contains_key(*id))
                .min_by_key(|id| self.rounds_played(id))
                .ok_or(GameError::NoImages)?
                .to_string(),
        };
        let round_id = self.next_round_id;
        self.commit(LogEntry::RoundStarted {
            round_id,
            user_id: user_id.to_string(),
            image_id,
            started_at_unix_ms: unix_ms(),
        })?;
        Ok(self.active[&round_id].clone())
    }

    /// Stamp a batch of bubbles. Returns how many were kept; the rest arrived
    /// after the budget and ended the round.
    pub fn apply_bubbles(&mut self, round_id: u64, events: &[Bubble]) -> Result<usize> {
        let mut trial = self.active_mut(round_id)?.clone();
        let kept = trial.apply_bubbles(events)?;
        if kept > 0 {
            self.commit(LogEntry::Bubbles { round_id, events: events[..kept].to_vec() })?;
        }
        if !trial.is_active() {
            self.commit(LogEntry::Timeout { round_id, t_ms: events[kept].t_ms })?;
        }
        Ok(kept)
    }

    /// End the round if `now_ms` is past the budget. Returns true when it did.
    pub fn tick(&mut self, round_id: u64, now_ms: u64) -> Result<bool> {
        let r = self.active_mut(round_id)?;
        if r.is_active() && now_ms >= r.duration_budget_ms {
            self.commit(LogEntry::Timeout { round_id, t_ms: now_ms })?;
            return Ok(true);
        }
        Ok(false)
    }

    /// The partner's view when a classifier call at `now_ms` is allowed.
    pub fn partner_request(&mut self, round_id: u64, now_ms: u64) -> Result<Option<Image>> {
        if self.tick(round_id, now_ms)? {
            return Ok(None);
        }
        let r = self.active_mut(round_id)?;
        if !r.partner_due(now_ms) {
            return Ok(None);
        }
        let r = &self.active[&round_id];
        Ok(Some(r.partner_image(&self.catalog.get(&r.image_id)?.image)?))
    }

    /// Apply a classifier answer obtained from [`Self::partner_request`]. Rounds
    /// that ended in the meantime ignore it.
    pub fn partner_result(
        &mut self,
        round_id: u64,
        now_ms: u64,
        answer: std::result::Result<Vec<usize>, String>,
    ) -> Result<Option<Verdict>> {
        if !self.active.get(&round_id).is_some_and(RoundState::is_active) {
            return Ok(None);
        }
        match answer {
            Ok(ranked) => {
                let top5: Vec<usize> = ranked.into_iter().take(TOP_K).collect();
                self.commit(LogEntry::Verdict { round_id, t_ms: now_ms, top5: top5.clone() })?;
                let solved = self.finalized.get(&round_id).is_some_and(|f| f.status == RoundStatus::Solved);
                Ok(Some(Verdict { t_ms: now_ms, top5, solved }))
            }
            Err(e) => {
                tracing::warn!(round = round_id, error = %e, "partner classifier failed");
                self.commit(LogEntry::PartnerFailed { round_id, t_ms: now_ms })?;
                Ok(None)
            }
        }
    }

    /// Bubbles then one partner check at the time of the last event, all inline.
    pub fn play(
        &mut self,
        round_id: u64,
        events: &[Bubble],
        classifier: &dyn PartnerClassifier,
    ) -> Result<Option<Verdict>> {
        let kept = self.apply_bubbles(round_id, events)?;
        if kept < events.len() || kept == 0 {
            return Ok(None);
        }
        let now = events[kept - 1].t_ms;
        match self.partner_request(round_id, now)? {
            Some(view) => self.partner_result(round_id, now, classifier.predict(&view)),
            None => Ok(None),
        }
    }

    pub fn flag_image(&mut self, user_id: &str, image_id: &str, reason: FlagReason) -> Result<Exclusion> {
        if !valid_user_id(user_id) {
            return Err(GameError::InvalidUser(user_id.to_string()));
        }
        self.catalog.get(image_id)?;
        self.commit(LogEntry::Flag { user_id: user_id.to_string(), image_id: image_id.to_string(), reason })?;
        Ok(self.flags[image_id].clone())
    }

    pub fn active_round(&self, round_id: u64) -> Option<&RoundState> {
        self.active.get(&round_id)
    }

    pub fn finalized_round(&self, round_id: u64) -> Option<&FinalizedRound> {
        self.finalized.get(&round_id)
    }

    pub fn finalized_rounds(&self) -> impl Iterator<Item = &FinalizedRound> {
        self.finalized.values()
    }

    pub fn exclusions(&self) -> impl Iterator<Item = &Exclusion> {
        self.flags.values()
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn log_entries(&self) -> u64 {
        self.entries
    }

    /// Totals per user, highest first, ties by user id.
    pub fn leaderboard(&self) -> Vec<LeaderEntry> {
        let mut totals: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for f in self.finalized.values() {
            let t = totals.entry(&f.user_id).or_default();
            t.0 += f.score;
            t.1 += 1;
        }
        let mut out: Vec<LeaderEntry> = totals
            .into_iter()
            .map(|(u, (total, rounds))| LeaderEntry { user_id: u.to_string(), total, rounds })
            .collect();
        out.sort_by(|a, b| b.total.total_cmp(&a.total).then_with(|| a.user_id.cmp(&b.user_id)));
        out
    }

    /// Aggregate of every finished round's player map for one image.
    pub fn image_map(&self, image_id: &str) -> Result<Option<ImportanceMap>> {
        self.catalog.get(image_id)?;
        let maps = self
            .finalized
            .values()
            .filter(|f| f.image_id == image_id)
            .map(round_map)
            .collect::<Result<Vec<_>>>()?;
        if maps.is_empty() {
            return Ok(None);
        }
        Ok(Some(aggregate_maps(&maps)?))
    }

    /// Aggregated maps of every played, unflagged image as a map dataset folder.
    pub fn export(&self, dir: &Path) -> Result<Vec<MapIndexRecord>> {
        let mut maps = Vec::new();
        for id in self.catalog.ids() {
            if self.flags.contains_key(id) {
                continue;
            }
            if let Some(m) = self.image_map(id)? {
                maps.push((m, self.catalog.get(id)?.label));
            }
        }
        Ok(export_maps(dir, &maps)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partner::RevealThreshold;

    fn catalog() -> Catalog {
        Catalog::new((0..3).map(|i| CatalogImage {
            id: format!("im{i}"),
            label: i,
            image: Image::filled(64, 64, 3, 0.25),
        }))
    }

    #[test]
    fn one_active_round_per_user() {
        let mut s = GameStore::in_memory(catalog());
        s.start_round("ann", None).unwrap();
        assert!(matches!(s.start_round("ann", None), Err(GameError::ActiveRoundExists { .. })));
        assert!(s.start_round("bob", None).is_ok());
        assert!(matches!(s.start_round("", None), Err(GameError::InvalidUser(_))));
        assert!(matches!(s.start_round("cy", Some("nope")), Err(GameError::UnknownImage(_))));
    }

    #[test]
    fn least_played_image_is_next() {
        let mut s = GameStore::in_memory(catalog());
        let a = s.start_round("a", None).unwrap();
        let b = s.start_round("b", None).unwrap();
        assert_eq!((a.image_id.as_str(), b.image_id.as_str()), ("im0", "im1"));
    }

    #[test]
    fn double_finalize_is_rejected() {
        let mut s = GameStore::in_memory(catalog());
        let r = s.start_round("a", None).unwrap();
        assert!(matches!(s.finalize_round(r.round_id), Err(GameError::StillActive(_))));
        s.tick(r.round_id, 7000).unwrap();
        assert!(matches!(s.finalize_round(r.round_id), Err(GameError::AlreadyFinalized(_))));
    }

    #[test]
    fn flags_fold_by_user_and_exclude() {
        let mut s = GameStore::in_memory(catalog());
        s.flag_image("a", "im1", FlagReason::WrongLabel).unwrap();
        s.flag_image("a", "im1", FlagReason::BadQuality).unwrap();
        let x = s.flag_image("b", "im1", FlagReason::BadQuality).unwrap();
        assert_eq!(x.count, 2);
        assert_eq!(s.exclusions().count(), 1);
        assert!(s.start_round("c", Some("im1")).is_err());
        let picks: Vec<String> = ["c", "d", "e"].iter().map(|u| s.start_round(u, None).unwrap().image_id).collect();
        assert!(!picks.contains(&"im1".to_string()));
    }

    #[test]
    fn leaderboard_sums_scores() {
        let mut s = GameStore::in_memory(catalog());
        let stub = RevealThreshold { label: 0, classes: 10, threshold: 1 };
        let r = s.start_round("a", Some("im0")).unwrap();
        s.play(r.round_id, &[Bubble { t_ms: 3500, x: 30, y: 30 }], &stub).unwrap();
        let r = s.start_round("a", Some("im1")).unwrap();
        s.tick(r.round_id, 7000).unwrap();
        let lb = s.leaderboard();
        assert_eq!(lb.len(), 1);
        assert_eq!((lb[0].total, lb[0].rounds), (0.5, 2));
    }
}
