//! One player's round: bubbles in, partner verdicts out, a timer-based score.

use gala_core::clickme::{rasterize_bubbles, stamp_span, BubbleEvent, ImportanceMap, PARTNER_BUBBLE, PLAYER_BUBBLE};
use gala_core::imageops::Image;
use serde::{Deserialize, Serialize};

use crate::error::{GameError, Result};
use crate::partner::PartnerClassifier;

pub const DURATION_BUDGET_MS: u64 = 7000;
/// Minimum spacing between two classifier calls for one round.
pub const PARTNER_INTERVAL_MS: u64 = 100;
/// Fill for pixels the partner cannot see.
pub const HIDDEN_GRAY: f64 = 0.5;
pub const TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundStatus {
    Active,
    Solved,
    Timeout,
}

/// One cursor sample, in image pixels, timed from the start of the round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bubble {
    pub t_ms: u64,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub t_ms: u64,
    pub top5: Vec<usize>,
    pub solved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
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
    /// What the partner sees, row-major.
    pub revealed_mask: Vec<bool>,
    /// Accepted player events in arrival order.
    pub events: Vec<Bubble>,
    pub status: RoundStatus,
    pub score: f64,
    pub ended_at_ms: Option<u64>,
    pub last_partner_ms: Option<u64>,
    pub partner_failures: u32,
}

impl RoundState {
    pub fn new(
        round_id: u64,
        user_id: impl Into<String>,
        image_id: impl Into<String>,
        label: usize,
        height: usize,
        width: usize,
        started_at_unix_ms: u64,
    ) -> Self {
        Self {
            round_id,
            user_id: user_id.into(),
            image_id: image_id.into(),
            label,
            started_at_unix_ms,
            duration_budget_ms: DURATION_BUDGET_MS,
            player_bubble_size: PLAYER_BUBBLE as u32,
            partner_bubble_size: PARTNER_BUBBLE as u32,
            height,
            width,
            revealed_mask: vec![false; height * width],
            events: Vec::new(),
            status: RoundStatus::Active,
            score: 0.0,
            ended_at_ms: None,
            last_partner_ms: None,
            partner_failures: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == RoundStatus::Active
    }

    pub fn revealed_pixels(&self) -> usize {
        self.revealed_mask.iter().filter(|&&r| r).count()
    }

    fn require_active(&self) -> Result<()> {
        if self.is_active() {
            Ok(())
        } else {
            Err(GameError::RoundNotActive(self.round_id))
        }
    }

    /// End the round without a score once the budget is spent. Returns true on transition.
    pub fn tick(&mut self, now_ms: u64) -> bool {
        if self.is_active() && now_ms >= self.duration_budget_ms {
            self.status = RoundStatus::Timeout;
            self.score = 0.0;
            self.ended_at_ms = Some(self.duration_budget_ms);
            true
        } else {
            false
        }
    }

    /// Stamp each event on the partner mask. Events at or past the budget end
    /// the round as a timeout and are dropped along with everything after them.
    /// Returns the number of events kept.
    pub fn apply_bubbles(&mut self, events: &[Bubble]) -> Result<usize> {
        self.require_active()?;
        let mut last = self.events.last().map_or(0, |e| e.t_ms);
        for e in events {
            if e.x as usize >= self.width || e.y as usize >= self.height {
                return Err(GameError::InvalidEvent(format!(
                    "bubble at ({}, {}) outside {}x{} image",
                    e.x, e.y, self.width, self.height
                )));
            }
            if e.t_ms < last {
                return Err(GameError::InvalidEvent(format!("t_ms {} goes back from {last}", e.t_ms)));
            }
            last = e.t_ms;
        }
        let mut kept = 0;
        for e in events {
            if self.tick(e.t_ms) {
                break;
            }
            for y in stamp_span(e.y, self.partner_bubble_size, self.height) {
                for x in stamp_span(e.x, self.partner_bubble_size, self.width) {
                    self.revealed_mask[y * self.width + x] = true;
                }
            }
            self.events.push(*e);
            kept += 1;
        }
        Ok(kept)
    }

    /// Whether a classifier call at `now_ms` respects the per-round spacing.
    pub fn partner_due(&self, now_ms: u64) -> bool {
        self.is_active() && self.last_partner_ms.is_none_or(|t| now_ms >= t + PARTNER_INTERVAL_MS)
    }

    /// Original pixels where the partner mask is set, gray elsewhere.
    pub fn partner_image(&self, image: &Image) -> Result<Image> {
        if (image.height, image.width) != (self.height, self.width) {
            return Err(GameError::InvalidEvent(format!(
                "image is {}x{}, round expects {}x{}",
                image.height, image.width, self.height, self.width
            )));
        }
        let c = image.channels;
        let mut out = Image::filled(self.height, self.width, c, HIDDEN_GRAY);
        for (i, _) in self.revealed_mask.iter().enumerate().filter(|(_, &r)| r) {
            out.data[i * c..i * c + c].copy_from_slice(&image.data[i * c..i * c + c]);
        }
        Ok(out)
    }

    /// Record a classifier answer made at `now_ms`. A top-5 hit solves the round.
    pub fn apply_verdict(&mut self, now_ms: u64, ranked: &[usize]) -> Result<Verdict> {
        self.require_active()?;
        self.last_partner_ms = Some(now_ms);
        let top5: Vec<usize> = ranked.iter().copied().take(TOP_K).collect();
        if self.tick(now_ms) {
            return Ok(Verdict { t_ms: now_ms, top5, solved: false });
        }
        let solved = top5.contains(&self.label);
        if solved {
            self.status = RoundStatus::Solved;
            self.score = (self.duration_budget_ms - now_ms) as f64 / self.duration_budget_ms as f64;
            self.ended_at_ms = Some(now_ms);
        }
        Ok(Verdict { t_ms: now_ms, top5, solved })
    }

    /// Ask the partner about the current view if the round is active and the
    /// throttle allows. A failing classifier leaves the round running.
    pub fn partner_tick(
        &mut self,
        image: &Image,
        classifier: &dyn PartnerClassifier,
        now_ms: u64,
    ) -> Result<Option<Verdict>> {
        if self.tick(now_ms) || !self.partner_due(now_ms) {
            return Ok(None);
        }
        let view = self.partner_image(image)?;
        match classifier.predict(&view) {
            Ok(ranked) => self.apply_verdict(now_ms, &ranked).map(Some),
            Err(e) => {
                tracing::warn!(round = self.round_id, error = %e, "partner classifier failed");
                self.last_partner_ms = Some(now_ms);
                self.partner_failures += 1;
                Ok(None)
            }
        }
    }

    /// The player's bubbles rasterized at player size.
    pub fn player_map(&self) -> Result<ImportanceMap> {
        let events: Vec<BubbleEvent> = self
            .events
            .iter()
            .map(|e| BubbleEvent {
                round_id: self.round_id,
                t_ms: e.t_ms,
                x: e.x,
                y: e.y,
                size: self.player_bubble_size,
            })
            .collect();
        Ok(rasterize_bubbles(&self.image_id, &events, self.height, self.width)?)
    }
}
