//! The classifier that plays alongside the human.

use gala_core::backbone::Model;
use gala_core::imageops::{resize, Image, ResizeMode};

use crate::round::HIDDEN_GRAY;

pub trait PartnerClassifier: Send + Sync {
    /// Labels ranked from most to least likely for a partially revealed image.
    fn predict(&self, masked: &Image) -> Result<Vec<usize>, String>;
}

impl PartnerClassifier for Model {
    fn predict(&self, masked: &Image) -> Result<Vec<usize>, String> {
        let [h, w, c] = self.config().input;
        if masked.channels != c {
            return Err(format!("partner expects {c} channels, got {}", masked.channels));
        }
        let view = if (masked.height, masked.width) == (h, w) {
            masked.clone()
        } else {
            resize(masked, h, w, ResizeMode::Bilinear).map_err(|e| e.to_string())?
        };
        let batch = Image::batch(&[&view]).map_err(|e| e.to_string())?;
        let inf = self.infer(&batch).map_err(|e| e.to_string())?;
        inf.ranked().into_iter().next().ok_or_else(|| "empty prediction".to_string())
    }
}

/// Answers `label` first once at least `threshold` pixels differ from the
/// hidden gray, and a label-free ranking before that.
#[derive(Debug, Clone)]
pub struct RevealThreshold {
    pub label: usize,
    pub classes: usize,
    pub threshold: usize,
}

impl PartnerClassifier for RevealThreshold {
    fn predict(&self, masked: &Image) -> Result<Vec<usize>, String> {
        let c = masked.channels;
        let visible = masked
            .data
            .chunks_exact(c)
            .filter(|px| px.iter().any(|&v| v != HIDDEN_GRAY))
            .count();
        let mut ranked: Vec<usize> = (0..self.classes).filter(|&l| l != self.label).collect();
        if visible >= self.threshold {
            ranked.insert(0, self.label);
        } else {
            ranked.push(self.label);
        }
        Ok(ranked)
    }
}

/// Always fails; rounds must keep running regardless.
#[derive(Debug, Clone, Default)]
pub struct Unavailable;

impl PartnerClassifier for Unavailable {
    fn predict(&self, _masked: &Image) -> Result<Vec<usize>, String> {
        Err("partner unavailable".into())
    }
}
