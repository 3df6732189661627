//! Lambda sweeps on a held-out split and the comparisons drawn from them.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Model};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::metrics::{paired_iou, SegmentationMask};
use crate::supervision::{evaluate, fit, EpochRecord, TrainConfig};

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub lambda: f64,
    pub seed: u64,
    pub selected_epoch: usize,
    pub val_error: f64,
    pub test_error: f64,
    pub test_top5_error: f64,
    /// Explained variability (percent) of test-set attention against the target maps.
    pub explained_variability: Option<f64>,
    pub seconds: f64,
    pub epochs: Vec<EpochRecord>,
}

impl RunSummary {
    pub fn test_accuracy(&self) -> f64 {
        1.0 - self.test_error
    }
}

pub struct Run {
    pub summary: RunSummary,
    pub test_attention: Option<Vec<Vec<f64>>>,
    pub model: Model,
}

/// Train one model at `cfg.lambda` and score it on `test`.
pub fn run_one(
    backbone: &BackboneConfig,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Run> {
    let start = Instant::now();
    let mut model = Model::build(backbone.clone(), cfg.seed)?;
    let report = fit(&mut model, train, val, cfg, &mut on_epoch)?;
    let eval = evaluate(&model, test, cfg)?;
    let sel = report.selected();
    Ok(Run {
        summary: RunSummary {
            lambda: cfg.lambda,
            seed: cfg.seed,
            selected_epoch: report.selected_epoch,
            val_error: sel.val_error,
            test_error: eval.error,
            test_top5_error: eval.top5_error,
            explained_variability: eval.explained.as_ref().map(|e| e.percentage),
            seconds: start.elapsed().as_secs_f64(),
            epochs: report.epochs.clone(),
        },
        test_attention: eval.attention_maps,
        model,
    })
}

/// Every `(lambda, seed)` pair, lambdas outermost.
pub fn sweep(
    backbone: &BackboneConfig,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    base: &TrainConfig,
    lambdas: &[f64],
    seeds: &[u64],
    mut on_run: impl FnMut(&Run),
) -> Result<Vec<Run>> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one lambda and one seed".into()));
    }
    let mut out = Vec::with_capacity(lambdas.len() * seeds.len());
    for &lambda in lambdas {
        for &seed in seeds {
            let cfg = TrainConfig { lambda, seed, ..base.clone() };
            let run = run_one(backbone, train, val, test, &cfg, |_| {})?;
            on_run(&run);
            out.push(run);
        }
    }
    Ok(out)
}

/// The positive lambda with the lowest mean validation error; ties go to the smaller lambda.
pub fn tuned_lambda(runs: &[RunSummary]) -> Option<f64> {
    let mut lambdas: Vec<f64> = runs.iter().map(|r| r.lambda).filter(|&l| l > 0.0).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let mean_val = |l: f64| {
        let v: Vec<f64> = runs.iter().filter(|r| r.lambda == l).map(|r| r.val_error).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    lambdas
        .into_iter()
        .map(|l| (l, mean_val(l)))
        .fold(None, |best: Option<(f64, f64)>, (l, e)| match best {
            Some((_, be)) if be <= e => best,
            _ => Some((l, e)),
        })
        .map(|(l, _)| l)
}

/// Binary test-set masks taken from each sample's map.
pub fn sample_masks(samples: &[Sample]) -> Result<Vec<SegmentationMask>> {
    samples
        .iter()
        .map(|s| {
            let map = s
                .map
                .as_ref()
                .ok_or_else(|| Error::Data(format!("{} has no map to use as a mask", s.id)))?;
            SegmentationMask::from_image(s.id.clone(), map)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouComparison {
    pub iou: f64,
    pub baseline_iou: f64,
    pub images: usize,
}

impl IouComparison {
    pub fn gain(&self) -> f64 {
        self.iou - self.baseline_iou
    }
}

/// Mean equalized IOU of `run` and `baseline` attention over the same masks.
pub fn compare_iou(run: &Run, baseline: &Run, masks: &[SegmentationMask]) -> Result<IouComparison> {
    let hw = run
        .model
        .config()
        .attention_hw()?
        .ok_or_else(|| Error::Config("model has no attention layers".into()))?;
    let (Some(a), Some(b)) = (&run.test_attention, &baseline.test_attention) else {
        return Err(Error::Config("both runs need attention maps".into()));
    };
    let (x, y) = paired_iou(a, b, hw, masks, IOU_THRESHOLD)?;
    if x.is_empty() {
        return Err(Error::Data("no nonempty masks".into()));
    }
    let n = x.len() as f64;
    Ok(IouComparison {
        iou: x.iter().sum::<f64>() / n,
        baseline_iou: y.iter().sum::<f64>() / n,
        images: x.len(),
    })
}

/// True when the highest accuracy is strictly above both end points of the sweep.
pub fn peaks_inside(accuracy_by_lambda: &[f64]) -> bool {
    let n = accuracy_by_lambda.len();
    if n < 3 {
        return false;
    }
    let best = accuracy_by_lambda[1..n - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    best > accuracy_by_lambda[0] && best > accuracy_by_lambda[n - 1]
}

pub fn non_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|p| p[1] >= p[0])
}
