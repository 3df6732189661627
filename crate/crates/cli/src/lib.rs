//! Commands behind the `gala` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clickme_game::store::{Catalog, GameStore};
use clickme_game::GameError;
use gala_core::backbone::{BackboneConfig, Model};
use gala_core::clickme::{import_maps, MapIndexRecord};
use gala_core::dataset::{load_folder, save_folder, split, Sample};
use gala_core::experiment::{compare_iou, run_one, sample_masks, sweep as run_sweep, tuned_lambda, IouComparison, RunSummary};
use gala_core::imageops::{resize, ResizeMode};
use gala_core::metrics::{attention_at_mask_size, thresholded_iou};
use gala_core::stimulus::{build_stimulus, write_stimulus, StimulusRecord, DEFAULT_BETA, DEFAULT_TEMPERATURE};
use gala_core::supervision::{evaluate, TrainConfig, TrainReport};
use gala_core::synth::{generate, ShapeStyle};
use gala_core::{checkpoint, experiment::IOU_THRESHOLD};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "GALA_";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<gala_core::Error> for CliError {
    fn from(e: gala_core::Error) -> Self {
        use gala_core::Error as E;
        match e {
            E::Config(_) => CliError::Usage(e.to_string()),
            E::NonFinite(_) | E::UndefinedCorrelation(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GameError> for CliError {
    fn from(e: GameError) -> Self {
        match e {
            GameError::Core(c) => c.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset folder; when absent a synthetic shapes set is generated.
    pub path: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_seed: u64,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, synthetic_count: 5000, synthetic_seed: 7, val: 500, test: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "toy_backbone")]
    pub backbone: BackboneConfig,
    #[serde(default = "TrainConfig::toy")]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

fn toy_backbone() -> BackboneConfig {
    BackboneConfig::toy(gala_core::synth::SHAPE_CLASSES)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { backbone: toy_backbone(), train: TrainConfig::toy(), data: DataConfig::default() }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.train.seed = s;
        }
        if let Some(l) = overrides.lambda {
            cfg.train.lambda = l;
        }
        if let Some(e) = overrides.epochs {
            cfg.train.epochs = e;
            cfg.train.decay_epochs.retain(|&d| d < e);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate().map_err(|e| CliError::Usage(format!("backbone: {e}")))?;
        self.train.validate().map_err(|e| CliError::Usage(format!("train: {e}")))?;
        if self.data.path.is_none() && self.data.synthetic_count <= self.data.val + self.data.test {
            return Err(CliError::Usage(format!(
                "data.synthetic_count: {} leaves nothing to train on after {} + {} held out",
                self.data.synthetic_count, self.data.val, self.data.test
            )));
        }
        Ok(())
    }
}

pub fn load_samples(cfg: &DataConfig) -> Result<Vec<Sample>> {
    Ok(match &cfg.path {
        Some(p) => load_folder(p)?,
        None => generate(cfg.synthetic_count, &ShapeStyle::default(), cfg.synthetic_seed),
    })
}

pub type Splits = (Vec<Sample>, Vec<Sample>, Vec<Sample>);

pub fn load_splits(cfg: &DataConfig) -> Result<Splits> {
    Ok(split(load_samples(cfg)?, cfg.val, cfg.test)?)
}

fn write_ndjson<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        writeln!(out, "{}", serde_json::to_string(&r)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn synth(count: usize, seed: u64, out: &Path) -> Result<usize> {
    if count == 0 {
        return Err(CliError::Usage("count must be positive".into()));
    }
    save_folder(out, &generate(count, &ShapeStyle::default(), seed))?;
    Ok(count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub summary: RunSummary,
}

/// Train, then write `model.ckpt`, `report.json`, `summary.json` and
/// `epochs.ndjson` under `out`. Only `summary.json` carries wall time.
pub fn train(cfg: &RunConfig, out: &Path, mut on_epoch: impl FnMut(&gala_core::supervision::EpochRecord)) -> Result<TrainOutcome> {
    let (tr, va, te) = load_splits(&cfg.data)?;
    fs::create_dir_all(out)?;
    let run = run_one(&cfg.backbone, &tr, &va, &te, &cfg.train, &mut on_epoch)?;
    let report = TrainReport {
        epochs: run.summary.epochs.clone(),
        selected_epoch: run.summary.selected_epoch,
    };
    checkpoint::save(&out.join(CHECKPOINT_FILE), &run.model)?;
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&run.summary)?)?;
    write_ndjson(&out.join("epochs.ndjson"), &report.epochs)?;
    Ok(TrainOutcome { report, summary: run.summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub runs: usize,
    pub mean_test_accuracy: f64,
    pub mean_val_accuracy: f64,
    pub mean_explained_variability: Option<f64>,
    /// Paired with the same-seed lambda = 0 run, when the sweep has one.
    pub mean_iou: Option<f64>,
    pub mean_baseline_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedIou {
    pub lambda: f64,
    pub seed: u64,
    pub comparison: IouComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub runs: Vec<RunSummary>,
    pub rows: Vec<SweepRow>,
    pub iou: Vec<PairedIou>,
    pub tuned_lambda: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Train every lambda at `repeats` seeds (`train.seed`, `train.seed + 1`, ...)
/// and write `sweep.ndjson` (one run per line) and `sweep.csv` (one lambda per row).
pub fn sweep(
    cfg: &RunConfig,
    lambdas: &[f64],
    repeats: usize,
    out: Option<&Path>,
    mut on_run: impl FnMut(&RunSummary),
) -> Result<SweepOutcome> {
    if lambdas.len() < 2 {
        return Err(CliError::Usage(format!("a sweep needs at least 2 lambdas, got {}", lambdas.len())));
    }
    if repeats == 0 {
        return Err(CliError::Usage("repeats must be positive".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(CliError::Usage(format!("lambda {bad} must be finite and nonnegative")));
    }
    let (tr, va, te) = load_splits(&cfg.data)?;
    let seeds: Vec<u64> = (0..repeats as u64).map(|i| cfg.train.seed + i).collect();
    let runs = run_sweep(&cfg.backbone, &tr, &va, &te, &cfg.train, lambdas, &seeds, |r| on_run(&r.summary))?;
    let masks = if cfg.backbone.gala_layers.is_empty() { None } else { sample_masks(&te).ok() };
    let mut iou = Vec::new();
    if let Some(masks) = &masks {
        for r in &runs {
            let base = runs.iter().find(|b| b.summary.lambda == 0.0 && b.summary.seed == r.summary.seed);
            if let (Some(base), true) = (base, r.summary.lambda != 0.0) {
                iou.push(PairedIou {
                    lambda: r.summary.lambda,
                    seed: r.summary.seed,
                    comparison: compare_iou(r, base, masks)?,
                });
            }
        }
    }
    let summaries: Vec<RunSummary> = runs.into_iter().map(|r| r.summary).collect();
    let rows = lambdas
        .iter()
        .map(|&l| {
            let these: Vec<&RunSummary> = summaries.iter().filter(|r| r.lambda == l).collect();
            let pairs: Vec<&IouComparison> = iou.iter().filter(|p| p.lambda == l).map(|p| &p.comparison).collect();
            let ev: Vec<f64> = these.iter().filter_map(|r| r.explained_variability).collect();
            SweepRow {
                lambda: l,
                runs: these.len(),
                mean_test_accuracy: mean(&these.iter().map(|r| 1.0 - r.test_error).collect::<Vec<_>>()).unwrap_or(0.0),
                mean_val_accuracy: mean(&these.iter().map(|r| 1.0 - r.val_error).collect::<Vec<_>>()).unwrap_or(0.0),
                mean_explained_variability: (ev.len() == these.len()).then(|| mean(&ev)).flatten(),
                mean_iou: mean(&pairs.iter().map(|p| p.iou).collect::<Vec<_>>()),
                mean_baseline_iou: mean(&pairs.iter().map(|p| p.baseline_iou).collect::<Vec<_>>()),
            }
        })
        .collect();
    let outcome = SweepOutcome { tuned_lambda: tuned_lambda(&summaries), runs: summaries, rows, iou };
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_ndjson(&out.join("sweep.ndjson"), &outcome.runs)?;
        let mut csv = String::from("lambda,runs,mean_test_accuracy,mean_val_accuracy,mean_explained_variability,mean_iou,mean_baseline_iou\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &outcome.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.lambda,
                r.runs,
                r.mean_test_accuracy,
                r.mean_val_accuracy,
                opt(r.mean_explained_variability),
                opt(r.mean_iou),
                opt(r.mean_baseline_iou)
            ));
        }
        fs::write(out.join("sweep.csv"), csv)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: Option<f64>,
}

/// Error rates, explained variability and attention-vs-mask IOU of a checkpoint on a folder.
pub fn eval(checkpoint_path: &Path, data: &Path, cfg: &TrainConfig) -> Result<Vec<MetricRow>> {
    let model = checkpoint::load(checkpoint_path)?;
    let samples = load_folder(data)?;
    eval_model(&model, &samples, cfg)
}

pub fn eval_model(model: &Model, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<MetricRow>> {
    let ev = evaluate(model, samples, cfg)?;
    let iou = match (model.config().attention_hw()?, &ev.attention_maps) {
        (Some(hw), Some(maps)) => {
            let mut vals = Vec::new();
            for (s, m) in samples.iter().zip(maps) {
                let Some(map) = &s.map else { continue };
                let mask = gala_core::metrics::SegmentationMask::from_image(s.id.clone(), map)?;
                if mask.area() == 0 {
                    continue;
                }
                vals.push(thresholded_iou(&attention_at_mask_size(m, hw, &mask)?, &mask, IOU_THRESHOLD)?);
            }
            mean(&vals)
        }
        _ => None,
    };
    Ok(vec![
        MetricRow { metric: "top1_error".into(), value: Some(ev.error) },
        MetricRow { metric: "top5_error".into(), value: Some(ev.top5_error) },
        MetricRow { metric: "explained_variability".into(), value: ev.explained.map(|e| e.percentage) },
        MetricRow { metric: "iou".into(), value: iou },
    ])
}

fn stem(path: &str) -> String {
    Path::new(path).file_stem().map_or_else(|| path.to_string(), |s| s.to_string_lossy().into_owned())
}

/// One stimulus folder per image that has a map. Maps are matched to images
/// by id (the image file stem) and resized to the image when sizes differ.
pub fn stimuli(maps_dir: &Path, images_dir: &Path, steps: usize, seed: u64, out: &Path) -> Result<Vec<StimulusRecord>> {
    let samples = load_folder(images_dir)?;
    let maps: BTreeMap<String, _> = import_maps(maps_dir)?.into_iter().map(|(m, _)| (m.image_id.clone(), m)).collect();
    let mut records = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let id = stem(&s.id);
        let Some(map) = maps.get(&id) else { continue };
        let grid = if (map.grid.height, map.grid.width) == (s.image.height, s.image.width) {
            map.grid.clone()
        } else {
            let mut g = resize(&map.grid, s.image.height, s.image.width, ResizeMode::Bilinear)?;
            g.data.iter_mut().for_each(|v| *v = v.max(0.0));
            g
        };
        let stim = build_stimulus(id.clone(), &s.image, &grid, steps, DEFAULT_BETA, DEFAULT_TEMPERATURE, seed.wrapping_add(i as u64))?;
        records.extend(write_stimulus(&out.join(&id), &s.image, &stim)?);
    }
    if records.is_empty() {
        return Err(CliError::Data("no image in the folder has a map".into()));
    }
    Ok(records)
}

pub fn export(store_dir: &Path, data: &Path, out: &Path) -> Result<Vec<MapIndexRecord>> {
    let catalog = Catalog::from_samples(&load_folder(data)?);
    let store = GameStore::open(store_dir, catalog)?;
    Ok(store.export(out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        back.validate().unwrap();
    }

    #[test]
    fn unknown_field_is_a_usage_error_naming_it() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"lamda": 1}}"#).unwrap();
        let err = RunConfig::load(Some(&p), &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("lamda"), "{err}");
        fs::write(&p, r#"{"train": {"momentum": 2}}"#).unwrap();
        let err = RunConfig::load(Some(&p), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("momentum"), "{err}");
    }

    #[test]
    fn epoch_override_trims_the_schedule() {
        let o = Overrides { epochs: Some(2), ..Overrides::default() };
        let cfg = RunConfig::load(None, &o).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.decay_epochs.len()), (2, 0));
    }
}
