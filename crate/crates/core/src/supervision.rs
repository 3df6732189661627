//! Attention-map co-training: target preparation, the joint classification +
//! map objective, two control objectives, and the SGD training loop.
//!
//! The joint objective is `CE + lambda * sum_l mean_n || R/|R| - A/|A| ||`,
//! where `A` is the channel-collapsed attention volume of GALA layer `l` and `R`
//! the importance map prepared for that layer's spatial size.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardOutput, Mode, Model};
use crate::clickme::{explained_variability, ExplainedVariability};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::imageops::{gaussian_blur, resize, Augment, Image, ResizeMode};
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

/// Where the supervision maps come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapSource {
    /// The sample's importance map as given.
    Clickme,
    /// The tight bounding box of the importance map.
    Bbox,
}

/// What the map term constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapTarget {
    /// Collapsed GALA attention volumes.
    Attention,
    /// Collapsed dense-path activity at the GALA layers (direct feature supervision).
    Activity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs (0-based) at whose start the learning rate drops by 10x.
    pub decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub map_blur_kernel: usize,
    pub resize_mode: ResizeMode,
    pub epsilon_norm: f64,
    /// Maximum crop offset in pixels (zero-padded translation).
    pub crop_pad: usize,
    pub flip: bool,
    pub map_source: MapSource,
    pub map_target: MapTarget,
    /// Pixels above this value define the bounding box for `map_source = bbox`.
    pub bbox_threshold: f64,
    /// Human-vs-human reliability used as the denominator of explained variability.
    pub rho_human: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 6.0,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 100,
            decay_epochs: vec![30, 60, 80, 90],
            batch_size: 32,
            seed: 0,
            map_blur_kernel: 49,
            resize_mode: ResizeMode::Bicubic,
            epsilon_norm: 1e-8,
            crop_pad: 4,
            flip: true,
            map_source: MapSource::Clickme,
            map_target: MapTarget::Attention,
            bbox_threshold: 0.0,
            rho_human: 1.0,
        }
    }
}

impl TrainConfig {
    /// Schedule sized for the 32x32 synthetic shapes set on one CPU core.
    pub fn toy() -> Self {
        Self {
            lambda: 0.3,
            base_lr: 0.05,
            epochs: 5,
            decay_epochs: vec![4],
            map_blur_kernel: 5,
            crop_pad: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", format!("must be finite and nonnegative, got {}", self.lambda));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be nonnegative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_epochs", format!("must be strictly increasing, got {:?}", self.decay_epochs));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("decay_epochs", format!("must all be below epochs ({})", self.epochs));
        }
        if self.map_blur_kernel % 2 == 0 {
            return bad("map_blur_kernel", format!("must be odd, got {}", self.map_blur_kernel));
        }
        if !(self.epsilon_norm > 0.0) {
            return bad("epsilon_norm", format!("must be positive, got {}", self.epsilon_norm));
        }
        if !(self.bbox_threshold >= 0.0) {
            return bad("bbox_threshold", format!("must be nonnegative, got {}", self.bbox_threshold));
        }
        if !(self.rho_human > 0.0) {
            return bad("rho_human", format!("must be positive, got {}", self.rho_human));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base_lr * 0.1f64.powi(drops as i32)
    }
}

/// Blur, resize to `(h, w)`, clamp resampling undershoot at zero and scale to
/// unit L2 norm. `None` means the map is empty (norm below `epsilon_norm`).
pub fn prepare_target_map(map: &Image, hw: (usize, usize), cfg: &TrainConfig) -> Result<Option<Image>> {
    if map.channels != 1 {
        return Err(Error::Shape(format!("importance map must have one channel, got {}", map.channels)));
    }
    if map.data.iter().any(|&v| v < 0.0) {
        return Err(Error::Data("importance map has negative values".into()));
    }
    let blurred = gaussian_blur(map, cfg.map_blur_kernel)?;
    let mut out = resize(&blurred, hw.0, hw.1, cfg.resize_mode)?;
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let norm = out.l2_norm();
    if norm < cfg.epsilon_norm {
        return Ok(None);
    }
    out.data.iter_mut().for_each(|v| *v /= norm);
    Ok(Some(out))
}

/// Uniform box over the tight extent of pixels above `threshold`. Empty in, empty out.
pub fn derive_bbox_map(map: &Image, threshold: f64) -> Image {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..map.height {
        for x in 0..map.width {
            if map.pixel(y, x).iter().any(|&v| v > threshold) {
                bounds = Some(match bounds {
                    None => (y, y, x, x),
                    Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
                });
            }
        }
    }
    let mut out = Image::zeros(map.height, map.width, 1);
    if let Some((y0, y1, x0, x1)) = bounds {
        for y in y0..=y1 {
            for x in x0..=x1 {
                *out.at_mut(y, x, 0) = 1.0;
            }
        }
    }
    out
}

/// `|| r/|r| - a/|a| ||` on plain values; a zero vector stays zero.
pub fn unit_map_distance(a: &[f64], r: &[f64]) -> f64 {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
        v.iter().map(|x| x * inv).collect::<Vec<_>>()
    };
    let (ua, ur) = (unit(a), unit(r));
    ua.iter().zip(&ur).map(|(x, y)| (y - x).powi(2)).sum::<f64>().sqrt()
}

/// Per-layer targets for one batch: `[N,H,W,1]` tensors plus per-sample weights
/// (1 for a usable map, 0 for a missing or empty one).
#[derive(Debug, Clone)]
pub struct MapTargets {
    pub maps: BTreeMap<usize, Tensor>,
    pub weights: Vec<f64>,
}

impl MapTargets {
    /// The same prepared maps for every layer in `layers`.
    pub fn shared(layers: impl IntoIterator<Item = usize>, maps: &[Option<Image>], hw: (usize, usize)) -> Result<Self> {
        let n = maps.len();
        let mut data = vec![0.0; n * hw.0 * hw.1];
        let mut weights = vec![0.0; n];
        for (i, m) in maps.iter().enumerate() {
            if let Some(m) = m {
                if (m.height, m.width, m.channels) != (hw.0, hw.1, 1) {
                    return Err(Error::Shape(format!(
                        "target map {i}: expected {}x{}x1, got {}x{}x{}",
                        hw.0, hw.1, m.height, m.width, m.channels
                    )));
                }
                data[i * hw.0 * hw.1..][..hw.0 * hw.1].copy_from_slice(&m.data);
                weights[i] = 1.0;
            }
        }
        let t = Tensor::new(&[n, hw.0, hw.1, 1], data)?;
        Ok(Self {
            maps: layers.into_iter().map(|l| (l, t.clone())).collect(),
            weights,
        })
    }

    pub fn any(&self) -> bool {
        self.weights.iter().any(|&w| w > 0.0)
    }
}

fn collapsed_distance(
    graph: &mut Graph,
    volumes: &BTreeMap<usize, NodeId>,
    targets: &MapTargets,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (layer, &vol) in volumes {
        let target = targets
            .maps
            .get(layer)
            .ok_or_else(|| Error::Data(format!("no target map for layer {layer}")))?;
        let collapsed = graph.channel_l2(vol)?;
        let d = graph.l2_distance(collapsed, target, &targets.weights)?;
        total = Some(match total {
            Some(t) => graph.add(t, d)?,
            None => d,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => graph.constant(Tensor::scalar(0.0)),
    }
}

/// Sum over layers of the mean (over weighted samples) unit-map distance
/// between collapsed attention and targets.
pub fn map_loss(graph: &mut Graph, attention: &BTreeMap<usize, NodeId>, targets: &MapTargets) -> Result<NodeId> {
    collapsed_distance(graph, attention, targets)
}

/// The map loss computed over raw dense-path activity instead of attention.
pub fn direct_feature_loss(graph: &mut Graph, activity: &BTreeMap<usize, NodeId>, targets: &MapTargets) -> Result<NodeId> {
    collapsed_distance(graph, activity, targets)
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub cross_entropy: NodeId,
    pub map: Option<NodeId>,
}

/// `CE + lambda * map`. With `lambda = 0` the total is the cross-entropy node
/// itself; the map term, if targets are given, is still recorded for monitoring.
pub fn total_loss(
    graph: &mut Graph,
    forward: &ForwardOutput,
    labels: &[usize],
    targets: Option<&MapTargets>,
    lambda: f64,
    target_kind: MapTarget,
) -> Result<LossNodes> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    let ce = graph.softmax_cross_entropy(forward.logits, labels)?;
    let map = match targets {
        Some(t) if t.any() => Some(match target_kind {
            MapTarget::Attention => map_loss(graph, &forward.attention, t)?,
            MapTarget::Activity => direct_feature_loss(graph, &forward.activity, t)?,
        }),
        _ => None,
    };
    let total = match map {
        Some(m) if lambda > 0.0 => {
            let scaled = graph.scale(m, lambda)?;
            graph.add(ce, scaled)?
        }
        _ => ce,
    };
    Ok(LossNodes {
        total,
        cross_entropy: ce,
        map,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_cross_entropy: f64,
    pub train_error: f64,
    /// Mean map-loss value over batches that had maps.
    pub map_loss: Option<f64>,
    pub val_error: f64,
    pub val_explained_variability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest validation error; its weights are the ones kept.
    pub selected_epoch: usize,
}

impl TrainReport {
    pub fn selected(&self) -> &EpochRecord {
        &self.epochs[self.selected_epoch]
    }
}

/// Held-out metrics for one model on one sample set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub error: f64,
    pub top5_error: f64,
    /// Per-sample mean collapsed attention over GALA layers (`H*W` values), if any.
    pub attention_maps: Option<Vec<Vec<f64>>>,
    pub explained: Option<ExplainedVariability>,
}

/// Classify `samples` in batches and compare attention with the prepared maps.
pub fn evaluate(model: &Model, samples: &[Sample], cfg: &TrainConfig) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let hw = model.config().attention_hw()?;
    let (mut wrong, mut wrong5) = (0usize, 0usize);
    let mut maps: Option<Vec<Vec<f64>>> = hw.map(|_| Vec::with_capacity(samples.len()));
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let inf = model.infer(&Image::batch(&images)?)?;
        for (s, ranked) in chunk.iter().zip(inf.ranked()) {
            if ranked[0] != s.label {
                wrong += 1;
            }
            if !ranked.iter().take(5).any(|&l| l == s.label) {
                wrong5 += 1;
            }
        }
        if let (Some(maps), Some(c)) = (maps.as_mut(), inf.collapsed_attention()) {
            maps.extend(c);
        }
    }
    let n = samples.len() as f64;
    let explained = match (hw, &maps) {
        (Some(hw), Some(maps)) => {
            let mut model_maps = Vec::new();
            let mut human = BTreeMap::new();
            for (s, m) in samples.iter().zip(maps) {
                let Some(target) = sample_map(s, cfg)? else { continue };
                let Some(t) = prepare_target_map(&target, hw, cfg)? else { continue };
                human.insert(s.id.clone(), t);
                model_maps.push((s.id.clone(), Image::new(hw.0, hw.1, 1, m.clone())?));
            }
            if human.is_empty() {
                None
            } else {
                match explained_variability(&model_maps, &human, cfg.rho_human) {
                    Ok(ev) => Some(ev),
                    Err(Error::UndefinedCorrelation(_)) => None,
                    Err(e) => return Err(e),
                }
            }
        }
        _ => None,
    };
    Ok(Evaluation {
        error: wrong as f64 / n,
        top5_error: wrong5 as f64 / n,
        attention_maps: maps,
        explained,
    })
}

fn sample_map(s: &Sample, cfg: &TrainConfig) -> Result<Option<Image>> {
    Ok(match (&s.map, cfg.map_source) {
        (None, _) => None,
        (Some(m), MapSource::Clickme) => Some(m.clone()),
        (Some(m), MapSource::Bbox) => Some(derive_bbox_map(m, cfg.bbox_threshold)),
    })
}

const NORM_MOMENTUM: f64 = 0.1;

struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    fn new(params: &ParamStore) -> Self {
        Self {
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Nesterov momentum: `v = mu v + g; p -= lr (g + mu v)`, with L2 decay folded into `g`.
    fn step(&mut self, params: &mut ParamStore, grads: &crate::tensor::Gradients, lr: f64, cfg: &TrainConfig) {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let p = params.get_mut(id);
            let v = &mut self.velocity[id.0];
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let g = gv + cfg.weight_decay * *pv;
                *vv = cfg.momentum * *vv + g;
                *pv -= lr * (g + cfg.momentum * *vv);
            }
        }
    }
}

/// Train `model` in place with SGD + Nesterov momentum and a step schedule.
///
/// Batches are drawn in a seed-determined order with random crops and flips
/// applied identically to images and maps. Samples without a map only feed
/// the classification term. After the last epoch the weights of the epoch
/// with the best validation accuracy are restored.
pub fn fit(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let hw = model.config().attention_hw()?;
    let layers: Vec<usize> = model.config().gala_layers.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sgd = Sgd::new(model.params());
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut wrong) = (0.0, 0.0, 0usize);
        let (mut map_sum, mut map_batches) = (0.0, 0usize);
        let mut batches = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(idx.len());
            let mut maps = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &train[i];
                let aug = Augment::sample(cfg.crop_pad, cfg.flip, &mut rng);
                images.push(aug.apply(&s.image));
                labels.push(s.label);
                maps.push(match (hw, sample_map(s, cfg)?) {
                    (Some(hw), Some(m)) => prepare_target_map(&aug.apply(&m), hw, cfg)?,
                    _ => None,
                });
            }
            let refs: Vec<&Image> = images.iter().collect();
            let mut graph = Graph::new();
            let input = graph.constant(Image::batch(&refs)?)?;
            let fwd = model
                .forward_with_attention(&mut graph, input, Mode::Train)
                .map_err(|e| diagnose(e, epoch, step))?;
            let targets = match hw {
                Some(hw) => Some(MapTargets::shared(layers.iter().copied(), &maps, hw)?),
                None => None,
            };
            let loss = total_loss(&mut graph, &fwd, &labels, targets.as_ref(), cfg.lambda, cfg.map_target)
                .map_err(|e| diagnose(e, epoch, step))?;
            let grads = graph.backward(loss.total)?;
            sgd.step(model.params_mut(), &grads, lr, cfg);
            model.update_running_stats(&fwd.norm_stats, NORM_MOMENTUM);
            if let Some(bad) = model.params().iter().find(|(_, t)| t.check_finite("").is_err()) {
                return Err(Error::NonFinite(format!(
                    "parameter {} after epoch {epoch} step {step}",
                    bad.0
                )));
            }

            loss_sum += graph.value(loss.total).item()?;
            ce_sum += graph.value(loss.cross_entropy).item()?;
            if let Some(m) = loss.map {
                map_sum += graph.value(m).item()?;
                map_batches += 1;
            }
            let logits = graph.value(fwd.logits);
            let k = model.config().classes;
            for (row, &label) in logits.data().chunks_exact(k).zip(&labels) {
                let pred = argmax(row);
                if pred != label {
                    wrong += 1;
                }
            }
            batches += 1;
        }
        let eval = evaluate(model, val, cfg)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            train_cross_entropy: ce_sum / batches as f64,
            train_error: wrong as f64 / train.len() as f64,
            map_loss: (map_batches > 0).then(|| map_sum / map_batches as f64),
            val_error: eval.error,
            val_explained_variability: eval.explained.as_ref().map(|e| e.percentage),
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(err, _, _)| record.val_error < *err) {
            best = Some((record.val_error, epoch, model.params().clone()));
        }
        records.push(record);
    }
    let (_, selected_epoch, params) = best.expect("at least one epoch");
    for id in params.ids().collect::<Vec<_>>() {
        model.params_mut().set(id, params.get(id).clone())?;
    }
    Ok(TrainReport {
        epochs: records,
        selected_epoch,
    })
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn diagnose(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, step {step})")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, StageConfig};
    use crate::synth::{generate, ShapeStyle};

    fn cfg() -> TrainConfig {
        TrainConfig {
            map_blur_kernel: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_drops_tenfold_at_each_decay_epoch() {
        let c = TrainConfig {
            base_lr: 0.2,
            epochs: 6,
            decay_epochs: vec![2, 4],
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|e| c.learning_rate(e)).collect();
        let want = [0.2, 0.2, 0.02, 0.02, 0.002, 0.002];
        for (a, b) in lrs.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{lrs:?}");
        }
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = TrainConfig::default();
        c.map_blur_kernel = 4;
        assert!(c.validate().unwrap_err().to_string().contains("map_blur_kernel"));
        let mut c = TrainConfig::default();
        c.decay_epochs = vec![5, 5];
        assert!(c.validate().unwrap_err().to_string().contains("decay_epochs"));
        let mut c = TrainConfig::default();
        c.decay_epochs = vec![100];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lambda = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("lambda"));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lamda": 1}"#).is_err());
    }

    #[test]
    fn empty_map_is_flagged_and_delta_is_unit_norm() {
        let zero = Image::zeros(9, 9, 1);
        assert!(prepare_target_map(&zero, (9, 9), &cfg()).unwrap().is_none());
        let mut delta = Image::zeros(9, 9, 1);
        *delta.at_mut(4, 4, 0) = 1.0;
        let t = prepare_target_map(&delta, (9, 9), &cfg()).unwrap().unwrap();
        assert!((t.l2_norm() - 1.0).abs() < 1e-12);
        let peak = (0..81).max_by(|&a, &b| t.data[a].total_cmp(&t.data[b])).unwrap();
        assert_eq!(peak, 40);
        assert!(t.at(4, 3, 0) > 0.0 && (t.at(4, 3, 0) - t.at(4, 5, 0)).abs() < 1e-15);
        let mut neg = Image::zeros(2, 2, 1);
        neg.data[0] = -1.0;
        assert!(prepare_target_map(&neg, (2, 2), &cfg()).is_err());
    }

    #[test]
    fn bbox_covers_tight_extent() {
        let mut m = Image::zeros(6, 7, 1);
        *m.at_mut(2, 3, 0) = 0.5;
        let b = derive_bbox_map(&m, 0.0);
        assert_eq!(b.data.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(b.at(2, 3, 0), 1.0);
        let mut m = Image::zeros(6, 7, 1);
        *m.at_mut(0, 0, 0) = 1.0;
        *m.at_mut(5, 6, 0) = 1.0;
        assert!(derive_bbox_map(&m, 0.0).data.iter().all(|&v| v == 1.0));
        assert!(derive_bbox_map(&Image::zeros(3, 3, 1), 0.0).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_distance_geometry() {
        assert!(unit_map_distance(&[1.0, 2.0], &[3.0, 6.0]).abs() < 1e-15);
        assert!((unit_map_distance(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-15);
        assert!((unit_map_distance(&[0.0, 5.0], &[2.0, 0.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    fn tiny_model() -> Model {
        Model::build(
            BackboneConfig {
                input: [8, 8, 3],
                stem_width: 4,
                stem_stride: 1,
                stages: vec![StageConfig { width: 4, blocks: 1 }, StageConfig { width: 8, blocks: 1 }],
                gala_layers: vec![1],
                classes: 3,
                reduction: 4,
                local_attention: true,
            },
            3,
        )
        .unwrap()
    }

    fn tiny_data(n: usize, seed: u64) -> Vec<Sample> {
        let style = ShapeStyle {
            size: 8,
            min_radius: 2.0,
            max_radius: 3.0,
            clutter_strokes: 1,
            noise: 0.02,
        };
        generate(n, &style, seed)
            .into_iter()
            .map(|mut s| {
                s.label %= 3;
                s
            })
            .collect()
    }

    #[test]
    fn lambda_zero_matches_a_map_free_run() {
        let train = tiny_data(12, 1);
        let val = tiny_data(4, 2);
        let c = TrainConfig {
            lambda: 0.0,
            epochs: 2,
            decay_epochs: vec![],
            batch_size: 4,
            map_blur_kernel: 3,
            ..TrainConfig::default()
        };
        let mut a = tiny_model();
        let ra = fit(&mut a, &train, &val, &c, |_| {}).unwrap();
        let stripped: Vec<Sample> = train.iter().cloned().map(|mut s| {
            s.map = None;
            s
        }).collect();
        let mut b = tiny_model();
        let rb = fit(&mut b, &stripped, &val, &c, |_| {}).unwrap();
        for (x, y) in ra.epochs.iter().zip(&rb.epochs) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.train_cross_entropy, y.train_cross_entropy);
            assert_eq!(x.val_error, y.val_error);
        }
        assert!(ra.epochs[0].map_loss.is_some() && rb.epochs[0].map_loss.is_none());
        assert_eq!(a.params().iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
                   b.params().iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn training_is_deterministic_and_selects_best_epoch() {
        let train = tiny_data(8, 4);
        let val = tiny_data(6, 5);
        let c = TrainConfig {
            lambda: 2.0,
            epochs: 3,
            decay_epochs: vec![2],
            batch_size: 4,
            map_blur_kernel: 3,
            base_lr: 0.05,
            ..TrainConfig::default()
        };
        let r1 = fit(&mut tiny_model(), &train, &val, &c, |_| {}).unwrap();
        let r2 = fit(&mut tiny_model(), &train, &val, &c, |_| {}).unwrap();
        assert_eq!(r1, r2);
        let best = r1.epochs.iter().map(|e| e.val_error).fold(f64::INFINITY, f64::min);
        assert_eq!(r1.selected().val_error, best);
        assert_eq!(r1.epochs.len(), 3);
        assert!(r1.epochs.iter().all(|e| e.map_loss.is_some()));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let c = TrainConfig {
            epochs: 1,
            decay_epochs: vec![],
            ..cfg()
        };
        assert!(fit(&mut tiny_model(), &[], &tiny_data(2, 1), &c, |_| {}).is_err());
        assert!(fit(&mut tiny_model(), &tiny_data(2, 1), &[], &c, |_| {}).is_err());
    }
}
