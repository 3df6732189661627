//! Small residual CNN with GALA modules on the dense path of selected blocks.
//!
//! Each block computes `relu(shortcut(x) + gala(dense(x)))`, where the dense
//! path is `conv3x3 -> norm -> relu -> conv3x3 -> norm` and the shortcut is
//! the identity or, when the shape changes, `conv1x1 -> norm`. This is the
//! post-activation residual variant.
//!
//! Every `norm` is batch normalization followed by a learned per-channel
//! affine map. Training mode standardizes with batch statistics; inference
//! mode uses running averages kept next to the parameters.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gala::{gala_forward, GalaConfig, GalaParams, DEFAULT_REDUCTION};
use crate::init::scaled_normal;
use crate::tensor::{Graph, NodeId, Padding, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub width: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Input height, width, channels.
    pub input: [usize; 3],
    pub stem_width: usize,
    pub stem_stride: usize,
    /// Every stage after the first halves the spatial size in its first block.
    pub stages: Vec<StageConfig>,
    /// Global block indices (counting across stages from 0) that carry GALA.
    pub gala_layers: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    #[serde(default = "default_true")]
    pub local_attention: bool,
}

fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}

fn default_true() -> bool {
    true
}

impl BackboneConfig {
    /// 32x32 RGB, six blocks, GALA on the last three (8x8 attention maps).
    pub fn toy(classes: usize) -> Self {
        Self {
            input: [32, 32, 3],
            stem_width: 8,
            stem_stride: 2,
            stages: vec![
                StageConfig { width: 8, blocks: 2 },
                StageConfig { width: 16, blocks: 4 },
            ],
            gala_layers: vec![3, 4, 5],
            classes,
            reduction: DEFAULT_REDUCTION,
            local_attention: true,
        }
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// `(stride, in_channels, out_channels, out_h, out_w)` for every block.
    pub fn block_plan(&self) -> Result<Vec<BlockPlan>> {
        let [h, w, c] = self.input;
        if h == 0 || w == 0 || c == 0 || self.stem_stride == 0 || self.stem_width == 0 {
            return Err(Error::Config("input, stem width and stem stride must be positive".into()));
        }
        let mut h = h.div_ceil(self.stem_stride);
        let mut w = w.div_ceil(self.stem_stride);
        let mut channels = self.stem_width;
        let mut plan = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            if stage.width == 0 || stage.blocks == 0 {
                return Err(Error::Config(format!("stage {si} must have positive width and blocks")));
            }
            for b in 0..stage.blocks {
                let stride = if si > 0 && b == 0 { 2 } else { 1 };
                h = h.div_ceil(stride);
                w = w.div_ceil(stride);
                plan.push(BlockPlan {
                    stride,
                    in_channels: channels,
                    out_channels: stage.width,
                    out_hw: (h, w),
                });
                channels = stage.width;
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<Vec<BlockPlan>> {
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let plan = self.block_plan()?;
        let mut spatial = None;
        let mut seen = Vec::new();
        for &l in &self.gala_layers {
            let block = plan.get(l).ok_or_else(|| {
                Error::Config(format!("gala layer {l} does not exist ({} blocks)", plan.len()))
            })?;
            if seen.contains(&l) {
                return Err(Error::Config(format!("gala layer {l} listed twice")));
            }
            seen.push(l);
            GalaConfig {
                channels: block.out_channels,
                reduction: self.reduction,
                local: self.local_attention,
            }
            .reduced()
            .map_err(|_| {
                Error::Config(format!(
                    "gala layer {l}: reduction {} does not divide {} channels",
                    self.reduction, block.out_channels
                ))
            })?;
            match spatial {
                None => spatial = Some(block.out_hw),
                Some(s) if s != block.out_hw => {
                    return Err(Error::Config(format!(
                        "gala layers must share one spatial size: {s:?} vs {:?}",
                        block.out_hw
                    )))
                }
                _ => {}
            }
        }
        Ok(plan)
    }

    /// Spatial size of the attention maps, if any layer carries GALA.
    pub fn attention_hw(&self) -> Result<Option<(usize, usize)>> {
        let plan = self.validate()?;
        Ok(self.gala_layers.first().map(|&l| plan[l].out_hw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPlan {
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_hw: (usize, usize),
}

/// Numerical floor added to variances before normalizing.
pub const NORM_EPS: f64 = 1e-5;

/// Whether normalization uses batch statistics or running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    scale: ParamId,
    shift: ParamId,
    mean: ParamId,
    var: ParamId,
}

/// Batch statistics observed by one normalization slot in training mode.
#[derive(Debug, Clone)]
pub struct NormStats {
    mean_id: ParamId,
    var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Block {
    plan: BlockPlan,
    conv1: ParamId,
    norm1: Affine,
    conv2: ParamId,
    norm2: Affine,
    shortcut: Option<(ParamId, Affine)>,
    gala: Option<GalaParams>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: BackboneConfig,
    params: ParamStore,
    stem: (ParamId, Affine),
    blocks: Vec<Block>,
    head: (ParamId, ParamId),
}

/// Node handles from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: NodeId,
    /// Attention volume per GALA layer.
    pub attention: BTreeMap<usize, NodeId>,
    /// Dense-path activity (before GALA modulation) per GALA layer.
    pub activity: BTreeMap<usize, NodeId>,
    /// Empty in [`Mode::Eval`].
    pub norm_stats: Vec<NormStats>,
}

fn affine(store: &mut ParamStore, prefix: &str, c: usize) -> Result<Affine> {
    Ok(Affine {
        scale: store.insert(format!("{prefix}.scale"), Tensor::full(&[c], 1.0))?,
        shift: store.insert(format!("{prefix}.shift"), Tensor::zeros(&[c]))?,
        mean: store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]))?,
        var: store.insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0))?,
    })
}

fn bind_affine(store: &ParamStore, prefix: &str) -> Result<Affine> {
    Ok(Affine {
        scale: store.id(&format!("{prefix}.scale"))?,
        shift: store.id(&format!("{prefix}.shift"))?,
        mean: store.id(&format!("{prefix}.running_mean"))?,
        var: store.id(&format!("{prefix}.running_var"))?,
    })
}

impl Model {
    /// Build a model with freshly initialized parameters.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        let plan = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [_, _, cin] = config.input;
        store.insert(
            "stem.conv",
            scaled_normal(&[3, 3, cin, config.stem_width], 9 * cin, 2.0, &mut rng),
        )?;
        affine(&mut store, "stem.norm", config.stem_width)?;
        for (i, p) in plan.iter().enumerate() {
            let pre = format!("blocks.{i}");
            store.insert(
                format!("{pre}.conv1"),
                scaled_normal(&[3, 3, p.in_channels, p.out_channels], 9 * p.in_channels, 2.0, &mut rng),
            )?;
            affine(&mut store, &format!("{pre}.norm1"), p.out_channels)?;
            store.insert(
                format!("{pre}.conv2"),
                scaled_normal(&[3, 3, p.out_channels, p.out_channels], 9 * p.out_channels, 1.0, &mut rng),
            )?;
            affine(&mut store, &format!("{pre}.norm2"), p.out_channels)?;
            if p.stride != 1 || p.in_channels != p.out_channels {
                store.insert(
                    format!("{pre}.shortcut.conv"),
                    scaled_normal(&[1, 1, p.in_channels, p.out_channels], p.in_channels, 1.0, &mut rng),
                )?;
                affine(&mut store, &format!("{pre}.shortcut.norm"), p.out_channels)?;
            }
            if config.gala_layers.contains(&i) {
                GalaParams::init(&mut store, &format!("{pre}.gala"), gala_config(&config, p), &mut rng)?;
            }
        }
        let last = plan.last().map(|p| p.out_channels).unwrap_or(config.stem_width);
        store.insert("head.weight", scaled_normal(&[last, config.classes], last, 1.0, &mut rng))?;
        store.insert("head.bias", Tensor::zeros(&[config.classes]))?;
        Self::from_params(config, store)
    }

    /// Attach a config to an existing parameter store, checking every shape.
    pub fn from_params(config: BackboneConfig, params: ParamStore) -> Result<Self> {
        let plan = config.validate()?;
        let [_, _, cin] = config.input;
        let expect = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params.id(name)?;
            if params.get(id).shape() != shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let stem = (
            expect("stem.conv", &[3, 3, cin, config.stem_width])?,
            bind_affine(&params, "stem.norm")?,
        );
        let mut blocks = Vec::with_capacity(plan.len());
        for (i, p) in plan.iter().enumerate() {
            let pre = format!("blocks.{i}");
            let shortcut = if p.stride != 1 || p.in_channels != p.out_channels {
                Some((
                    expect(&format!("{pre}.shortcut.conv"), &[1, 1, p.in_channels, p.out_channels])?,
                    bind_affine(&params, &format!("{pre}.shortcut.norm"))?,
                ))
            } else {
                None
            };
            let gala = if config.gala_layers.contains(&i) {
                Some(GalaParams::bind(&params, &format!("{pre}.gala"), gala_config(&config, p))?)
            } else {
                None
            };
            blocks.push(Block {
                plan: *p,
                conv1: expect(&format!("{pre}.conv1"), &[3, 3, p.in_channels, p.out_channels])?,
                norm1: bind_affine(&params, &format!("{pre}.norm1"))?,
                conv2: expect(&format!("{pre}.conv2"), &[3, 3, p.out_channels, p.out_channels])?,
                norm2: bind_affine(&params, &format!("{pre}.norm2"))?,
                shortcut,
                gala,
            });
        }
        let last = plan.last().map(|p| p.out_channels).unwrap_or(config.stem_width);
        let head = (
            expect("head.weight", &[last, config.classes])?,
            expect("head.bias", &[config.classes])?,
        );
        Ok(Self {
            config,
            params,
            stem,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// GALA parameter handles keyed by block index.
    pub fn gala_params(&self) -> BTreeMap<usize, &GalaParams> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.gala.as_ref().map(|g| (i, g)))
            .collect()
    }

    fn affine_node(
        &self,
        g: &mut Graph,
        x: NodeId,
        a: Affine,
        mode: Mode,
        stats: &mut Vec<NormStats>,
    ) -> Result<NodeId> {
        let x = match mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm(x, NORM_EPS)?;
                stats.push(NormStats {
                    mean_id: a.mean,
                    var_id: a.var,
                    mean,
                    var,
                });
                y
            }
            Mode::Eval => {
                let rm = self.params.get(a.mean).data();
                let rv = self.params.get(a.var).data();
                let inv: Vec<f64> = rv.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                let shift: Vec<f64> = rm.iter().zip(&inv).map(|(m, i)| -m * i).collect();
                let c = inv.len();
                let sn = g.constant(Tensor::new(&[c], inv)?)?;
                let bn = g.constant(Tensor::new(&[c], shift)?)?;
                g.channel_affine(x, sn, bn)?
            }
        };
        let s = g.param(&self.params, a.scale)?;
        let b = g.param(&self.params, a.shift)?;
        g.channel_affine(x, s, b)
    }

    fn conv_node(&self, g: &mut Graph, x: NodeId, k: ParamId, stride: usize) -> Result<NodeId> {
        let kn = g.param(&self.params, k)?;
        g.conv2d(x, kn, None, stride, Padding::Same)
    }

    /// Record the forward pass of `input` (`[N,H,W,C]`) into `graph`.
    pub fn forward_with_attention(&self, graph: &mut Graph, input: NodeId, mode: Mode) -> Result<ForwardOutput> {
        let shape = graph.value(input).nhwc()?;
        if shape[1..] != self.config.input {
            return Err(Error::Shape(format!(
                "model input: expected [N,{},{},{}], got {shape:?}",
                self.config.input[0], self.config.input[1], self.config.input[2]
            )));
        }
        let mut x = self.conv_node(graph, input, self.stem.0, self.config.stem_stride)?;
        let mut stats = Vec::new();
        x = self.affine_node(graph, x, self.stem.1, mode, &mut stats)?;
        x = graph.relu(x)?;
        let mut attention = BTreeMap::new();
        let mut activity = BTreeMap::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let mut d = self.conv_node(graph, x, block.conv1, block.plan.stride)?;
            d = self.affine_node(graph, d, block.norm1, mode, &mut stats)?;
            d = graph.relu(d)?;
            d = self.conv_node(graph, d, block.conv2, 1)?;
            d = self.affine_node(graph, d, block.norm2, mode, &mut stats)?;
            if let Some(gp) = &block.gala {
                activity.insert(i, d);
                let out = gala_forward(graph, &self.params, gp, d)?;
                attention.insert(i, out.attention);
                d = out.modulated;
            }
            let short = match block.shortcut {
                Some((k, a)) => {
                    let s = self.conv_node(graph, x, k, block.plan.stride)?;
                    self.affine_node(graph, s, a, mode, &mut stats)?
                }
                None => x,
            };
            let sum = graph.add(short, d)?;
            x = graph.relu(sum)?;
        }
        let pooled = graph.global_avg_pool(x)?;
        let w = graph.param(&self.params, self.head.0)?;
        let b = graph.param(&self.params, self.head.1)?;
        let logits = graph.dense(pooled, w, Some(b))?;
        Ok(ForwardOutput {
            logits,
            attention,
            activity,
            norm_stats: stats,
        })
    }

    /// Move running averages toward observed batch statistics:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running_stats(&mut self, stats: &[NormStats], momentum: f64) {
        for s in stats {
            for (id, batch) in [(s.mean_id, &s.mean), (s.var_id, &s.var)] {
                let r = self.params.get_mut(id);
                for (rv, &b) in r.data_mut().iter_mut().zip(batch) {
                    *rv = (1.0 - momentum) * *rv + momentum * b;
                }
            }
        }
    }

    /// Convenience inference: logits and attention volumes as plain tensors.
    pub fn infer(&self, batch: &Tensor) -> Result<Inference> {
        let mut graph = Graph::new();
        let input = graph.constant(batch.clone())?;
        let out = self.forward_with_attention(&mut graph, input, Mode::Eval)?;
        Ok(Inference {
            logits: graph.value(out.logits).clone(),
            attention: out
                .attention
                .iter()
                .map(|(&l, &n)| (l, graph.value(n).clone()))
                .collect(),
        })
    }
}

fn gala_config(config: &BackboneConfig, p: &BlockPlan) -> GalaConfig {
    GalaConfig {
        channels: p.out_channels,
        reduction: config.reduction,
        local: config.local_attention,
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub logits: Tensor,
    pub attention: BTreeMap<usize, Tensor>,
}

impl Inference {
    /// Mean over layers of the channel-collapsed attention, one `[H,W]` map per sample.
    pub fn collapsed_attention(&self) -> Option<Vec<Vec<f64>>> {
        let layers: Vec<&Tensor> = self.attention.values().collect();
        let first = layers.first()?;
        let [n, h, w, c] = first.nhwc().ok()?;
        let mut maps = vec![vec![0.0; h * w]; n];
        for t in &layers {
            for (s, map) in maps.iter_mut().enumerate() {
                for (p, out) in map.iter_mut().enumerate() {
                    let site = &t.data()[(s * h * w + p) * c..][..c];
                    *out += site.iter().map(|v| v * v).sum::<f64>().sqrt();
                }
            }
        }
        let k = layers.len() as f64;
        maps.iter_mut().flatten().for_each(|v| *v /= k);
        Some(maps)
    }

    pub fn predictions(&self) -> Vec<usize> {
        let k = *self.logits.shape().last().unwrap_or(&1);
        self.logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }

    /// Labels ranked by descending logit for each sample.
    pub fn ranked(&self) -> Vec<Vec<usize>> {
        let k = *self.logits.shape().last().unwrap_or(&1);
        self.logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                let mut idx: Vec<usize> = (0..k).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                idx
            })
            .collect()
    }
}
