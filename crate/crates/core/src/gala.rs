//! Global-and-local attention (GALA).
//!
//! A GALA module turns layer activity `U` (`[N,H,W,C]`) into an attention
//! volume `A` of the same shape:
//!
//! - global path: per-channel spatial means `p`, then a shrink/expand MLP with
//!   a ReLU in between, giving `g` (`[N,C]`);
//! - local path: a 1x1 conv down to `C/r` channels, ReLU, and a 1x1 conv to a
//!   single saliency map `S` (`[N,H,W,1]`);
//! - integration: `A = tanh(a_c (G* + S*) + m_c (G* · S*))` with `G*`, `S*`
//!   tiled to `[N,H,W,C]` and learned per-channel gains `a`, `m`.
//!
//! The modulated activity is `U ⊙ A`. Because `tanh` spans `[-1, 1]`, attention
//! can flip the sign of a unit as well as suppress it.
//!
//! Dense weights are stored input-major (`[C, C/r]` for the shrink step) so
//! they plug straight into [`Graph::dense`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::scaled_normal;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub const DEFAULT_REDUCTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalaConfig {
    pub channels: usize,
    pub reduction: usize,
    /// With the local path off the module is a tanh-gated squeeze-excitation block.
    pub local: bool,
}

impl GalaConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            reduction: DEFAULT_REDUCTION,
            local: true,
        }
    }

    pub fn reduced(&self) -> Result<usize> {
        if self.reduction == 0 || self.channels == 0 || self.channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "reduction ratio {} must divide channel count {}",
                self.reduction, self.channels
            )));
        }
        Ok(self.channels / self.reduction)
    }
}

/// Parameter handles of one GALA module inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GalaParams {
    pub config: GalaConfig,
    pub w_shrink: ParamId,
    pub b_shrink: ParamId,
    pub w_expand: ParamId,
    pub b_expand: ParamId,
    pub v_shrink: ParamId,
    pub vb_shrink: ParamId,
    pub v_collapse: ParamId,
    pub vb_collapse: ParamId,
    pub add_gain: ParamId,
    pub mul_gain: ParamId,
}

/// Field names and shapes, in registration order.
pub fn param_layout(config: &GalaConfig) -> Result<Vec<(&'static str, Vec<usize>)>> {
    let c = config.channels;
    let cr = config.reduced()?;
    Ok(vec![
        ("w_shrink", vec![c, cr]),
        ("b_shrink", vec![cr]),
        ("w_expand", vec![cr, c]),
        ("b_expand", vec![c]),
        ("v_shrink", vec![1, 1, c, cr]),
        ("vb_shrink", vec![cr]),
        ("v_collapse", vec![1, 1, cr, 1]),
        ("vb_collapse", vec![1]),
        ("add_gain", vec![c]),
        ("mul_gain", vec![c]),
    ])
}

impl GalaParams {
    /// Register freshly initialized parameters under `prefix`.
    ///
    /// Weights are fan-in scaled normals, biases zero, `a = 1`, `m = 0`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: GalaConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = config.channels;
        let cr = config.reduced()?;
        let mut tensors = Vec::new();
        for (name, shape) in param_layout(&config)? {
            let t = match name {
                "w_shrink" => scaled_normal(&shape, c, 2.0, rng),
                "w_expand" => scaled_normal(&shape, cr, 1.0, rng),
                "v_shrink" => scaled_normal(&shape, c, 2.0, rng),
                "v_collapse" => scaled_normal(&shape, cr, 1.0, rng),
                "add_gain" => Tensor::full(&shape, 1.0),
                _ => Tensor::zeros(&shape),
            };
            tensors.push((name, t));
        }
        for (name, t) in tensors {
            store.insert(format!("{prefix}.{name}"), t)?;
        }
        Self::bind(store, prefix, config)
    }

    /// Look up existing parameters registered under `prefix` and check their shapes.
    pub fn bind(store: &ParamStore, prefix: &str, config: GalaConfig) -> Result<Self> {
        let layout = param_layout(&config)?;
        let mut ids = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let full = format!("{prefix}.{name}");
            let id = store.id(&full)?;
            let got = store.get(id).shape();
            if got != shape.as_slice() {
                let kind = if name.starts_with('v') && shape.len() == 4 {
                    " (1x1 kernels only)"
                } else {
                    ""
                };
                return Err(Error::Shape(format!(
                    "{full}: expected {shape:?}{kind}, got {got:?}"
                )));
            }
            ids.push(id);
        }
        Ok(Self {
            config,
            w_shrink: ids[0],
            b_shrink: ids[1],
            w_expand: ids[2],
            b_expand: ids[3],
            v_shrink: ids[4],
            vb_shrink: ids[5],
            v_collapse: ids[6],
            vb_collapse: ids[7],
            add_gain: ids[8],
            mul_gain: ids[9],
        })
    }

    pub fn ids(&self) -> [ParamId; 10] {
        [
            self.w_shrink,
            self.b_shrink,
            self.w_expand,
            self.b_expand,
            self.v_shrink,
            self.vb_shrink,
            self.v_collapse,
            self.vb_collapse,
            self.add_gain,
            self.mul_gain,
        ]
    }
}

/// Intermediate nodes of one GALA application.
#[derive(Debug, Clone, Copy)]
pub struct GalaOutput {
    pub global: NodeId,
    pub local: Option<NodeId>,
    pub attention: NodeId,
    pub modulated: NodeId,
}

fn check_channels(graph: &Graph, u: NodeId, params: &GalaParams) -> Result<[usize; 4]> {
    let shape = graph.value(u).nhwc()?;
    if shape[3] != params.config.channels {
        return Err(Error::Shape(format!(
            "GALA input: expected {} channels, got {:?}",
            params.config.channels, shape
        )));
    }
    params.config.reduced()?;
    Ok(shape)
}

/// Global feature attention `g = W_expand relu(W_shrink p + b) + b'`, shape `[N,C]`.
pub fn gala_global(
    graph: &mut Graph,
    store: &ParamStore,
    params: &GalaParams,
    u: NodeId,
) -> Result<NodeId> {
    check_channels(graph, u, params)?;
    let p = graph.global_avg_pool(u)?;
    let w1 = graph.param(store, params.w_shrink)?;
    let b1 = graph.param(store, params.b_shrink)?;
    let w2 = graph.param(store, params.w_expand)?;
    let b2 = graph.param(store, params.b_expand)?;
    let hidden = graph.dense(p, w1, Some(b1))?;
    let hidden = graph.relu(hidden)?;
    graph.dense(hidden, w2, Some(b2))
}

/// Local saliency `S = V_collapse * relu(V_shrink * U)`, shape `[N,H,W,1]`.
pub fn gala_local(
    graph: &mut Graph,
    store: &ParamStore,
    params: &GalaParams,
    u: NodeId,
) -> Result<NodeId> {
    check_channels(graph, u, params)?;
    let v1 = graph.param(store, params.v_shrink)?;
    let b1 = graph.param(store, params.vb_shrink)?;
    let v2 = graph.param(store, params.v_collapse)?;
    let b2 = graph.param(store, params.vb_collapse)?;
    let hidden = graph.conv2d(u, v1, Some(b1), 1, crate::tensor::Padding::Valid)?;
    let hidden = graph.relu(hidden)?;
    graph.conv2d(hidden, v2, Some(b2), 1, crate::tensor::Padding::Valid)
}

/// Combine `g` (`[N,C]`) and `S` (`[N,H,W,1]`, or none) into `A` (`[N,H,W,C]`).
pub fn gala_integrate(
    graph: &mut Graph,
    store: &ParamStore,
    params: &GalaParams,
    global: NodeId,
    local: Option<NodeId>,
    spatial: (usize, usize),
) -> Result<NodeId> {
    let c = params.config.channels;
    let gain_len = |id: ParamId| store.get(id).shape().to_vec();
    for (what, id) in [("add_gain", params.add_gain), ("mul_gain", params.mul_gain)] {
        if gain_len(id) != [c] {
            return Err(Error::Shape(format!(
                "GALA {what}: expected [{c}], got {:?}",
                gain_len(id)
            )));
        }
    }
    let n = graph.value(global).shape()[0];
    let (h, w) = spatial;
    let full = [n, h, w, c];
    let g4 = graph.reshape(global, &[n, 1, 1, c])?;
    let g_tiled = graph.tile(g4, &full)?;
    let a = graph.param(store, params.add_gain)?;
    let a = graph.reshape(a, &[1, 1, 1, c])?;
    let a = graph.tile(a, &full)?;
    let pre = match local {
        Some(s) => {
            let s_shape = graph.value(s).shape().to_vec();
            if s_shape != [n, h, w, 1] {
                return Err(Error::Shape(format!(
                    "GALA saliency map: expected [{n},{h},{w},1], got {s_shape:?}"
                )));
            }
            let s_tiled = graph.tile(s, &full)?;
            let m = graph.param(store, params.mul_gain)?;
            let m = graph.reshape(m, &[1, 1, 1, c])?;
            let m = graph.tile(m, &full)?;
            let sum = graph.add(g_tiled, s_tiled)?;
            let prod = graph.mul(g_tiled, s_tiled)?;
            let additive = graph.mul(a, sum)?;
            let multiplicative = graph.mul(m, prod)?;
            graph.add(additive, multiplicative)?
        }
        None => graph.mul(a, g_tiled)?,
    };
    graph.tanh(pre)
}

/// `U ⊙ A`.
pub fn gala_apply(graph: &mut Graph, u: NodeId, attention: NodeId) -> Result<NodeId> {
    graph.mul(u, attention)
}

/// Per-site Euclidean norm over channels, `[N,H,W,C] -> [N,H,W,1]`.
pub fn collapse_attention(graph: &mut Graph, attention: NodeId) -> Result<NodeId> {
    graph.channel_l2(attention)
}

/// Run all four stages on `u`.
pub fn gala_forward(
    graph: &mut Graph,
    store: &ParamStore,
    params: &GalaParams,
    u: NodeId,
) -> Result<GalaOutput> {
    let [_, h, w, _] = check_channels(graph, u, params)?;
    let global = gala_global(graph, store, params, u)?;
    let local = if params.config.local {
        Some(gala_local(graph, store, params, u)?)
    } else {
        None
    };
    let attention = gala_integrate(graph, store, params, global, local, (h, w))?;
    let modulated = gala_apply(graph, u, attention)?;
    Ok(GalaOutput {
        global,
        local,
        attention,
        modulated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, r: usize) -> (ParamStore, GalaParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = GalaConfig {
            channels: c,
            reduction: r,
            local: true,
        };
        let p = GalaParams::init(&mut store, "gala", cfg, &mut rng).unwrap();
        (store, p)
    }

    fn set(store: &mut ParamStore, id: ParamId, data: &[f64]) {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::new(&shape, data.to_vec()).unwrap()).unwrap();
    }

    #[test]
    fn reduction_must_divide_channels() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = GalaParams::init(&mut store, "g", GalaConfig::new(6), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(GalaConfig::new(8).reduced().unwrap(), 2);
    }

    #[test]
    fn init_gains_and_biases() {
        let (store, p) = setup(8, 4);
        assert_eq!(store.get(p.add_gain).data(), &[1.0; 8]);
        assert_eq!(store.get(p.mul_gain).data(), &[0.0; 8]);
        assert_eq!(store.get(p.b_expand).data(), &[0.0; 8]);
    }

    #[test]
    fn zero_input_gives_zero_global_and_local() {
        let (store, p) = setup(4, 2);
        let mut g = Graph::new();
        let u = g.constant(Tensor::zeros(&[1, 3, 3, 4])).unwrap();
        let out = gala_forward(&mut g, &store, &p, u).unwrap();
        assert!(g.value(out.global).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.local.unwrap()).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.attention).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_pool_of_spatially_constant_input() {
        let (mut store, p) = setup(2, 2);
        // identity-ish MLP exposes p directly: shrink [2,1] = [1,0], expand [1,2] = [1,0]
        set(&mut store, p.w_shrink, &[1.0, 0.0]);
        set(&mut store, p.w_expand, &[1.0, 0.0]);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..9).flat_map(|_| [0.7, -3.0]).collect();
        let u = g.constant(Tensor::new(&[1, 3, 3, 2], data).unwrap()).unwrap();
        let gv = gala_global(&mut g, &store, &p, u).unwrap();
        assert!((g.value(gv).data()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_global_path() {
        // C = 2, r = 2, single pixel input [2, -1]
        let (mut store, p) = setup(2, 2);
        set(&mut store, p.w_shrink, &[0.5, -1.5]);
        set(&mut store, p.b_shrink, &[0.25]);
        set(&mut store, p.w_expand, &[2.0, -3.0]);
        set(&mut store, p.b_expand, &[0.1, 0.2]);
        let mut g = Graph::new();
        let u = g.constant(Tensor::new(&[1, 1, 1, 2], vec![2.0, -1.0]).unwrap()).unwrap();
        let gv = gala_global(&mut g, &store, &p, u).unwrap();
        // hidden = relu(0.5*2 + -1.5*-1 + 0.25) = 2.75
        let hidden: f64 = (0.5f64 * 2.0 + 1.5 + 0.25).max(0.0);
        let expected = [2.0 * hidden + 0.1, -3.0 * hidden + 0.2];
        assert_eq!(g.value(gv).data(), &expected);
    }

    #[test]
    fn local_path_scalar_composition() {
        let cfg = GalaConfig {
            channels: 1,
            reduction: 1,
            local: true,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GalaParams::init(&mut store, "g", cfg, &mut rng).unwrap();
        set(&mut store, p.v_shrink, &[1.0]);
        set(&mut store, p.v_collapse, &[2.0]);
        let vals = vec![-1.0, 0.5, 2.0, -0.25];
        let mut g = Graph::new();
        let u = g.constant(Tensor::new(&[1, 2, 2, 1], vals.clone()).unwrap()).unwrap();
        let s = gala_local(&mut g, &store, &p, u).unwrap();
        let expected: Vec<f64> = vals.iter().map(|v| 2.0 * v.max(0.0)).collect();
        assert_eq!(g.value(s).data(), expected.as_slice());
        assert_eq!(g.value(s).shape(), &[1, 2, 2, 1]);
    }

    #[test]
    fn integrate_scalar_site() {
        let cfg = GalaConfig {
            channels: 1,
            reduction: 1,
            local: true,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GalaParams::init(&mut store, "g", cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let gv = g.constant(Tensor::new(&[1, 1], vec![0.5]).unwrap()).unwrap();
        let s = g.constant(Tensor::new(&[1, 1, 1, 1], vec![0.25]).unwrap()).unwrap();
        let a = gala_integrate(&mut g, &store, &p, gv, Some(s), (1, 1)).unwrap();
        assert_eq!(g.value(a).data(), &[0.75f64.tanh()]);
    }

    #[test]
    fn zeroed_gains_give_zero_attention() {
        let (mut store, p) = setup(4, 2);
        set(&mut store, p.add_gain, &[0.0; 4]);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let u = g.constant(Tensor::new(&[1, 3, 3, 4], data).unwrap()).unwrap();
        let out = gala_forward(&mut g, &store, &p, u).unwrap();
        assert!(g.value(out.attention).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_identity_zero_and_negation() {
        let mut g = Graph::new();
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let u = g.constant(Tensor::new(&[1, 1, 2, 2], vals.clone()).unwrap()).unwrap();
        for (fill, expect) in [(1.0, 1.0), (0.0, 0.0), (-1.0, -1.0)] {
            let a = g.constant(Tensor::full(&[1, 1, 2, 2], fill)).unwrap();
            let y = gala_apply(&mut g, u, a).unwrap();
            let want: Vec<f64> = vals.iter().map(|v| v * expect).collect();
            assert_eq!(g.value(y).data(), want.as_slice());
        }
        let bad = g.constant(Tensor::zeros(&[1, 2, 2, 1])).unwrap();
        assert!(gala_apply(&mut g, u, bad).is_err());
    }

    #[test]
    fn collapse_norms() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 1, 2, 1], vec![-0.5, 0.25]).unwrap()).unwrap();
        let c = collapse_attention(&mut g, a).unwrap();
        assert_eq!(g.value(c).data(), &[0.5, 0.25]);
        let v = g.constant(Tensor::full(&[1, 1, 1, 4], -0.3)).unwrap();
        let c = collapse_attention(&mut g, v).unwrap();
        assert!((g.value(c).data()[0] - 0.3 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn bind_rejects_non_pointwise_kernels() {
        let (mut store, _) = setup(4, 2);
        let mut other = ParamStore::new();
        for (name, t) in store.iter() {
            let t = if name.ends_with("v_shrink") {
                Tensor::zeros(&[3, 3, 4, 2])
            } else {
                t.clone()
            };
            other.insert(name, t).unwrap();
        }
        store = other;
        let err = GalaParams::bind(&store, "gala", GalaConfig {
            channels: 4,
            reduction: 2,
            local: true,
        })
        .unwrap_err();
        assert!(err.to_string().contains("1x1"), "{err}");
    }
}
