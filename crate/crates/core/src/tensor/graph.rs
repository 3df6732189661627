use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        requires_grad: bool,
        param: Option<ParamId>,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Relu(usize),
    Tanh(usize),
    GlobalAvgPool(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Tile(usize),
    Reshape(usize),
    ChannelL2(usize),
    ChannelAffine {
        input: usize,
        scale: usize,
        shift: usize,
    },
    BatchNorm {
        input: usize,
        inv_std: Vec<f64>,
    },
    Scale(usize, f64),
    Sum(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Distance {
        input: usize,
        unit_targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// A recorded forward computation. Values are computed eagerly as nodes are
/// added; [`Graph::backward`] replays the record in reverse.
///
/// Backward does not consume the record: calling it twice on the same loss
/// node yields identical gradients.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    graph: u64,
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: IndexMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient for a parameter, summed over every leaf that referenced it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient with respect to any node; zeros when the node was not reached.
    pub fn wrt(&self, node: NodeId) -> Result<Tensor> {
        if node.graph != self.graph || node.index >= self.nodes.len() {
            return Err(Error::Graph("node does not belong to this graph".into()));
        }
        let shape = self.shapes[node.index].clone();
        Ok(match &self.nodes[node.index] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[self.idx(node).expect("foreign node id")].value
    }

    fn idx(&self, node: NodeId) -> Result<usize> {
        if node.graph != self.id || node.index >= self.nodes.len() {
            return Err(Error::Graph("node does not belong to this graph".into()));
        }
        Ok(node.index)
    }

    fn shape_of(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, what: &str) -> Result<NodeId> {
        value.check_finite(what)?;
        let needs_grad = match &op {
            Op::Leaf { requires_grad, .. } => *requires_grad,
            other => inputs_of(other).iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        Ok(NodeId {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// A constant or input leaf.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(
            Op::Leaf {
                requires_grad,
                param: None,
            },
            value,
            "input",
        )
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.input(value, false)
    }

    /// A trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        self.push(
            Op::Leaf {
                requires_grad: true,
                param: Some(id),
            },
            store.get(id).clone(),
            store.name(id),
        )
    }

    /// Same as [`Graph::param`] but the leaf does not request a gradient.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        self.push(
            Op::Leaf {
                requires_grad: false,
                param: Some(id),
            },
            store.get(id).clone(),
            store.name(id),
        )
    }

    /// Convolution over `[N,H,W,Cin]` with a `[KH,KW,Cin,Cout]` kernel and optional `[Cout]` bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (xi, ki) = (self.idx(input)?, self.idx(kernel)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let [n, h, w, ci] = nhwc(self.shape_of(xi), "conv2d input")?;
        let [kh, kw, kci, co] = match self.shape_of(ki) {
            [a, b, c, d] => [*a, *b, *c, *d],
            other => return Err(shape_err("conv2d kernel", "[KH,KW,Cin,Cout]", other)),
        };
        if kci != ci {
            return Err(shape_err(
                "conv2d kernel",
                &format!("[{kh},{kw},{ci},{co}]"),
                self.shape_of(ki),
            ));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        if let Some(b) = bi {
            if self.shape_of(b) != [co] {
                return Err(shape_err("conv2d bias", &format!("[{co}]"), self.shape_of(b)));
            }
        }
        let geom = conv_geometry(h, w, kh, kw, stride, padding)?;
        let x = self.nodes[xi].value.data();
        let k = self.nodes[ki].value.data();
        let b = bi.map(|b| self.nodes[b].value.data());
        let mut y = vec![0.0; n * geom.out_h * geom.out_w * co];
        for nn in 0..n {
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let o = ((nn * geom.out_h + oy) * geom.out_w + ox) * co;
                    let out = &mut y[o..o + co];
                    if let Some(b) = b {
                        out.copy_from_slice(b);
                    }
                    for ky in 0..kh {
                        let Some(iy) = geom.src(oy, ky, stride, geom.pad_top, h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = geom.src(ox, kx, stride, geom.pad_left, w) else {
                                continue;
                            };
                            let src = &x[((nn * h + iy) * w + ix) * ci..][..ci];
                            let kbase = (ky * kw + kx) * ci * co;
                            for (c, &v) in src.iter().enumerate() {
                                if v == 0.0 {
                                    continue;
                                }
                                let row = &k[kbase + c * co..][..co];
                                for (acc, &kv) in out.iter_mut().zip(row) {
                                    *acc += v * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, geom.out_h, geom.out_w, co], y);
        self.push(
            Op::Conv2d {
                input: xi,
                kernel: ki,
                bias: bi,
                stride,
                pad_top: geom.pad_top,
                pad_left: geom.pad_left,
            },
            value,
            "conv2d",
        )
    }

    /// Fully connected layer: `[N,Cin]` (or `[N,1,1,Cin]`) times `[Cin,Cout]` plus `[Cout]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (xi, wi) = (self.idx(input)?, self.idx(weight)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let (n, cin) = rows_cols(self.shape_of(xi), "dense input")?;
        let (wr, cout) = match self.shape_of(wi) {
            [r, c] => (*r, *c),
            other => return Err(shape_err("dense weight", "[Cin,Cout]", other)),
        };
        if wr != cin {
            return Err(shape_err(
                "dense weight",
                &format!("[{cin},{cout}]"),
                self.shape_of(wi),
            ));
        }
        if let Some(b) = bi {
            if self.shape_of(b) != [cout] {
                return Err(shape_err("dense bias", &format!("[{cout}]"), self.shape_of(b)));
            }
        }
        let x = self.nodes[xi].value.data();
        let wt = self.nodes[wi].value.data();
        let mut y = vec![0.0; n * cout];
        for r in 0..n {
            let out = &mut y[r * cout..(r + 1) * cout];
            if let Some(b) = bi {
                out.copy_from_slice(self.nodes[b].value.data());
            }
            for (c, &v) in x[r * cin..(r + 1) * cin].iter().enumerate() {
                for (acc, &wv) in out.iter_mut().zip(&wt[c * cout..(c + 1) * cout]) {
                    *acc += v * wv;
                }
            }
        }
        self.push(
            Op::Dense {
                input: xi,
                weight: wi,
                bias: bi,
            },
            Tensor::from_parts(vec![n, cout], y),
            "dense",
        )
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.idx(input)?;
        let v = self.nodes[i].value.map(|x| x.max(0.0));
        self.push(Op::Relu(i), v, "relu")
    }

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.idx(input)?;
        let v = self.nodes[i].value.map(f64::tanh);
        self.push(Op::Tanh(i), v, "tanh")
    }

    /// Spatial mean per channel: `[N,H,W,C] -> [N,1,1,C]`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.idx(input)?;
        let [n, h, w, c] = nhwc(self.shape_of(i), "global_avg_pool input")?;
        let x = self.nodes[i].value.data();
        let inv = 1.0 / (h * w) as f64;
        let mut y = vec![0.0; n * c];
        for nn in 0..n {
            let out = &mut y[nn * c..(nn + 1) * c];
            for p in 0..h * w {
                for (acc, &v) in out.iter_mut().zip(&x[(nn * h * w + p) * c..][..c]) {
                    *acc += v;
                }
            }
            out.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(
            Op::GlobalAvgPool(i),
            Tensor::from_parts(vec![n, 1, 1, c], y),
            "global_avg_pool",
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ai, bi, "add")?;
        let y = zip_map(&self.nodes[ai].value, &self.nodes[bi].value, |x, y| x + y);
        self.push(Op::Add(ai, bi), y, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ai, bi, "mul")?;
        let y = zip_map(&self.nodes[ai].value, &self.nodes[bi].value, |x, y| x * y);
        self.push(Op::Mul(ai, bi), y, "mul")
    }

    /// Repeat unit axes of `input` to reach `shape` (same rank, each axis equal or 1).
    pub fn tile(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let i = self.idx(input)?;
        let src = self.shape_of(i).to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1) {
            return Err(shape_err("tile input", &format!("broadcastable to {shape:?}"), &src));
        }
        let map = TileMap::new(&src, shape);
        let x = self.nodes[i].value.data();
        let y: Vec<f64> = (0..map.out_len).map(|o| x[map.source(o)]).collect();
        self.push(Op::Tile(i), Tensor::from_parts(shape.to_vec(), y), "tile")
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let i = self.idx(input)?;
        let v = &self.nodes[i].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(shape_err("reshape input", &format!("{shape:?} element count"), v.shape()));
        }
        let value = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        self.push(Op::Reshape(i), value, "reshape")
    }

    /// Euclidean norm over channels: `[N,H,W,C] -> [N,H,W,1]`.
    pub fn channel_l2(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.idx(input)?;
        let [n, h, w, c] = nhwc(self.shape_of(i), "channel_l2 input")?;
        let x = self.nodes[i].value.data();
        let y: Vec<f64> = x
            .chunks_exact(c)
            .map(|site| site.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(
            Op::ChannelL2(i),
            Tensor::from_parts(vec![n, h, w, 1], y),
            "channel_l2",
        )
    }

    /// `x * scale[c] + shift[c]` along the last axis.
    pub fn channel_affine(&mut self, input: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let (xi, si, bi) = (self.idx(input)?, self.idx(scale)?, self.idx(shift)?);
        let c = *self
            .shape_of(xi)
            .last()
            .ok_or_else(|| Error::Shape("channel_affine on a scalar".into()))?;
        for (what, j) in [("channel_affine scale", si), ("channel_affine shift", bi)] {
            if self.shape_of(j) != [c] {
                return Err(shape_err(what, &format!("[{c}]"), self.shape_of(j)));
            }
        }
        let s = self.nodes[si].value.data();
        let b = self.nodes[bi].value.data();
        let y: Vec<f64> = self.nodes[xi]
            .value
            .data()
            .chunks_exact(c)
            .flat_map(|site| site.iter().zip(s).zip(b).map(|((x, s), b)| x * s + b))
            .collect();
        let shape = self.shape_of(xi).to_vec();
        self.push(
            Op::ChannelAffine {
                input: xi,
                scale: si,
                shift: bi,
            },
            Tensor::from_parts(shape, y),
            "channel_affine",
        )
    }

    /// Per-channel standardization with statistics over every axis but the
    /// last: `(x - mean[c]) / sqrt(var[c] + eps)`, biased variance. Returns the
    /// node and the batch `(mean, var)`.
    pub fn batch_norm(&mut self, input: NodeId, eps: f64) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let xi = self.idx(input)?;
        let c = *self
            .shape_of(xi)
            .last()
            .ok_or_else(|| Error::Shape("batch_norm on a scalar".into()))?;
        if !(eps > 0.0) {
            return Err(Error::Shape(format!("batch_norm eps must be positive, got {eps}")));
        }
        let x = self.nodes[xi].value.data();
        let m = x.len() / c;
        if m == 0 {
            return Err(Error::Shape("batch_norm on an empty tensor".into()));
        }
        let mut mean = vec![0.0; c];
        for site in x.chunks_exact(c) {
            mean.iter_mut().zip(site).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        let mut var = vec![0.0; c];
        for site in x.chunks_exact(c) {
            for k in 0..c {
                var[k] += (site[k] - mean[k]).powi(2);
            }
        }
        var.iter_mut().for_each(|a| *a /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y: Vec<f64> = x
            .chunks_exact(c)
            .flat_map(|site| (0..c).map(|k| (site[k] - mean[k]) * inv_std[k]).collect::<Vec<_>>())
            .collect();
        let shape = self.shape_of(xi).to_vec();
        let node = self.push(
            Op::BatchNorm { input: xi, inv_std },
            Tensor::from_parts(shape, y),
            "batch_norm",
        )?;
        Ok((node, mean, var))
    }

    pub fn scale(&mut self, input: NodeId, k: f64) -> Result<NodeId> {
        let i = self.idx(input)?;
        let v = self.nodes[i].value.scale(k);
        self.push(Op::Scale(i, k), v, "scale")
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.idx(input)?;
        let s = self.nodes[i].value.data().iter().sum();
        self.push(Op::Sum(i), Tensor::scalar(s), "sum")
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let li = self.idx(logits)?;
        let (n, k) = rows_cols(self.shape_of(li), "softmax_cross_entropy logits")?;
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy labels: expected {n}, got {}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let x = self.nodes[li].value.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss += max + z.ln() - row[label];
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            value,
            "softmax_cross_entropy",
        )
    }

    /// Weighted mean over samples of `|| t/|t| - x/|x| ||` where norms are per sample
    /// (axis 0). Samples with zero weight do not contribute; all-zero weights give 0.
    pub fn l2_distance(&mut self, input: NodeId, target: &Tensor, weights: &[f64]) -> Result<NodeId> {
        let i = self.idx(input)?;
        let shape = self.shape_of(i).to_vec();
        if target.shape() != shape.as_slice() {
            return Err(shape_err("l2_distance target", &format!("{shape:?}"), target.shape()));
        }
        let n = *shape
            .first()
            .ok_or_else(|| Error::Shape("l2_distance on a scalar".into()))?;
        if weights.len() != n {
            return Err(Error::Shape(format!(
                "l2_distance weights: expected {n}, got {}",
                weights.len()
            )));
        }
        let per = if n == 0 { 0 } else { target.len() / n };
        let mut unit_targets = target.data().to_vec();
        for chunk in unit_targets.chunks_exact_mut(per.max(1)) {
            let norm = l2(chunk);
            if norm > 0.0 {
                chunk.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let x = self.nodes[i].value.data();
        let total_w: f64 = weights.iter().sum();
        let mut acc = 0.0;
        for s in 0..n {
            if weights[s] == 0.0 {
                continue;
            }
            let xs = &x[s * per..(s + 1) * per];
            let ts = &unit_targets[s * per..(s + 1) * per];
            acc += weights[s] * unit_distance(xs, ts);
        }
        let value = Tensor::scalar(if total_w > 0.0 { acc / total_w } else { 0.0 });
        self.push(
            Op::L2Distance {
                input: i,
                unit_targets,
                weights: weights.to_vec(),
            },
            value,
            "l2_distance",
        )
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(shape_err(
                &format!("{what} right operand"),
                &format!("{:?}", self.shape_of(a)),
                self.shape_of(b),
            ));
        }
        Ok(())
    }

    /// Reverse-mode gradients of a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape_of(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: IndexMap<ParamId, Tensor> = IndexMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                requires_grad: true,
                param: Some(pid),
            } = node.op
            {
                let g = grads[i].clone().unwrap_or_else(|| vec![0.0; node.value.len()]);
                match params.get_mut(&pid) {
                    Some(existing) => existing
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(pid, Tensor::from_parts(node.value.shape().to_vec(), g));
                    }
                }
            }
        }
        Ok(Gradients {
            graph: self.id,
            nodes: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad_top,
                pad_left,
            } => self.backprop_conv(i, *input, *kernel, *bias, *stride, *pad_top, *pad_left, g, grads),
            Op::Dense { input, weight, bias } => {
                let (n, cin) = rows_cols(self.shape_of(*input), "").expect("checked in forward");
                let cout = self.shape_of(*weight)[1];
                let x = self.nodes[*input].value.data();
                let wt = self.nodes[*weight].value.data();
                if self.nodes[*input].needs_grad {
                    let dx = slot(grads, *input, n * cin);
                    for r in 0..n {
                        let gr = &g[r * cout..(r + 1) * cout];
                        for c in 0..cin {
                            dx[r * cin + c] += dot(&wt[c * cout..(c + 1) * cout], gr);
                        }
                    }
                }
                if self.nodes[*weight].needs_grad {
                    let dw = slot(grads, *weight, cin * cout);
                    for r in 0..n {
                        let gr = &g[r * cout..(r + 1) * cout];
                        for c in 0..cin {
                            let v = x[r * cin + c];
                            for (d, &gv) in dw[c * cout..(c + 1) * cout].iter_mut().zip(gr) {
                                *d += v * gv;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    if self.nodes[*b].needs_grad {
                        let db = slot(grads, *b, cout);
                        for gr in g.chunks_exact(cout) {
                            db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.nodes[*x].needs_grad {
                    let xv = self.nodes[*x].value.data();
                    let dx = slot(grads, *x, xv.len());
                    for ((d, &v), &gv) in dx.iter_mut().zip(xv).zip(g) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if self.nodes[*x].needs_grad {
                    let y = node.value.data();
                    let dx = slot(grads, *x, y.len());
                    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.nodes[*x].needs_grad {
                    let [n, h, w, c] = nhwc(self.shape_of(*x), "").expect("checked in forward");
                    let inv = 1.0 / (h * w) as f64;
                    let dx = slot(grads, *x, n * h * w * c);
                    for nn in 0..n {
                        let gn = &g[nn * c..(nn + 1) * c];
                        for p in 0..h * w {
                            for (d, &gv) in dx[(nn * h * w + p) * c..][..c].iter_mut().zip(gn) {
                                *d += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &j in [a, b] {
                    if self.nodes[j].needs_grad {
                        slot(grads, j, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (j, other) in [(*a, *b), (*b, *a)] {
                    if self.nodes[j].needs_grad {
                        let o = self.nodes[other].value.data();
                        slot(grads, j, g.len())
                            .iter_mut()
                            .zip(g)
                            .zip(o)
                            .for_each(|((d, gv), ov)| *d += gv * ov);
                    }
                }
            }
            Op::Tile(x) => {
                if self.nodes[*x].needs_grad {
                    let map = TileMap::new(self.shape_of(*x), node.value.shape());
                    let dx = slot(grads, *x, self.nodes[*x].value.len());
                    for (o, &gv) in g.iter().enumerate() {
                        dx[map.source(o)] += gv;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.nodes[*x].needs_grad {
                    slot(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::ChannelL2(x) => {
                if self.nodes[*x].needs_grad {
                    let xv = self.nodes[*x].value.data();
                    let c = *self.shape_of(*x).last().unwrap();
                    let y = node.value.data();
                    let dx = slot(grads, *x, xv.len());
                    for (s, (&norm, &gv)) in y.iter().zip(g).enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        for k in 0..c {
                            dx[s * c + k] += gv * xv[s * c + k] / norm;
                        }
                    }
                }
            }
            Op::ChannelAffine { input, scale, shift } => {
                let c = *self.shape_of(*input).last().unwrap();
                let xv = self.nodes[*input].value.data();
                let s = self.nodes[*scale].value.data();
                if self.nodes[*input].needs_grad {
                    let dx = slot(grads, *input, xv.len());
                    for (site, gs) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for k in 0..c {
                            site[k] += gs[k] * s[k];
                        }
                    }
                }
                if self.nodes[*scale].needs_grad {
                    let ds = slot(grads, *scale, c);
                    for (xs, gs) in xv.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for k in 0..c {
                            ds[k] += gs[k] * xs[k];
                        }
                    }
                }
                if self.nodes[*shift].needs_grad {
                    let db = slot(grads, *shift, c);
                    for gs in g.chunks_exact(c) {
                        db.iter_mut().zip(gs).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::BatchNorm { input, inv_std } => {
                if self.nodes[*input].needs_grad {
                    // dx = inv_std * (g - mean(g) - y * mean(g * y))
                    let c = inv_std.len();
                    let y = node.value.data();
                    let m = (y.len() / c) as f64;
                    let mut mg = vec![0.0; c];
                    let mut mgy = vec![0.0; c];
                    for (ys, gs) in y.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for k in 0..c {
                            mg[k] += gs[k];
                            mgy[k] += gs[k] * ys[k];
                        }
                    }
                    mg.iter_mut().for_each(|v| *v /= m);
                    mgy.iter_mut().for_each(|v| *v /= m);
                    let dx = slot(grads, *input, y.len());
                    for ((ds, ys), gs) in dx.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(g.chunks_exact(c)) {
                        for k in 0..c {
                            ds[k] += inv_std[k] * (gs[k] - mg[k] - ys[k] * mgy[k]);
                        }
                    }
                }
            }
            Op::Scale(x, k) => {
                if self.nodes[*x].needs_grad {
                    slot(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += k * v);
                }
            }
            Op::Sum(x) => {
                if self.nodes[*x].needs_grad {
                    let len = self.nodes[*x].value.len();
                    slot(grads, *x, len).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.nodes[*logits].needs_grad {
                    let n = labels.len();
                    let k = probs.len() / n.max(1);
                    let scale = g[0] / n as f64;
                    let dx = slot(grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dx[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::L2Distance {
                input,
                unit_targets,
                weights,
            } => {
                if self.nodes[*input].needs_grad {
                    let total_w: f64 = weights.iter().sum();
                    if total_w <= 0.0 {
                        return;
                    }
                    let xv = self.nodes[*input].value.data();
                    let per = xv.len() / weights.len();
                    let dx = slot(grads, *input, xv.len());
                    for (s, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let xs = &xv[s * per..(s + 1) * per];
                        let ts = &unit_targets[s * per..(s + 1) * per];
                        let coeff = g[0] * w / total_w;
                        unit_distance_grad(xs, ts, coeff, &mut dx[s * per..(s + 1) * per]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        out: usize,
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let [n, h, w, ci] = nhwc(self.shape_of(input), "").expect("checked in forward");
        let [kh, kw, _, co] = nhwc(self.shape_of(kernel), "").expect("checked in forward");
        let [_, oh, ow, _] = nhwc(self.shape_of(out), "").expect("checked in forward");
        let geom = ConvGeometry {
            out_h: oh,
            out_w: ow,
            pad_top,
            pad_left,
        };
        let x = self.nodes[input].value.data();
        let k = self.nodes[kernel].value.data();
        let want_dx = self.nodes[input].needs_grad;
        let want_dk = self.nodes[kernel].needs_grad;

        if let Some(b) = bias.filter(|&b| self.nodes[b].needs_grad) {
            let db = slot(grads, b, co);
            for gs in g.chunks_exact(co) {
                db.iter_mut().zip(gs).for_each(|(d, v)| *d += v);
            }
        }
        let mut dx = want_dx.then(|| vec![0.0; x.len()]);
        let mut dk = want_dk.then(|| vec![0.0; k.len()]);
        for nn in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gs = &g[((nn * oh + oy) * ow + ox) * co..][..co];
                    if gs.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for ky in 0..kh {
                        let Some(iy) = geom.src(oy, ky, stride, pad_top, h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = geom.src(ox, kx, stride, pad_left, w) else {
                                continue;
                            };
                            let base = ((nn * h + iy) * w + ix) * ci;
                            let kbase = (ky * kw + kx) * ci * co;
                            if let Some(dx) = dx.as_mut() {
                                for c in 0..ci {
                                    dx[base + c] += dot(&k[kbase + c * co..][..co], gs);
                                }
                            }
                            if let Some(dk) = dk.as_mut() {
                                for c in 0..ci {
                                    let v = x[base + c];
                                    if v == 0.0 {
                                        continue;
                                    }
                                    for (d, &gv) in dk[kbase + c * co..][..co].iter_mut().zip(gs) {
                                        *d += v * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx {
            slot(grads, input, dx.len()).iter_mut().zip(&dx).for_each(|(d, v)| *d += v);
        }
        if let Some(dk) = dk {
            slot(grads, kernel, dk.len()).iter_mut().zip(&dk).for_each(|(d, v)| *d += v);
        }
    }
}

fn inputs_of(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Conv2d {
            input, kernel, bias, ..
        } => [Some(*input), Some(*kernel), *bias].into_iter().flatten().collect(),
        Op::Dense { input, weight, bias } => {
            [Some(*input), Some(*weight), *bias].into_iter().flatten().collect()
        }
        Op::Relu(x)
        | Op::Tanh(x)
        | Op::GlobalAvgPool(x)
        | Op::Tile(x)
        | Op::Reshape(x)
        | Op::ChannelL2(x)
        | Op::Scale(x, _)
        | Op::Sum(x) => vec![*x],
        Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::ChannelAffine { input, scale, shift } => vec![*input, *scale, *shift],
        Op::BatchNorm { input, .. } => vec![*input],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        Op::L2Distance { input, .. } => vec![*input],
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], i: usize, len: usize) -> &'a mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|| t - x/|x| ||` for a unit-norm `t`. A zero `x` is treated as the zero vector.
fn unit_distance(x: &[f64], unit_t: &[f64]) -> f64 {
    let nx = l2(x);
    let inv = if nx > 0.0 { 1.0 / nx } else { 0.0 };
    x.iter()
        .zip(unit_t)
        .map(|(a, t)| (t - a * inv).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn unit_distance_grad(x: &[f64], unit_t: &[f64], coeff: f64, dx: &mut [f64]) {
    let nx = l2(x);
    if nx == 0.0 {
        return;
    }
    // u = x/|x| - t; d|u|/dx = (I - x̂x̂ᵀ) u / (|u| |x|)
    let xhat: Vec<f64> = x.iter().map(|v| v / nx).collect();
    let u: Vec<f64> = xhat.iter().zip(unit_t).map(|(a, t)| a - t).collect();
    let d = l2(&u);
    if d == 0.0 {
        return;
    }
    let proj = dot(&xhat, &u);
    for ((out, &ui), &xi) in dx.iter_mut().zip(&u).zip(&xhat) {
        *out += coeff * (ui - xi * proj) / (d * nx);
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn shape_err(operand: &str, expected: &str, got: &[usize]) -> Error {
    Error::Shape(format!("{operand}: expected {expected}, got {got:?}"))
}

fn nhwc(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        [n, h, w, c] => Ok([*n, *h, *w, *c]),
        other => Err(shape_err(what, "[N,H,W,C]", other)),
    }
}

fn rows_cols(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c)),
        [n, 1, 1, c] => Ok((*n, *c)),
        other => Err(shape_err(what, "[N,C] or [N,1,1,C]", other)),
    }
}

struct ConvGeometry {
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    #[inline]
    fn src(&self, o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }
}

/// Output extent and leading padding. "Same" pads `max((out-1)*s + k - in, 0)` in
/// total with the smaller half first.
fn conv_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    match padding {
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::Shape(format!(
                    "conv2d valid padding: kernel {kh}x{kw} larger than input {h}x{w}"
                )));
            }
            Ok(ConvGeometry {
                out_h: (h - kh) / stride + 1,
                out_w: (w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
        Padding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            Ok(ConvGeometry {
                out_h,
                out_w,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        }
    }
}

struct TileMap {
    src_strides: [usize; 4],
    out_dims: [usize; 4],
    out_len: usize,
}

impl TileMap {
    fn new(src: &[usize], out: &[usize]) -> Self {
        let pad = 4 - out.len();
        let mut src_dims = [1usize; 4];
        let mut out_dims = [1usize; 4];
        src_dims[pad..].copy_from_slice(src);
        out_dims[pad..].copy_from_slice(out);
        let mut strides = [0usize; 4];
        let mut acc = 1;
        for d in (0..4).rev() {
            strides[d] = if src_dims[d] == 1 { 0 } else { acc };
            acc *= src_dims[d];
        }
        Self {
            src_strides: strides,
            out_dims,
            out_len: out.iter().product(),
        }
    }

    #[inline]
    fn source(&self, mut o: usize) -> usize {
        let mut idx = 0;
        for d in (0..4).rev() {
            let coord = o % self.out_dims[d];
            o /= self.out_dims[d];
            idx += coord * self.src_strides[d];
        }
        idx
    }
}
