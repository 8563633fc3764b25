//! Minimal define-by-run reverse-mode autodiff on dense f64 tensors.
//!
//! Design: a [`Graph`] is a tape of eagerly-evaluated nodes. Building an op
//! computes its value immediately; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients. Multiple backward passes over one tape
//! are allowed (each returns fresh gradients), which the trainer uses to
//! probe per-loss gradient norms for the adaptive GAN weight.
//!
//! The op set is exactly what the models need: convolution, group
//! normalization, SiLU / leaky-ReLU / softplus, nearest-neighbor upsampling,
//! elementwise arithmetic, reductions, codebook row gather, layout permutes,
//! and `detach` (identity forward, zero backward) from which stop-gradient
//! and straight-through estimators are composed.

use serde::{Deserialize, Serialize};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Silu,
    LeakyRelu(f64),
    Softplus,
    Conv2d { stride: usize, pad: usize },
    GroupNorm { groups: usize, eps: f64 },
    UpsampleNearest2,
    MeanAll,
    SumAll,
    NchwToCells,
    CellsToNchw { n: usize, c: usize, h: usize, w: usize },
    GatherRows(Vec<usize>),
    Detach,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Eagerly-evaluated computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients from one backward pass.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.numel(), 1, "node is not a scalar");
        v.data[0]
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => false, // set by `param`
            Op::Detach => false,
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    /// Leaf that does not require gradients (inputs, masks, targets).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], t)
    }

    /// Leaf that accumulates gradients (model parameters).
    pub fn param(&mut self, t: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, vec![], t);
        self.nodes[id].needs_grad = true;
        id
    }

    fn same_shape(&self, a: NodeId, b: NodeId) {
        assert_eq!(
            self.nodes[a].value.shape, self.nodes[b].value.shape,
            "elementwise op requires equal shapes"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(&self.nodes[a].value.shape.clone(), data);
        self.push(Op::Add, vec![a, b], t)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(&self.nodes[a].value.shape.clone(), data);
        self.push(Op::Sub, vec![a, b], t)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(&self.nodes[a].value.shape.clone(), data);
        self.push(Op::Mul, vec![a, b], t)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].value.data.iter().map(|x| x * c).collect();
        let t = Tensor::from_vec(&self.nodes[a].value.shape.clone(), data);
        self.push(Op::Scale(c), vec![a], t)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let data = self
            .nodes[a]
            .value
            .data
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let t = Tensor::from_vec(&self.nodes[a].value.shape.clone(), data);
        self.push(Op::Silu, vec![a], t)
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let data = self
            .nodes[a]
            .value
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { alpha * x })
            .collect();
        let t = Tensor::from_vec(&self.nodes[a].value.shape.clone(), data);
        self.push(Op::LeakyRelu(alpha), vec![a], t)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].value.data.iter().map(|&x| softplus(x)).collect();
        let t = Tensor::from_vec(&self.nodes[a].value.shape.clone(), data);
        self.push(Op::Softplus, vec![a], t)
    }

    /// 2D convolution: x (N,C,H,W), w (O,C,KH,KW), b (O).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let value = conv2d_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
            stride,
            pad,
        );
        self.push(Op::Conv2d { stride, pad }, vec![x, w, b], value)
    }

    /// Group normalization with affine parameters gamma, beta of shape (C).
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let value = group_norm_forward(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            groups,
            eps,
        );
        self.push(Op::GroupNorm { groups, eps }, vec![x, gamma, beta], value)
    }

    /// Nearest-neighbor 2x spatial upsampling of (N,C,H,W).
    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let (n, c, h, w) = nchw(v);
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let val = v.data[((ni * c + ci) * h + hi) * w + wi];
                        let base = ((ni * c + ci) * 2 * h + 2 * hi) * 2 * w + 2 * wi;
                        out.data[base] = val;
                        out.data[base + 1] = val;
                        out.data[base + 2 * w] = val;
                        out.data[base + 2 * w + 1] = val;
                    }
                }
            }
        }
        self.push(Op::UpsampleNearest2, vec![x], out)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let m = v.data.iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::MeanAll, vec![a], Tensor::scalar(m))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let s = v.data.iter().sum::<f64>();
        self.push(Op::SumAll, vec![a], Tensor::scalar(s))
    }

    /// (N,C,H,W) -> (N*H*W, C): one row per spatial cell.
    pub fn nchw_to_cells(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let (n, c, h, w) = nchw(v);
        let mut out = Tensor::zeros(&[n * h * w, c]);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out.data[((ni * h + hi) * w + wi) * c + ci] =
                            v.data[((ni * c + ci) * h + hi) * w + wi];
                    }
                }
            }
        }
        self.push(Op::NchwToCells, vec![x], out)
    }

    /// (N*H*W, C) -> (N,C,H,W); inverse of [`Graph::nchw_to_cells`].
    pub fn cells_to_nchw(&mut self, x: NodeId, n: usize, c: usize, h: usize, w: usize) -> NodeId {
        let v = &self.nodes[x].value;
        assert_eq!(v.shape, vec![n * h * w, c]);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out.data[((ni * c + ci) * h + hi) * w + wi] =
                            v.data[((ni * h + hi) * w + wi) * c + ci];
                    }
                }
            }
        }
        self.push(Op::CellsToNchw { n, c, h, w }, vec![x], out)
    }

    /// Gather rows of a (K, d) table; gradient scatter-adds into the table.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let v = &self.nodes[table].value;
        assert_eq!(v.shape.len(), 2, "gather_rows expects a (K, d) table");
        let (k, d) = (v.shape[0], v.shape[1]);
        let mut out = Tensor::zeros(&[indices.len(), d]);
        for (row, &idx) in indices.iter().enumerate() {
            assert!(idx < k, "gather index {idx} out of range {k}");
            out.data[row * d..(row + 1) * d].copy_from_slice(&v.data[idx * d..(idx + 1) * d]);
        }
        self.push(Op::GatherRows(indices.to_vec()), vec![table], out)
    }

    /// Identity forward, zero backward (stop-gradient).
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let t = self.nodes[a].value.clone();
        self.push(Op::Detach, vec![a], t)
    }

    /// Straight-through surrogate: forward equals `quantized`, gradient
    /// flows entirely to `continuous` (`z_c + detach(z_q - z_c)`).
    pub fn straight_through(&mut self, continuous: NodeId, quantized: NodeId) -> NodeId {
        let delta = self.sub(quantized, continuous);
        let frozen = self.detach(delta);
        self.add(continuous, frozen)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Reverse-mode pass from a scalar node. Returns per-node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Grads {
        assert_eq!(self.nodes[loss].value.numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        // The tape is topologically ordered by construction, so a reverse
        // sweep sees every node after all of its consumers.
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.backward_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], update: impl FnOnce(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape));
        update(&mut slot.data);
    }

    fn backward_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let needs = |i: NodeId| self.nodes[i].needs_grad;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add => {
                for &i in ins {
                    if needs(i) {
                        let shape = self.nodes[i].value.shape.clone();
                        Self::accumulate(grads, i, &shape, |d| {
                            for (dv, gv) in d.iter_mut().zip(&g.data) {
                                *dv += gv;
                            }
                        });
                    }
                }
            }
            Op::Sub => {
                if needs(ins[0]) {
                    let shape = self.nodes[ins[0]].value.shape.clone();
                    Self::accumulate(grads, ins[0], &shape, |d| {
                        for (dv, gv) in d.iter_mut().zip(&g.data) {
                            *dv += gv;
                        }
                    });
                }
                if needs(ins[1]) {
                    let shape = self.nodes[ins[1]].value.shape.clone();
                    Self::accumulate(grads, ins[1], &shape, |d| {
                        for (dv, gv) in d.iter_mut().zip(&g.data) {
                            *dv -= gv;
                        }
                    });
                }
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                if needs(a) {
                    let bv = self.nodes[b].value.data.clone();
                    let shape = self.nodes[a].value.shape.clone();
                    Self::accumulate(grads, a, &shape, |d| {
                        for i in 0..d.len() {
                            d[i] += g.data[i] * bv[i];
                        }
                    });
                }
                if needs(b) {
                    let av = self.nodes[a].value.data.clone();
                    let shape = self.nodes[b].value.shape.clone();
                    Self::accumulate(grads, b, &shape, |d| {
                        for i in 0..d.len() {
                            d[i] += g.data[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale(c) => {
                if needs(ins[0]) {
                    let c = *c;
                    let shape = self.nodes[ins[0]].value.shape.clone();
                    Self::accumulate(grads, ins[0], &shape, |d| {
                        for i in 0..d.len() {
                            d[i] += g.data[i] * c;
                        }
                    });
                }
            }
            Op::Silu => {
                if needs(ins[0]) {
                    let xv = &self.nodes[ins[0]].value.data;
                    let shape = self.nodes[ins[0]].value.shape.clone();
                    let mut contrib = vec![0.0; xv.len()];
                    for i in 0..xv.len() {
                        let s = sigmoid(xv[i]);
                        contrib[i] = g.data[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                    Self::accumulate(grads, ins[0], &shape, |d| {
                        for i in 0..d.len() {
                            d[i] += contrib[i];
                        }
                    });
                }
            }
            Op::LeakyRelu(alpha) => {
                if needs(ins[0]) {
                    let alpha = *alpha;
                    let xv = &self.nodes[ins[0]].value.data;
                    let shape = self.nodes[ins[0]].value.shape.clone();
                    let mut contrib = vec![0.0; xv.len()];
                    for i in 0..xv.len() {
                        contrib[i] = g.data[i] * if xv[i] > 0.0 { 1.0 } else { alpha };
                    }
                    Self::accumulate(grads, ins[0], &shape, |d| {
                        for i in 0..d.len() {
                            d[i] += contrib[i];
                        }
                    });
                }
            }
            Op::Softplus => {
                if needs(ins[0]) {
                    let xv = &self.nodes[ins[0]].value.data;
                    let shape = self.nodes[ins[0]].value.shape.clone();
                    let mut contrib = vec![0.0; xv.len()];
                    for i in 0..xv.len() {
                        contrib[i] = g.data[i] * sigmoid(xv[i]);
                    }
                    Self::accumulate(grads, ins[0], &shape, |d| {
                        for i in 0..d.len() {
                            d[i] += contrib[i];
                        }
                    });
                }
            }
            Op::Conv2d { stride, pad } => {
                conv2d_backward(
                    &self.nodes[ins[0]].value,
                    &self.nodes[ins[1]].value,
                    g,
                    *stride,
                    *pad,
                    needs(ins[0]),
                    needs(ins[1]),
                    needs(ins[2]),
                    ins,
                    grads,
                );
            }
            Op::GroupNorm { groups, eps } => {
                group_norm_backward(
                    &self.nodes[ins[0]].value,
                    &self.nodes[ins[1]].value,
                    g,
                    *groups,
                    *eps,
                    needs(ins[0]),
                    needs(ins[1]),
                    needs(ins[2]),
                    ins,
                    grads,
                );
            }
            Op::UpsampleNearest2 => {
                if needs(ins[0]) {
                    let v = &self.nodes[ins[0]].value;
                    let (n, c, h, w) = nchw(v);
                    let shape = v.shape.clone();
                    let mut contrib = vec![0.0; v.numel()];
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let base = ((ni * c + ci) * 2 * h + 2 * hi) * 2 * w + 2 * wi;
                                    contrib[((ni * c + ci) * h + hi) * w + wi] = g.data[base]
                                        + g.data[base + 1]
                                        + g.data[base + 2 * w]
                                        + g.data[base + 2 * w + 1];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[0], &shape, |d| {
                        for i in 0..d.len() {
                            d[i] += contrib[i];
                        }
                    });
                }
            }
            Op::MeanAll => {
                if needs(ins[0]) {
                    let shape = self.nodes[ins[0]].value.shape.clone();
                    let gv = g.data[0] / self.nodes[ins[0]].value.numel() as f64;
                    Self::accumulate(grads, ins[0], &shape, |d| {
                        for dv in d.iter_mut() {
                            *dv += gv;
                        }
                    });
                }
            }
            Op::SumAll => {
                if needs(ins[0]) {
                    let shape = self.nodes[ins[0]].value.shape.clone();
                    let gv = g.data[0];
                    Self::accumulate(grads, ins[0], &shape, |d| {
                        for dv in d.iter_mut() {
                            *dv += gv;
                        }
                    });
                }
            }
            Op::NchwToCells => {
                if needs(ins[0]) {
                    let v = &self.nodes[ins[0]].value;
                    let (n, c, h, w) = nchw(v);
                    let shape = v.shape.clone();
                    let mut contrib = vec![0.0; v.numel()];
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    contrib[((ni * c + ci) * h + hi) * w + wi] +=
                                        g.data[((ni * h + hi) * w + wi) * c + ci];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[0], &shape, |d| {
                        for i in 0..d.len() {
                            d[i] += contrib[i];
                        }
                    });
                }
            }
            Op::CellsToNchw { n, c, h, w } => {
                if needs(ins[0]) {
                    let (n, c, h, w) = (*n, *c, *h, *w);
                    let shape = self.nodes[ins[0]].value.shape.clone();
                    let mut contrib = vec![0.0; n * h * w * c];
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    contrib[((ni * h + hi) * w + wi) * c + ci] +=
                                        g.data[((ni * c + ci) * h + hi) * w + wi];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[0], &shape, |d| {
                        for i in 0..d.len() {
                            d[i] += contrib[i];
                        }
                    });
                }
            }
            Op::GatherRows(indices) => {
                if needs(ins[0]) {
                    let shape = self.nodes[ins[0]].value.shape.clone();
                    let d_dim = shape[1];
                    let indices = indices.clone();
                    Self::accumulate(grads, ins[0], &shape, |d| {
                        for (row, &idx) in indices.iter().enumerate() {
                            for k in 0..d_dim {
                                d[idx * d_dim + k] += g.data[row * d_dim + k];
                            }
                        }
                    });
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(1 + exp(x)).
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn nchw(t: &Tensor) -> (usize, usize, usize, usize) {
    assert_eq!(t.shape.len(), 4, "expected NCHW tensor, got {:?}", t.shape);
    (t.shape[0], t.shape[1], t.shape[2], t.shape[3])
}

/// Output-column range `lo..hi` for which `ow*stride + shift` indexes a
/// valid input column in `0..input_w` (with `hi` further clamped to `ow_count`).
/// `ys[i] += a * xs[i]` over equal-length slices. Independent lanes, so the
/// optimizer vectorizes this; it is the stride-1 inner loop of every conv.
#[inline]
fn axpy(a: f64, xs: &[f64], ys: &mut [f64]) {
    for (y, x) in ys.iter_mut().zip(xs) {
        *y += a * x;
    }
}

/// Dot product with four independent accumulators. f64 addition is not
/// reassociable, so a single running sum cannot vectorize; the fixed 4-lane
/// split keeps results deterministic while letting the lanes run in SIMD.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i + 4 <= n {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (s0 + s2) + (s1 + s3);
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

fn ow_bounds(shift: isize, stride: usize, input_w: usize, ow_count: usize) -> (usize, usize) {
    let lo = if shift < 0 {
        ((-shift) as usize).div_ceil(stride)
    } else {
        0
    };
    let last = input_w as isize - 1 - shift;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / stride + 1).min(ow_count)
    };
    (lo.min(hi), hi)
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "conv kernel {k} larger than padded input {input}+2*{pad}"
    );
    // Floor semantics: trailing rows/columns that don't fit a full stride
    // are simply not visited (they then receive zero gradient).
    (input + 2 * pad - k) / stride + 1
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = nchw(x);
    let (o, ci, kh, kw) = nchw(w);
    assert_eq!(c, ci, "conv channel mismatch");
    assert_eq!(b.shape, vec![o], "conv bias shape");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for ni in 0..n {
        for oi in 0..o {
            let bias = b.data[oi];
            for ohi in 0..oh {
                let out_row = &mut out.data
                    [((ni * o + oi) * oh + ohi) * ow..((ni * o + oi) * oh + ohi + 1) * ow];
                for v in out_row.iter_mut() {
                    *v = bias;
                }
                for ci in 0..c {
                    for khi in 0..kh {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = &x.data
                            [((ni * c + ci) * h + ih as usize) * wd..((ni * c + ci) * h + ih as usize + 1) * wd];
                        let w_base = ((oi * c + ci) * kh + khi) * kw;
                        for kwi in 0..kw {
                            let wv = w.data[w_base + kwi];
                            if wv == 0.0 {
                                continue;
                            }
                            let shift = kwi as isize - pad as isize;
                            let (lo, hi) = ow_bounds(shift, stride, wd, ow);
                            if lo >= hi {
                                continue;
                            }
                            if stride == 1 {
                                let xo = (lo as isize + shift) as usize;
                                axpy(wv, &x_row[xo..xo + (hi - lo)], &mut out_row[lo..hi]);
                            } else {
                                for owi in lo..hi {
                                    let iw = (owi * stride) as isize + shift;
                                    out_row[owi] += wv * x_row[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
    ins: &[NodeId],
    grads: &mut [Option<Tensor>],
) {
    let (n, c, h, wd) = nchw(x);
    let (o, _, kh, kw) = nchw(w);
    let (gn, go, oh, ow) = nchw(g);
    assert_eq!((gn, go), (n, o));

    if need_b {
        let slot = grads[ins[2]].get_or_insert_with(|| Tensor::zeros(&[o]));
        for ni in 0..n {
            for oi in 0..o {
                let base = ((ni * o + oi) * oh) * ow;
                slot.data[oi] += g.data[base..base + oh * ow].iter().sum::<f64>();
            }
        }
    }
    if need_w {
        let slot = grads[ins[1]].get_or_insert_with(|| Tensor::zeros(&w.shape));
        for ni in 0..n {
            for oi in 0..o {
                for ohi in 0..oh {
                    let g_row = &g.data[((ni * o + oi) * oh + ohi) * ow..((ni * o + oi) * oh + ohi + 1) * ow];
                    for ci in 0..c {
                        for khi in 0..kh {
                            let ih = (ohi * stride + khi) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let x_row = &x.data[((ni * c + ci) * h + ih as usize) * wd
                                ..((ni * c + ci) * h + ih as usize + 1) * wd];
                            let w_base = ((oi * c + ci) * kh + khi) * kw;
                            for kwi in 0..kw {
                                let shift = kwi as isize - pad as isize;
                                let (lo, hi) = ow_bounds(shift, stride, wd, ow);
                                if lo >= hi {
                                    continue;
                                }
                                let acc = if stride == 1 {
                                    let xo = (lo as isize + shift) as usize;
                                    dot(&g_row[lo..hi], &x_row[xo..xo + (hi - lo)])
                                } else {
                                    let mut acc = 0.0;
                                    for owi in lo..hi {
                                        let iw = (owi * stride) as isize + shift;
                                        acc += g_row[owi] * x_row[iw as usize];
                                    }
                                    acc
                                };
                                slot.data[w_base + kwi] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    if need_x {
        let slot = grads[ins[0]].get_or_insert_with(|| Tensor::zeros(&x.shape));
        for ni in 0..n {
            for oi in 0..o {
                for ohi in 0..oh {
                    let g_row = &g.data[((ni * o + oi) * oh + ohi) * ow..((ni * o + oi) * oh + ohi + 1) * ow];
                    for ci in 0..c {
                        for khi in 0..kh {
                            let ih = (ohi * stride + khi) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let x_row = &mut slot.data[((ni * c + ci) * h + ih as usize) * wd
                                ..((ni * c + ci) * h + ih as usize + 1) * wd];
                            let w_base = ((oi * c + ci) * kh + khi) * kw;
                            for kwi in 0..kw {
                                let wv = w.data[w_base + kwi];
                                if wv == 0.0 {
                                    continue;
                                }
                                let shift = kwi as isize - pad as isize;
                                let (lo, hi) = ow_bounds(shift, stride, wd, ow);
                                if lo >= hi {
                                    continue;
                                }
                                if stride == 1 {
                                    let xo = (lo as isize + shift) as usize;
                                    axpy(wv, &g_row[lo..hi], &mut x_row[xo..xo + (hi - lo)]);
                                } else {
                                    for owi in lo..hi {
                                        let iw = (owi * stride) as isize + shift;
                                        x_row[iw as usize] += wv * g_row[owi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn group_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Tensor {
    let (n, c, h, w) = nchw(x);
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    assert_eq!(gamma.shape, vec![c]);
    assert_eq!(beta.shape, vec![c]);
    let cg = c / groups;
    let m = (cg * h * w) as f64;
    let mut out = Tensor::zeros(&x.shape);
    for ni in 0..n {
        for gi in 0..groups {
            let c0 = gi * cg;
            let mut mean = 0.0;
            for ci in c0..c0 + cg {
                let base = ((ni * c + ci) * h) * w;
                mean += x.data[base..base + h * w].iter().sum::<f64>();
            }
            mean /= m;
            let mut var = 0.0;
            for ci in c0..c0 + cg {
                let base = ((ni * c + ci) * h) * w;
                var += x.data[base..base + h * w]
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= m;
            let inv_std = 1.0 / (var + eps).sqrt();
            for ci in c0..c0 + cg {
                let base = ((ni * c + ci) * h) * w;
                let (ga, be) = (gamma.data[ci], beta.data[ci]);
                for idx in base..base + h * w {
                    out.data[idx] = ga * (x.data[idx] - mean) * inv_std + be;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    groups: usize,
    eps: f64,
    need_x: bool,
    need_gamma: bool,
    need_beta: bool,
    ins: &[NodeId],
    grads: &mut [Option<Tensor>],
) {
    let (n, c, h, w) = nchw(x);
    let cg = c / groups;
    let m = (cg * h * w) as f64;

    // Recompute per-(n, group) statistics (cheaper than storing them).
    for ni in 0..n {
        for gi in 0..groups {
            let c0 = gi * cg;
            let mut mean = 0.0;
            for ci in c0..c0 + cg {
                let base = ((ni * c + ci) * h) * w;
                mean += x.data[base..base + h * w].iter().sum::<f64>();
            }
            mean /= m;
            let mut var = 0.0;
            for ci in c0..c0 + cg {
                let base = ((ni * c + ci) * h) * w;
                var += x.data[base..base + h * w]
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= m;
            let inv_std = 1.0 / (var + eps).sqrt();

            if need_gamma || need_beta {
                for ci in c0..c0 + cg {
                    let base = ((ni * c + ci) * h) * w;
                    let mut dg = 0.0;
                    let mut db = 0.0;
                    for idx in base..base + h * w {
                        let xh = (x.data[idx] - mean) * inv_std;
                        dg += g.data[idx] * xh;
                        db += g.data[idx];
                    }
                    if need_gamma {
                        let slot = grads[ins[1]].get_or_insert_with(|| Tensor::zeros(&[c]));
                        slot.data[ci] += dg;
                    }
                    if need_beta {
                        let slot = grads[ins[2]].get_or_insert_with(|| Tensor::zeros(&[c]));
                        slot.data[ci] += db;
                    }
                }
            }

            if need_x {
                // dxhat = g * gamma ; dx = inv_std * (dxhat - mean(dxhat)
                //        - xhat * mean(dxhat * xhat))
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for ci in c0..c0 + cg {
                    let base = ((ni * c + ci) * h) * w;
                    let ga = gamma.data[ci];
                    for idx in base..base + h * w {
                        let xh = (x.data[idx] - mean) * inv_std;
                        let dxh = g.data[idx] * ga;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                }
                let mean_dxh = sum_dxh / m;
                let mean_dxh_xh = sum_dxh_xh / m;
                let slot = grads[ins[0]].get_or_insert_with(|| Tensor::zeros(&x.shape));
                for ci in c0..c0 + cg {
                    let base = ((ni * c + ci) * h) * w;
                    let ga = gamma.data[ci];
                    for idx in base..base + h * w {
                        let xh = (x.data[idx] - mean) * inv_std;
                        let dxh = g.data[idx] * ga;
                        slot.data[idx] += inv_std * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
            }
        }
    }
}

/// Named parameter with a freeze flag honored by the optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Ordered set of named parameters (order is the checkpoint layout).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, tensor: Tensor) -> usize {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate param '{name}'"
        );
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            frozen: false,
        });
        self.params.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing param '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing param '{name}'"))
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Adam optimizer over a [`ParamStore`]; frozen parameters are skipped
/// entirely (no state update, no parameter change).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: store.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    /// Apply one update. `grads[i]` pairs with `store.params[i]`; `None`
    /// (no gradient reached the parameter) leaves it untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.params.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(gr) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, val) in p.tensor.data.iter_mut().enumerate() {
                let g = gr.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                *val -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
