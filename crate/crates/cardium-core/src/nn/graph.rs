//! Tape-based reverse-mode automatic differentiation over `ArrayD<f64>`.
//!
//! A [`Graph`] is rebuilt for every forward pass: each op call appends a node
//! holding the computed value, and [`Graph::backward`] walks the tape in
//! reverse creation order, producing gradients for every [`ParamStore`]
//! parameter that participated. The engine is double precision throughout so
//! finite-difference gradient checks can be tight.
//!
//! Ops that contract or normalize over a tensor axis accept a `canonical`
//! flag. The canonical path makes each output element a pure function of the
//! *multiset* of its inputs: dot products sequence their additions per output
//! element in index order of the non-contracted axes, and reductions over an
//! axis whose order carries no meaning (batch-as-sequence attention) sum
//! addends in sorted order. With canonical reductions enabled end to end, a
//! model whose only cross-row coupling is attention is *bitwise* equivariant
//! to row permutations. The fast path defers to BLAS-style matmul instead.

use std::collections::BTreeMap;

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::params::ParamStore;
use crate::util::{sigmoid, stable_sum};

/// Handle to a node in a [`Graph`]; valid only for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    Input,
    Param { name: String },
    Add { a: NodeId, b: NodeId },
    AddBroadcastLast { x: NodeId, bias: NodeId },
    AddBroadcastBatch { x: NodeId, table: NodeId },
    TileBatch { x: NodeId },
    Scale { x: NodeId, c: f64 },
    MulMask { x: NodeId, mask: ArrayD<f64> },
    Matmul2 { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId },
    Permute { x: NodeId, perm: Vec<usize> },
    Reshape { x: NodeId },
    SoftmaxLast { x: NodeId },
    LayerNormLast { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Gelu { x: NodeId },
    Relu { x: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    SelectAxis1 { x: NodeId, index: usize },
    FeatureLift { x: NodeId, w: NodeId, b: NodeId },
    SumAll { x: NodeId },
    BceWithLogits { logits: NodeId, targets: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// One forward computation; create, call ops, read values, run backward.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// The value of a scalar (0-d or single-element) node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar: shape {:?}", v.shape());
        *v.iter().next().expect("single element")
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        // Stored values must be row-major contiguous: later ops view-reshape
        // them, and `ndarray::dot` sometimes allocates F-order results.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // -- leaves ------------------------------------------------------------

    pub fn input(&mut self, value: ArrayD<f64>) -> NodeId {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Input, false)
    }

    /// Copies a named parameter into the graph; gradients flow back to it.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let param = store.get(name).unwrap_or_else(|e| panic!("{e}"));
        let value = param.value.as_standard_layout().into_owned();
        self.push(value, Op::Param { name: name.to_string() }, true)
    }

    // -- arithmetic ----------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, needs)
    }

    /// `x + bias` where `bias` has the shape of x's last axis.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        assert_eq!(bs.len(), 1, "bias must be rank 1");
        assert_eq!(*xs.last().expect("x has rank >= 1"), bs[0], "bias width mismatch");
        let value = self.value(x) + &self.value(bias).broadcast(IxDyn(&xs)).expect("broadcastable");
        let needs = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddBroadcastLast { x, bias }, needs)
    }

    /// `x + table` broadcasting `table` (shape = x's trailing axes) over axis 0.
    pub fn add_broadcast_batch(&mut self, x: NodeId, table: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ts = self.value(table).shape().to_vec();
        assert_eq!(&xs[1..], &ts[..], "table must match x's trailing axes");
        let value = self.value(x) + &self.value(table).broadcast(IxDyn(&xs)).expect("broadcastable");
        let needs = self.needs(x) || self.needs(table);
        self.push(value, Op::AddBroadcastBatch { x, table }, needs)
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn tile_batch(&mut self, x: NodeId, n: usize) -> NodeId {
        assert!(n > 0, "tile_batch needs n > 0");
        let mut shape = vec![n];
        shape.extend_from_slice(self.value(x).shape());
        let value = self
            .value(x)
            .broadcast(IxDyn(&shape))
            .expect("broadcastable")
            .as_standard_layout()
            .into_owned();
        let needs = self.needs(x);
        self.push(value, Op::TileBatch { x }, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x) * c;
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    /// Elementwise multiply by a constant mask (inverted-dropout style).
    pub fn mul_mask(&mut self, x: NodeId, mask: ArrayD<f64>) -> NodeId {
        assert_eq!(self.value(x).shape(), mask.shape(), "mask shape mismatch");
        let value = self.value(x) * &mask;
        let needs = self.needs(x);
        self.push(value, Op::MulMask { x, mask }, needs)
    }

    /// Inverted dropout with keep-scaling; identity when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let shape = self.value(x).raw_dim();
        let mask = ArrayD::from_shape_fn(shape, |_| {
            if rng.gen_bool(keep) {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.mul_mask(x, mask)
    }

    // -- linear algebra ------------------------------------------------------

    /// 2-D matrix product. The canonical path computes each output element
    /// with a sequential index-order dot, making row `i` of the result a pure
    /// function of row `i` of `a` (bitwise row-permutation equivariance).
    pub fn matmul2(&mut self, a: NodeId, b: NodeId, canonical: bool) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul2: a is 2-D");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul2: b is 2-D");
        assert_eq!(av.ncols(), bv.nrows(), "matmul2: inner dims disagree");
        let value = if canonical {
            let (m, k) = av.dim();
            let n = bv.ncols();
            let mut out = ndarray::Array2::<f64>::zeros((m, n));
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for kk in 0..k {
                        s += av[[i, kk]] * bv[[kk, j]];
                    }
                    out[[i, j]] = s;
                }
            }
            out.into_dyn()
        } else {
            av.dot(&bv).into_dyn()
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul2 { a, b }, needs)
    }

    /// Batched 3-D matmul `(B, m, k) x (B, k, n)`. The canonical path sums
    /// each output element's addends in sorted order, so contractions over a
    /// permuted axis (batch-as-sequence attention) are order-independent.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, canonical: bool) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix3>().expect("bmm: a is 3-D");
        let bv = self.value(b).view().into_dimensionality::<Ix3>().expect("bmm: b is 3-D");
        let (ba, m, k) = av.dim();
        let (bb, k2, n) = bv.dim();
        assert_eq!(ba, bb, "bmm: batch dims disagree");
        assert_eq!(k, k2, "bmm: inner dims disagree");
        let mut out = ndarray::Array3::<f64>::zeros((ba, m, n));
        if canonical {
            let mut buf = vec![0.0; k];
            for bi in 0..ba {
                for i in 0..m {
                    for j in 0..n {
                        for kk in 0..k {
                            buf[kk] = av[[bi, i, kk]] * bv[[bi, kk, j]];
                        }
                        out[[bi, i, j]] = stable_sum(&buf);
                    }
                }
            }
        } else {
            for bi in 0..ba {
                let prod = av.index_axis(Axis(0), bi).dot(&bv.index_axis(Axis(0), bi));
                out.index_axis_mut(Axis(0), bi).assign(&prod);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::Bmm { a, b }, needs)
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> NodeId {
        let nd = self.value(x).ndim();
        assert_eq!(perm.len(), nd, "permute: axis count mismatch");
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        let needs = self.needs(x);
        self.push(value, Op::Permute { x, perm: perm.to_vec() }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        assert_eq!(self.value(x).len(), n, "reshape: element count mismatch");
        let value = self
            .value(x)
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshapes cleanly")
            .into_owned();
        let needs = self.needs(x);
        self.push(value, Op::Reshape { x }, needs)
    }

    // -- nonlinearities ------------------------------------------------------

    /// Softmax over the last axis. Canonical mode computes each row's
    /// denominator with a sorted-addend sum so it is invariant to any
    /// permutation of the row's entries.
    pub fn softmax_last(&mut self, x: NodeId, canonical: bool) -> NodeId {
        let mut value = self.value(x).clone();
        let last = Axis(value.ndim() - 1);
        for mut lane in value.lanes_mut(last) {
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let denom = if canonical {
                let exps: Vec<f64> = lane.iter().copied().collect();
                stable_sum(&exps)
            } else {
                lane.sum()
            };
            lane.mapv_inplace(|v| v / denom);
        }
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxLast { x }, needs)
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta`.
    pub fn layer_norm_last(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let d = *self.value(x).shape().last().expect("x has rank >= 1");
        assert_eq!(self.value(gamma).shape(), [d], "gamma width mismatch");
        assert_eq!(self.value(beta).shape(), [d], "beta width mismatch");
        let gamma_v = self.value(gamma).view().into_dimensionality::<Ix1>().expect("rank 1");
        let beta_v = self.value(beta).view().into_dimensionality::<Ix1>().expect("rank 1");
        let mut value = self.value(x).clone();
        let last = Axis(value.ndim() - 1);
        for mut lane in value.lanes_mut(last) {
            let n = lane.len() as f64;
            let mean = lane.sum() / n;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = (var + eps).sqrt();
            for (j, v) in lane.iter_mut().enumerate() {
                *v = (*v - mean) / s * gamma_v[j] + beta_v[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(value, Op::LayerNormLast { x, gamma, beta, eps }, needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let value = self.value(x).mapv(|v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()));
        let needs = self.needs(x);
        self.push(value, Op::Gelu { x }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    // -- structure -----------------------------------------------------------

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat needs at least one part");
        let views: Vec<ArrayViewD<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat shapes agree");
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            value.as_standard_layout().into_owned(),
            Op::Concat { parts: parts.to_vec(), axis },
            needs,
        )
    }

    /// Selects one index along axis 1 of a 3-D tensor: `(B, T, D) -> (B, D)`.
    pub fn select_axis1(&mut self, x: NodeId, index: usize) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.ndim(), 3, "select_axis1 expects a 3-D tensor");
        assert!(index < v.shape()[1], "select_axis1: index out of range");
        let value = v.index_axis(Axis(1), index).as_standard_layout().into_owned();
        let needs = self.needs(x);
        self.push(value, Op::SelectAxis1 { x, index }, needs)
    }

    /// Per-feature affine lift: data `x: (B, n)` with parameters `w, b: (n, d)`
    /// produce tokens `(B, n, d)` via `out[i, j, :] = x[i, j] * w[j, :] + b[j, :]`.
    pub fn feature_lift(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("x is 2-D");
        let wv = self.value(w).view().into_dimensionality::<Ix2>().expect("w is 2-D");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("b is 2-D");
        let (batch, n) = xv.dim();
        let (n2, d) = wv.dim();
        assert_eq!(n, n2, "feature_lift: feature count mismatch");
        assert_eq!(bv.dim(), (n, d), "feature_lift: bias shape mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((batch, n, d));
        for i in 0..batch {
            for j in 0..n {
                for k in 0..d {
                    out[[i, j, k]] = xv[[i, j]] * wv[[j, k]] + bv[[j, k]];
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), Op::FeatureLift { x, w, b }, needs)
    }

    // -- reductions / losses ---------------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::SumAll { x }, needs)
    }

    /// Per-sample-weighted binary cross-entropy on logits, averaged over the
    /// batch count: `loss = (1/B) * sum_i w_i * bce(z_i, t_i)` with the
    /// numerically stable `bce = max(z, 0) - z t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64], weights: &[f64]) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.len(), targets.len(), "bce: target count mismatch");
        assert_eq!(z.len(), weights.len(), "bce: weight count mismatch");
        assert!(targets.iter().all(|t| *t == 0.0 || *t == 1.0), "bce: targets must be 0/1");
        let batch = targets.len() as f64;
        let mut total = 0.0;
        for ((z_i, t_i), w_i) in z.iter().zip(targets).zip(weights) {
            let term = z_i.max(0.0) - z_i * t_i + (-z_i.abs()).exp().ln_1p();
            total += w_i * term;
        }
        let value = scalar(total / batch);
        let needs = self.needs(logits);
        self.push(
            value,
            Op::BceWithLogits { logits, targets: targets.to_vec(), weights: weights.to_vec() },
            needs,
        )
    }

    // -- backward ------------------------------------------------------------

    /// Reverse-mode sweep from the scalar node `loss`; returns parameter
    /// gradients keyed by name (gradients of shared parameters accumulate).
    pub fn backward(&mut self, loss: NodeId) -> BTreeMap<String, ArrayD<f64>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));
        let mut param_grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            // `ndarray::dot` may allocate F-order outputs (e.g. when one
            // operand has a unit dimension), and several branches below view-
            // reshape `gy`, which requires row-major contiguity.
            let gy = if gy.is_standard_layout() {
                gy
            } else {
                gy.as_standard_layout().into_owned()
            };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param { name } => match param_grads.entry(name.clone()) {
                    std::collections::btree_map::Entry::Vacant(v) => {
                        v.insert(gy);
                    }
                    std::collections::btree_map::Entry::Occupied(mut o) => {
                        *o.get_mut() += &gy;
                    }
                },
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        acc(&mut grads[a.0], gy.clone());
                    }
                    if self.needs(b) {
                        acc(&mut grads[b.0], gy);
                    }
                }
                Op::AddBroadcastLast { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    if self.needs(bias) {
                        let d = gy.shape()[gy.ndim() - 1];
                        let flat = gy
                            .view()
                            .into_shape_with_order(IxDyn(&[gy.len() / d, d]))
                            .expect("standard layout");
                        acc(&mut grads[bias.0], flat.sum_axis(Axis(0)).into_dyn());
                    }
                    if self.needs(x) {
                        acc(&mut grads[x.0], gy);
                    }
                }
                Op::AddBroadcastBatch { x, table } => {
                    let (x, table) = (*x, *table);
                    if self.needs(table) {
                        acc(&mut grads[table.0], gy.sum_axis(Axis(0)));
                    }
                    if self.needs(x) {
                        acc(&mut grads[x.0], gy);
                    }
                }
                Op::TileBatch { x } => {
                    let x = *x;
                    if self.needs(x) {
                        acc(&mut grads[x.0], gy.sum_axis(Axis(0)));
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    if self.needs(x) {
                        acc(&mut grads[x.0], gy * c);
                    }
                }
                Op::MulMask { x, mask } => {
                    let x = *x;
                    let gx = &gy * mask;
                    if self.needs(x) {
                        acc(&mut grads[x.0], gx);
                    }
                }
                Op::Matmul2 { a, b } => {
                    let (a, b) = (*a, *b);
                    let gy2 = gy.view().into_dimensionality::<Ix2>().expect("2-D");
                    let av = self.value(a).view().into_dimensionality::<Ix2>().expect("2-D");
                    let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("2-D");
                    if self.needs(a) {
                        acc(&mut grads[a.0], gy2.dot(&bv.t()).into_dyn());
                    }
                    if self.needs(b) {
                        acc(&mut grads[b.0], av.t().dot(&gy2).into_dyn());
                    }
                }
                Op::Bmm { a, b } => {
                    let (a, b) = (*a, *b);
                    let gy3 = gy.view().into_dimensionality::<Ix3>().expect("3-D");
                    let av = self.value(a).view().into_dimensionality::<Ix3>().expect("3-D");
                    let bv = self.value(b).view().into_dimensionality::<Ix3>().expect("3-D");
                    let nb = av.dim().0;
                    if self.needs(a) {
                        let mut ga = ndarray::Array3::<f64>::zeros(av.dim());
                        for bi in 0..nb {
                            let g = gy3.index_axis(Axis(0), bi).dot(&bv.index_axis(Axis(0), bi).t());
                            ga.index_axis_mut(Axis(0), bi).assign(&g);
                        }
                        acc(&mut grads[a.0], ga.into_dyn());
                    }
                    if self.needs(b) {
                        let mut gb = ndarray::Array3::<f64>::zeros(bv.dim());
                        for bi in 0..nb {
                            let g = av.index_axis(Axis(0), bi).t().dot(&gy3.index_axis(Axis(0), bi));
                            gb.index_axis_mut(Axis(0), bi).assign(&g);
                        }
                        acc(&mut grads[b.0], gb.into_dyn());
                    }
                }
                Op::Permute { x, perm } => {
                    let x = *x;
                    let mut inverse = vec![0usize; perm.len()];
                    for (i, p) in perm.iter().enumerate() {
                        inverse[*p] = i;
                    }
                    let gx = gy.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned();
                    if self.needs(x) {
                        acc(&mut grads[x.0], gx);
                    }
                }
                Op::Reshape { x } => {
                    let x = *x;
                    let shape = self.value(x).shape().to_vec();
                    let gx = gy
                        .view()
                        .into_shape_with_order(IxDyn(&shape))
                        .expect("standard layout")
                        .into_owned();
                    if self.needs(x) {
                        acc(&mut grads[x.0], gx);
                    }
                }
                Op::SoftmaxLast { x } => {
                    let x = *x;
                    let p = &self.nodes[id].value;
                    let mut gx = gy.clone();
                    let last = Axis(gx.ndim() - 1);
                    for (mut g_lane, p_lane) in gx.lanes_mut(last).into_iter().zip(p.lanes(last)) {
                        let dot: f64 = g_lane.iter().zip(p_lane.iter()).map(|(g, p)| g * p).sum();
                        for (g, p) in g_lane.iter_mut().zip(p_lane.iter()) {
                            *g = p * (*g - dot);
                        }
                    }
                    if self.needs(x) {
                        acc(&mut grads[x.0], gx);
                    }
                }
                Op::LayerNormLast { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let xv = self.value(x);
                    let gamma_v = self.value(gamma).view().into_dimensionality::<Ix1>().expect("1-D");
                    let d = xv.shape()[xv.ndim() - 1];
                    let mut gx = ArrayD::<f64>::zeros(xv.raw_dim());
                    let mut ggamma = ndarray::Array1::<f64>::zeros(d);
                    let mut gbeta = ndarray::Array1::<f64>::zeros(d);
                    let last = Axis(xv.ndim() - 1);
                    for ((x_lane, gy_lane), mut gx_lane) in xv
                        .lanes(last)
                        .into_iter()
                        .zip(gy.lanes(last))
                        .zip(gx.lanes_mut(last))
                    {
                        let n = d as f64;
                        let mean = x_lane.sum() / n;
                        let var = x_lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let s = (var + eps).sqrt();
                        let xhat: Vec<f64> = x_lane.iter().map(|v| (v - mean) / s).collect();
                        let dxhat: Vec<f64> =
                            gy_lane.iter().zip(&gamma_v).map(|(g, gm)| g * gm).collect();
                        let m1: f64 = dxhat.iter().sum::<f64>() / n;
                        let m2: f64 = dxhat.iter().zip(&xhat).map(|(dx, xh)| dx * xh).sum::<f64>() / n;
                        for j in 0..d {
                            gx_lane[j] = (dxhat[j] - m1 - xhat[j] * m2) / s;
                            ggamma[j] += gy_lane[j] * xhat[j];
                            gbeta[j] += gy_lane[j];
                        }
                    }
                    if self.needs(x) {
                        acc(&mut grads[x.0], gx);
                    }
                    if self.needs(gamma) {
                        acc(&mut grads[gamma.0], ggamma.into_dyn());
                    }
                    if self.needs(beta) {
                        acc(&mut grads[beta.0], gbeta.into_dyn());
                    }
                }
                Op::Gelu { x } => {
                    let x = *x;
                    const C: f64 = 0.7978845608028654;
                    const A: f64 = 0.044715;
                    let deriv = self.value(x).mapv(|v| {
                        let t = (C * (v + A * v * v * v)).tanh();
                        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v)
                    });
                    if self.needs(x) {
                        acc(&mut grads[x.0], gy * &deriv);
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    let deriv = self.value(x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    if self.needs(x) {
                        acc(&mut grads[x.0], gy * &deriv);
                    }
                }
                Op::Concat { parts, axis } => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let mut offset = 0usize;
                    for part in parts {
                        let len = self.value(part).shape()[axis];
                        let slice = gy
                            .slice_axis(Axis(axis), Slice::from(offset..offset + len))
                            .as_standard_layout()
                            .into_owned();
                        if self.needs(part) {
                            acc(&mut grads[part.0], slice);
                        }
                        offset += len;
                    }
                }
                Op::SelectAxis1 { x, index } => {
                    let (x, index) = (*x, *index);
                    let mut gx = ArrayD::<f64>::zeros(self.value(x).raw_dim());
                    gx.index_axis_mut(Axis(1), index).assign(&gy);
                    if self.needs(x) {
                        acc(&mut grads[x.0], gx);
                    }
                }
                Op::FeatureLift { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("2-D");
                    let gy3 = gy.view().into_dimensionality::<Ix3>().expect("3-D");
                    let (batch, n, d) = gy3.dim();
                    if self.needs(w) {
                        let mut gw = ndarray::Array2::<f64>::zeros((n, d));
                        for i in 0..batch {
                            for j in 0..n {
                                for k in 0..d {
                                    gw[[j, k]] += xv[[i, j]] * gy3[[i, j, k]];
                                }
                            }
                        }
                        acc(&mut grads[w.0], gw.into_dyn());
                    }
                    if self.needs(b) {
                        acc(&mut grads[b.0], gy3.sum_axis(Axis(0)).into_dyn());
                    }
                    if self.needs(x) {
                        let wv = self.value(w).view().into_dimensionality::<Ix2>().expect("2-D");
                        let mut gx = ndarray::Array2::<f64>::zeros((batch, n));
                        for i in 0..batch {
                            for j in 0..n {
                                for k in 0..d {
                                    gx[[i, j]] += wv[[j, k]] * gy3[[i, j, k]];
                                }
                            }
                        }
                        acc(&mut grads[x.0], gx.into_dyn());
                    }
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let g = gy.iter().next().copied().expect("scalar");
                    let gx = ArrayD::from_elem(self.value(x).raw_dim(), g);
                    if self.needs(x) {
                        acc(&mut grads[x.0], gx);
                    }
                }
                Op::BceWithLogits { logits, targets, weights } => {
                    let logits = *logits;
                    let g = gy.iter().next().copied().expect("scalar");
                    let batch = targets.len() as f64;
                    let z = self.value(logits);
                    let gz: Vec<f64> = z
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((z_i, t_i), w_i)| g * w_i * (sigmoid(*z_i) - t_i) / batch)
                        .collect();
                    let gx = ArrayD::from_shape_vec(z.raw_dim(), gz).expect("shape matches");
                    if self.needs(logits) {
                        acc(&mut grads[logits.0], gx);
                    }
                }
            }
        }
        param_grads
    }
}

fn acc(slot: &mut Option<ArrayD<f64>>, delta: ArrayD<f64>) {
    match slot {
        None => *slot = Some(delta),
        Some(existing) => *existing += &delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{normal_init, ones, xavier_uniform, ParamStore};
    use crate::util::derive_rng;
    use approx::assert_relative_eq;
    use ndarray::arr1;

    /// Central-difference check of `build`'s loss against its own backward,
    /// perturbing every coordinate of every parameter.
    fn check_all_coords(store: &mut ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> NodeId) {
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        let grads = g.backward(loss);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let h = 1e-5;
        for name in names {
            let n = store.get(&name).unwrap().value.len();
            for idx in 0..n {
                let orig = store.get(&name).unwrap().value.as_slice().unwrap()[idx];
                store.get_mut(&name).unwrap().value.as_slice_mut().unwrap()[idx] = orig + h;
                let mut gp = Graph::new();
                let lp_id = build(&mut gp, store);
                let lp = gp.scalar_value(lp_id);
                store.get_mut(&name).unwrap().value.as_slice_mut().unwrap()[idx] = orig - h;
                let mut gm = Graph::new();
                let lm_id = build(&mut gm, store);
                let lm = gm.scalar_value(lm_id);
                store.get_mut(&name).unwrap().value.as_slice_mut().unwrap()[idx] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grads
                    .get(&name)
                    .map(|g| g.as_slice().unwrap()[idx])
                    .unwrap_or(0.0);
                let denom = (analytic.abs() + numeric.abs()).max(1e-8);
                let rel = (analytic - numeric).abs() / denom;
                assert!(
                    rel <= 1e-5,
                    "param {name}[{idx}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    fn weighted_scalar(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
        // Fixed pseudo-random weights turn any tensor into a scalar probe.
        let mut rng = derive_rng(seed, "probe-weights");
        let shape = g.value(x).raw_dim();
        let w = ArrayD::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0));
        let masked = g.mul_mask(x, w);
        g.sum_all(masked)
    }

    #[test]
    fn matmul_chain_gradients_match_finite_differences() {
        let mut rng = derive_rng(1, "g1");
        let mut store = ParamStore::new();
        store.add("w1", xavier_uniform(&mut rng, 4, 3)).unwrap();
        store.add("b1", normal_init(&mut rng, &[3], 0.5)).unwrap();
        store.add("w2", xavier_uniform(&mut rng, 3, 2)).unwrap();
        let x = normal_init(&mut rng, &[5, 4], 1.0);
        check_all_coords(&mut store, move |g, store| {
            let xin = g.input(x.clone());
            let w1 = g.param(store, "w1");
            let b1 = g.param(store, "b1");
            let w2 = g.param(store, "w2");
            let h = g.matmul2(xin, w1, false);
            let h = g.add_bias(h, b1);
            let h = g.gelu(h);
            let out = g.matmul2(h, w2, false);
            weighted_scalar(g, out, 11)
        });
    }

    #[test]
    fn softmax_layernorm_bmm_gradients_match_finite_differences() {
        let mut rng = derive_rng(2, "g2");
        let mut store = ParamStore::new();
        store.add("q", normal_init(&mut rng, &[2, 3, 4], 0.8)).unwrap();
        store.add("gamma", ones(&[4])).unwrap();
        store.add("beta", normal_init(&mut rng, &[4], 0.1)).unwrap();
        let kv = normal_init(&mut rng, &[2, 3, 4], 0.8);
        check_all_coords(&mut store, move |g, store| {
            let q = g.param(store, "q");
            let gamma = g.param(store, "gamma");
            let beta = g.param(store, "beta");
            let k = g.input(kv.clone());
            let q = g.layer_norm_last(q, gamma, beta, 1e-5);
            let kt = g.permute(k, &[0, 2, 1]);
            let scores = g.bmm(q, kt, false);
            let scores = g.scale(scores, 0.5);
            let probs = g.softmax_last(scores, false);
            let out = g.bmm(probs, k, false);
            weighted_scalar(g, out, 22)
        });
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let mut rng = derive_rng(3, "g3");
        let mut store = ParamStore::new();
        store.add("tok", normal_init(&mut rng, &[1, 4], 0.5)).unwrap();
        store.add("pos", normal_init(&mut rng, &[4, 4], 0.5)).unwrap();
        store.add("lift_w", normal_init(&mut rng, &[3, 4], 0.7)).unwrap();
        store.add("lift_b", normal_init(&mut rng, &[3, 4], 0.7)).unwrap();
        let x = normal_init(&mut rng, &[2, 3], 1.0);
        check_all_coords(&mut store, move |g, store| {
            let xin = g.input(x.clone());
            let w = g.param(store, "lift_w");
            let b = g.param(store, "lift_b");
            let tok = g.param(store, "tok");
            let pos = g.param(store, "pos");
            let tokens = g.feature_lift(xin, w, b); // (2, 3, 4)
            let cls = g.tile_batch(tok, 2); // (2, 1, 4)
            let seq = g.concat(&[cls, tokens], 1); // (2, 4, 4)
            let seq = g.add_broadcast_batch(seq, pos);
            let seq = g.relu(seq);
            let picked = g.select_axis1(seq, 0); // (2, 4)
            let flat = g.reshape(picked, &[8]);
            weighted_scalar(g, flat, 33)
        });
    }

    #[test]
    fn bce_gradients_match_finite_differences() {
        let mut rng = derive_rng(4, "g4");
        let mut store = ParamStore::new();
        store.add("w", xavier_uniform(&mut rng, 3, 1)).unwrap();
        let x = normal_init(&mut rng, &[6, 3], 1.0);
        let targets = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let weights = vec![1.2, 1.0, 1.0, 1.2, 1.0, 1.2];
        check_all_coords(&mut store, move |g, store| {
            let xin = g.input(x.clone());
            let w = g.param(store, "w");
            let z = g.matmul2(xin, w, false);
            let z = g.reshape(z, &[6]);
            g.bce_with_logits(z, &targets, &weights)
        });
    }

    #[test]
    fn bce_matches_hand_values() {
        // Single positive sample at logit 0 with weight 1.2: loss = 1.2 ln 2.
        let mut g = Graph::new();
        let z = g.input(arr1(&[0.0]).into_dyn());
        let loss = g.bce_with_logits(z, &[1.0], &[1.2]);
        assert_relative_eq!(g.scalar_value(loss), 1.2 * std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn canonical_and_fast_matmul_agree_closely() {
        let mut rng = derive_rng(5, "g5");
        let a = normal_init(&mut rng, &[6, 5], 1.0);
        let b = normal_init(&mut rng, &[5, 4], 1.0);
        let mut g = Graph::new();
        let an = g.input(a);
        let bn = g.input(b);
        let fast = g.matmul2(an, bn, false);
        let canon = g.matmul2(an, bn, true);
        for (x, y) in g.value(fast).iter().zip(g.value(canon).iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut rng = derive_rng(6, "g6");
        let x = normal_init(&mut rng, &[3, 7], 2.0);
        let mut g = Graph::new();
        let xn = g.input(x);
        let p = g.softmax_last(xn, true);
        for row in g.value(p).lanes(Axis(1)) {
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn dropout_scales_kept_entries_and_is_identity_at_zero() {
        let mut rng = derive_rng(7, "g7");
        let mut g = Graph::new();
        let x = g.input(ArrayD::from_elem(IxDyn(&[1000]), 1.0));
        let same = g.dropout(x, 0.0, &mut rng);
        assert_eq!(same, x, "p=0 adds no node");
        let dropped = g.dropout(x, 0.25, &mut rng);
        let v = g.value(dropped);
        let kept = v.iter().filter(|x| **x > 0.0).count();
        assert!(v.iter().all(|x| *x == 0.0 || (*x - 1.0 / 0.75).abs() < 1e-12));
        assert!((600..900).contains(&kept), "keep rate should be near 750/1000, got {kept}");
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        // y = w^T w (sum over a vector used twice): dy/dw = 2w.
        let mut store = ParamStore::new();
        store.add("w", arr1(&[1.5, -2.0, 0.5]).into_dyn()).unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&store, "w");
        let w2 = g.param(&store, "w");
        let w1m = g.reshape(w1, &[1, 3]);
        let w2m = g.reshape(w2, &[3, 1]);
        let y = g.matmul2(w1m, w2m, false);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        let gw = &grads["w"];
        assert_relative_eq!(gw[[0]], 3.0, epsilon = 1e-12);
        assert_relative_eq!(gw[[1]], -4.0, epsilon = 1e-12);
        assert_relative_eq!(gw[[2]], 1.0, epsilon = 1e-12);
    }
}
