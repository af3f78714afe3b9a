//! Reusable model building blocks: linear maps, layer norm, multi-head
//! attention, pre-norm transformer encoder/decoder blocks, and the final MLP
//! classifier head.
//!
//! Every layer is a thin descriptor: `register` adds its parameters to a
//! [`ParamStore`] under the layer's name prefix, and `forward` appends ops to
//! a [`Graph`]. Layers carry a `canonical` flag that selects order-canonical
//! reductions (see the graph module) — turned on wherever attention runs over
//! the batch-as-sequence axis so row permutation equivariance holds bitwise.

use rand_chacha::ChaCha8Rng;

use crate::nn::graph::{Graph, NodeId};
use crate::nn::params::{ones, xavier_uniform, zeros, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Whether a forward pass applies dropout (training) or is deterministic.
pub enum ForwardMode<'r> {
    Eval,
    Train { rng: &'r mut ChaCha8Rng },
}

impl ForwardMode<'_> {
    /// Applies dropout in training mode; identity in eval mode.
    pub fn dropout(&mut self, g: &mut Graph, x: NodeId, p: f64) -> NodeId {
        match self {
            ForwardMode::Eval => x,
            ForwardMode::Train { rng } => g.dropout(x, p, rng),
        }
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub n_in: usize,
    pub n_out: usize,
    pub canonical: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, n_in: usize, n_out: usize, canonical: bool) -> Self {
        Self { name: name.into(), n_in, n_out, canonical }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store
            .add(&format!("{}.w", self.name), xavier_uniform(rng, self.n_in, self.n_out))
            .expect("unique layer name");
        store.add(&format!("{}.b", self.name), zeros(&[self.n_out])).expect("unique layer name");
    }

    /// `x: (..., n_in) -> (..., n_out)`; leading axes are flattened for the
    /// matmul and restored afterwards.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        let (last, lead) = shape.split_last().expect("rank >= 1");
        assert_eq!(*last, self.n_in, "{}: input width mismatch", self.name);
        let rows: usize = lead.iter().product::<usize>().max(1);
        let w = g.param(store, &format!("{}.w", self.name));
        let b = g.param(store, &format!("{}.b", self.name));
        let flat = g.reshape(x, &[rows, self.n_in]);
        let out = g.matmul2(flat, w, self.canonical);
        let out = g.add_bias(out, b);
        let mut out_shape = lead.to_vec();
        out_shape.push(self.n_out);
        g.reshape(out, &out_shape)
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn register(&self, store: &mut ParamStore) {
        store.add(&format!("{}.gamma", self.name), ones(&[self.dim])).expect("unique layer name");
        store.add(&format!("{}.beta", self.name), zeros(&[self.dim])).expect("unique layer name");
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let gamma = g.param(store, &format!("{}.gamma", self.name));
        let beta = g.param(store, &format!("{}.beta", self.name));
        g.layer_norm_last(x, gamma, beta, LAYER_NORM_EPS)
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

/// Attention output plus the post-softmax probabilities for inspection.
pub struct AttnOut {
    pub out: NodeId,
    /// `(B * heads, T_query, T_key)` attention probabilities.
    pub probs: NodeId,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub d_model: usize,
    pub n_heads: usize,
    /// Dropout on attention probabilities during training.
    pub dropout: f64,
    pub canonical: bool,
}

impl MultiHeadAttention {
    pub fn new(
        name: impl Into<String>,
        d_model: usize,
        n_heads: usize,
        dropout: f64,
        canonical: bool,
    ) -> Self {
        let name = name.into();
        assert!(d_model.is_multiple_of(n_heads), "{name}: d_model must divide by heads");
        Self { name, d_model, n_heads, dropout, canonical }
    }

    fn proj(&self, which: &str) -> Linear {
        Linear::new(format!("{}.{which}", self.name), self.d_model, self.d_model, self.canonical)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for which in ["q", "k", "v", "o"] {
            self.proj(which).register(store, rng);
        }
    }

    /// Splits `(B, T, D)` into `(B * heads, T, D / heads)`.
    fn split_heads(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        let (b, t) = (shape[0], shape[1]);
        let dh = self.d_model / self.n_heads;
        let x = g.reshape(x, &[b, t, self.n_heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * self.n_heads, t, dh])
    }

    fn merge_heads(&self, g: &mut Graph, x: NodeId, b: usize) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        let t = shape[1];
        let dh = self.d_model / self.n_heads;
        let x = g.reshape(x, &[b, self.n_heads, t, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b, t, self.d_model])
    }

    /// `query: (B, Tq, D)`, `key_value: (B, Tk, D)` -> `(B, Tq, D)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: NodeId,
        key_value: NodeId,
        mode: &mut ForwardMode,
    ) -> AttnOut {
        let b = g.value(query).shape()[0];
        assert_eq!(g.value(key_value).shape()[0], b, "{}: batch mismatch", self.name);
        let q = self.proj("q").forward(g, store, query);
        let k = self.proj("k").forward(g, store, key_value);
        let v = self.proj("v").forward(g, store, key_value);
        let q = self.split_heads(g, q);
        let k = self.split_heads(g, k);
        let v = self.split_heads(g, v);
        let dh = self.d_model / self.n_heads;
        let kt = g.permute(k, &[0, 2, 1]);
        let scores = g.bmm(q, kt, self.canonical);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax_last(scores, self.canonical);
        let attended = mode.dropout(g, probs, self.dropout);
        let ctx = g.bmm(attended, v, self.canonical);
        let merged = self.merge_heads(g, ctx, b);
        let out = self.proj("o").forward(g, store, merged);
        AttnOut { out, probs }
    }
}

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub name: String,
    pub d_model: usize,
    pub d_hidden: usize,
    pub canonical: bool,
}

impl FeedForward {
    pub fn new(name: impl Into<String>, d_model: usize, d_hidden: usize, canonical: bool) -> Self {
        Self { name: name.into(), d_model, d_hidden, canonical }
    }

    fn lin1(&self) -> Linear {
        Linear::new(format!("{}.lin1", self.name), self.d_model, self.d_hidden, self.canonical)
    }

    fn lin2(&self) -> Linear {
        Linear::new(format!("{}.lin2", self.name), self.d_hidden, self.d_model, self.canonical)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.lin1().register(store, rng);
        self.lin2().register(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.lin1().forward(g, store, x);
        let h = g.gelu(h);
        self.lin2().forward(g, store, h)
    }
}

// ---------------------------------------------------------------------------
// Transformer blocks (pre-norm)
// ---------------------------------------------------------------------------

/// Pre-norm encoder block: `x + Drop(SA(LN1(x)))`, then `x + Drop(FFN(LN2(x)))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub name: String,
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    /// Dropout on each residual branch during training.
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new(
        name: impl Into<String>,
        d_model: usize,
        n_heads: usize,
        d_hidden: usize,
        dropout: f64,
        canonical: bool,
    ) -> Self {
        let name = name.into();
        Self {
            attn: MultiHeadAttention::new(format!("{name}.attn"), d_model, n_heads, dropout, canonical),
            ff: FeedForward::new(format!("{name}.ff"), d_model, d_hidden, canonical),
            ln1: LayerNorm::new(format!("{name}.ln1"), d_model),
            ln2: LayerNorm::new(format!("{name}.ln2"), d_model),
            dropout,
            name,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.attn.register(store, rng);
        self.ff.register(store, rng);
        self.ln1.register(store);
        self.ln2.register(store);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mode: &mut ForwardMode,
    ) -> NodeId {
        self.forward_probed(g, store, x, mode).0
    }

    /// Like [`Self::forward`] but also returns the node holding this block's
    /// post-softmax attention probabilities, for inspection in tests.
    pub fn forward_probed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mode: &mut ForwardMode,
    ) -> (NodeId, NodeId) {
        let normed = self.ln1.forward(g, store, x);
        let attn = self.attn.forward(g, store, normed, normed, mode);
        let branch = mode.dropout(g, attn.out, self.dropout);
        let x = g.add(x, branch);
        let normed = self.ln2.forward(g, store, x);
        let ff = self.ff.forward(g, store, normed);
        let branch = mode.dropout(g, ff, self.dropout);
        (g.add(x, branch), attn.probs)
    }
}

/// Pre-norm decoder block with dual attention: self-attention over the
/// stack's own state, then cross-attention whose queries come from the
/// self-attention output while keys/values come from `memory` — an input
/// that is *not* part of this stack (the opposite modality's encoder
/// output), then feed-forward. Each sub-layer is residual.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub name: String,
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
    pub dropout: f64,
}

impl DecoderBlock {
    pub fn new(
        name: impl Into<String>,
        d_model: usize,
        n_heads: usize,
        d_hidden: usize,
        dropout: f64,
        canonical: bool,
    ) -> Self {
        let name = name.into();
        Self {
            self_attn: MultiHeadAttention::new(
                format!("{name}.self_attn"),
                d_model,
                n_heads,
                dropout,
                canonical,
            ),
            cross_attn: MultiHeadAttention::new(
                format!("{name}.cross_attn"),
                d_model,
                n_heads,
                dropout,
                canonical,
            ),
            ff: FeedForward::new(format!("{name}.ff"), d_model, d_hidden, canonical),
            ln1: LayerNorm::new(format!("{name}.ln1"), d_model),
            ln2: LayerNorm::new(format!("{name}.ln2"), d_model),
            ln3: LayerNorm::new(format!("{name}.ln3"), d_model),
            dropout,
            name,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.self_attn.register(store, rng);
        self.cross_attn.register(store, rng);
        self.ff.register(store, rng);
        self.ln1.register(store);
        self.ln2.register(store);
        self.ln3.register(store);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        memory: NodeId,
        mode: &mut ForwardMode,
    ) -> NodeId {
        self.forward_probed(g, store, x, memory, mode).out
    }

    /// Like [`Self::forward`] but exposes the attention probability nodes and
    /// the memory node the cross-attention actually consumed, so wiring tests
    /// can verify where keys/values come from.
    pub fn forward_probed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        memory: NodeId,
        mode: &mut ForwardMode,
    ) -> DecoderTaps {
        let normed = self.ln1.forward(g, store, x);
        let sa = self.self_attn.forward(g, store, normed, normed, mode);
        let branch = mode.dropout(g, sa.out, self.dropout);
        let x = g.add(x, branch);

        let normed = self.ln2.forward(g, store, x);
        let ca = self.cross_attn.forward(g, store, normed, memory, mode);
        let branch = mode.dropout(g, ca.out, self.dropout);
        let x = g.add(x, branch);

        let normed = self.ln3.forward(g, store, x);
        let ff = self.ff.forward(g, store, normed);
        let branch = mode.dropout(g, ff, self.dropout);
        DecoderTaps {
            out: g.add(x, branch),
            self_probs: sa.probs,
            cross_probs: ca.probs,
            cross_memory: memory,
        }
    }
}

/// Inspection handles from one decoder block forward pass.
pub struct DecoderTaps {
    pub out: NodeId,
    pub self_probs: NodeId,
    pub cross_probs: NodeId,
    /// The node cross-attention took keys/values from.
    pub cross_memory: NodeId,
}

// ---------------------------------------------------------------------------
// MLP classifier head
// ---------------------------------------------------------------------------

/// Fully connected stack `widths[0] -> ... -> widths.last()` with ReLU
/// between layers (none after the last) and optional input dropout.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub name: String,
    pub widths: Vec<usize>,
    pub input_dropout: f64,
    pub canonical: bool,
}

impl MlpHead {
    pub fn new(name: impl Into<String>, widths: &[usize], input_dropout: f64, canonical: bool) -> Self {
        assert!(widths.len() >= 2, "head needs input and output widths");
        Self { name: name.into(), widths: widths.to_vec(), input_dropout, canonical }
    }

    fn layer(&self, i: usize) -> Linear {
        Linear::new(
            format!("{}.lin{i}", self.name),
            self.widths[i],
            self.widths[i + 1],
            self.canonical,
        )
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for i in 0..self.widths.len() - 1 {
            self.layer(i).register(store, rng);
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mode: &mut ForwardMode,
    ) -> NodeId {
        let mut h = mode.dropout(g, x, self.input_dropout);
        let n_layers = self.widths.len() - 1;
        for i in 0..n_layers {
            h = self.layer(i).forward(g, store, h);
            if i + 1 < n_layers {
                h = g.relu(h);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::normal_init;
    use crate::util::derive_rng;
    use approx::assert_relative_eq;
    use ndarray::Axis;

    #[test]
    fn attention_probabilities_are_row_stochastic() {
        let mut rng = derive_rng(11, "layers-attn");
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new("attn", 8, 2, 0.0, false);
        attn.register(&mut store, &mut rng);
        let mut g = Graph::new();
        let x = g.input(normal_init(&mut rng, &[3, 5, 8], 1.0));
        let out = attn.forward(&mut g, &store, x, x, &mut ForwardMode::Eval);
        assert_eq!(g.value(out.out).shape(), &[3, 5, 8]);
        let probs = g.value(out.probs);
        assert_eq!(probs.shape(), &[6, 5, 5]);
        for row in probs.lanes(Axis(2)) {
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_attention_output_shape_follows_query() {
        let mut rng = derive_rng(12, "layers-cross");
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new("attn", 6, 3, 0.0, false);
        attn.register(&mut store, &mut rng);
        let mut g = Graph::new();
        let q = g.input(normal_init(&mut rng, &[2, 4, 6], 1.0));
        let kv = g.input(normal_init(&mut rng, &[2, 9, 6], 1.0));
        let out = attn.forward(&mut g, &store, q, kv, &mut ForwardMode::Eval);
        assert_eq!(g.value(out.out).shape(), &[2, 4, 6]);
        assert_eq!(g.value(out.probs).shape(), &[6, 4, 9]);
    }

    #[test]
    fn encoder_and_decoder_blocks_preserve_shape_and_are_deterministic_in_eval() {
        let mut rng = derive_rng(13, "layers-blocks");
        let mut store = ParamStore::new();
        let enc = EncoderBlock::new("enc", 8, 2, 16, 0.3, false);
        let dec = DecoderBlock::new("dec", 8, 2, 16, 0.3, false);
        enc.register(&mut store, &mut rng);
        dec.register(&mut store, &mut rng);
        let x_val = normal_init(&mut rng, &[2, 3, 8], 1.0);
        let mem_val = normal_init(&mut rng, &[2, 5, 8], 1.0);

        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let x = g.input(x_val.clone());
            let mem = g.input(mem_val.clone());
            let e = enc.forward(&mut g, store, x, &mut ForwardMode::Eval);
            let d = dec.forward(&mut g, store, e, mem, &mut ForwardMode::Eval);
            (g.value(e).clone(), g.value(d).clone())
        };
        let (e1, d1) = run(&store);
        let (e2, d2) = run(&store);
        assert_eq!(e1.shape(), &[2, 3, 8]);
        assert_eq!(d1.shape(), &[2, 3, 8]);
        assert_eq!(e1, e2, "eval mode is deterministic");
        assert_eq!(d1, d2, "eval mode is deterministic");
    }

    #[test]
    fn mlp_head_maps_widths_and_gradcheck_passes_spot_check() {
        let mut rng = derive_rng(14, "layers-mlp");
        let mut store = ParamStore::new();
        let head = MlpHead::new("head", &[10, 7, 3, 1], 0.0, false);
        head.register(&mut store, &mut rng);
        let x_val = normal_init(&mut rng, &[4, 10], 1.0);

        let build = |g: &mut Graph, store: &ParamStore| {
            let x = g.input(x_val.clone());
            let z = head.forward(g, store, x, &mut ForwardMode::Eval);
            let flat = g.reshape(z, &[4]);
            g.bce_with_logits(flat, &[1.0, 0.0, 1.0, 0.0], &[1.2, 1.0, 1.2, 1.0])
        };
        let mut g = Graph::new();
        let loss = build(&mut g, &store);
        assert_eq!(g.value(loss).len(), 1);
        let grads = g.backward(loss);

        // Spot-check one coordinate against central differences.
        let name = "head.lin0.w";
        let h = 1e-5;
        let orig = store.get(name).unwrap().value.as_slice().unwrap()[3];
        store.get_mut(name).unwrap().value.as_slice_mut().unwrap()[3] = orig + h;
        let mut gp = Graph::new();
        let lp_id = build(&mut gp, &store);
        let lp = gp.scalar_value(lp_id);
        store.get_mut(name).unwrap().value.as_slice_mut().unwrap()[3] = orig - h;
        let mut gm = Graph::new();
        let lm_id = build(&mut gm, &store);
        let lm = gm.scalar_value(lm_id);
        store.get_mut(name).unwrap().value.as_slice_mut().unwrap()[3] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grads[name].as_slice().unwrap()[3];
        assert_relative_eq!(analytic, numeric, max_relative = 1e-6, epsilon = 1e-10);
    }

    #[test]
    fn canonical_blocks_are_bitwise_row_permutation_equivariant() {
        // Batch-as-sequence: one graph-batch of B tokens; permuting the token
        // rows must permute outputs with identical bits.
        let mut rng = derive_rng(15, "layers-perm");
        let mut store = ParamStore::new();
        let enc = EncoderBlock::new("enc", 8, 2, 16, 0.0, true);
        enc.register(&mut store, &mut rng);
        let x_val = normal_init(&mut rng, &[1, 5, 8], 1.0);
        let perm = [3usize, 0, 4, 1, 2];

        let mut permuted = x_val.clone();
        for (to, from) in perm.iter().enumerate() {
            permuted
                .index_axis_mut(Axis(1), to)
                .assign(&x_val.index_axis(Axis(1), *from));
        }

        let run = |val: &ndarray::ArrayD<f64>| {
            let mut g = Graph::new();
            let x = g.input(val.clone());
            let out = enc.forward(&mut g, &store, x, &mut ForwardMode::Eval);
            g.value(out).clone()
        };
        let base = run(&x_val);
        let shuffled = run(&permuted);
        for (to, from) in perm.iter().enumerate() {
            let a = base.index_axis(Axis(1), *from);
            let b = shuffled.index_axis(Axis(1), to);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "bitwise equivariance violated");
            }
        }
    }
}
