//! Multimodal fusion: two parallel transformer-decoder stacks with dual
//! cross-attention (the primary strategy), four ablation strategies, and the
//! final three-layer MLP classifier.
//!
//! All attention here runs over the *batch-as-sequence* axis: a batch of B
//! per-sample embeddings `(B, D)` is treated as one sequence of B tokens, so
//! samples attend to each other. No positional encoding is added over that
//! axis, and every reduction on the fusion path is order-canonical, which
//! makes row-permutation equivariance hold bitwise.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::checkpoint::{CheckpointError, ModelCheckpoint};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{
    DecoderBlock, DecoderTaps, EncoderBlock, ForwardMode, LayerNorm, MlpHead, MultiHeadAttention,
};
use crate::nn::params::ParamStore;
use crate::util::derive_rng;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid fusion config: {}", problems.join("; "))]
    InvalidConfig { problems: Vec<String> },
    #[error("fusion input mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("checkpoint holds variant {got}, expected {expected}")]
    VariantMismatch { expected: FusionVariant, got: FusionVariant },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Fusion strategy. `DualDecoder` is the primary model; the other four are
/// ablation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    /// Two parallel decoder stacks with cross-attention into the opposite
    /// modality's encoder output, concatenated into an MLP.
    DualDecoder,
    /// Concatenate the two embeddings and classify with the MLP alone.
    Mlp,
    /// Concatenate, then run a transformer encoder over the batch sequence.
    Encoder,
    /// One decoder stack over the image tokens with keys/values from the
    /// tabular embeddings.
    Decoder,
    /// Per-modality transformer encoders joined by a single cross-attention.
    EncoderCross,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::DualDecoder,
        FusionVariant::Mlp,
        FusionVariant::Encoder,
        FusionVariant::Decoder,
        FusionVariant::EncoderCross,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionVariant::DualDecoder => "dual-decoder",
            FusionVariant::Mlp => "mlp",
            FusionVariant::Encoder => "encoder",
            FusionVariant::Decoder => "decoder",
            FusionVariant::EncoderCross => "encoder-cross",
        }
    }
}

impl std::fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FusionVariant::ALL
            .iter()
            .find(|v| v.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = FusionVariant::ALL.iter().map(|v| v.as_str()).collect();
                format!("unknown fusion variant `{s}` (expected one of: {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    /// Decoder/encoder stack depth L.
    pub layers: usize,
    pub heads: usize,
    /// Dropout inside attention blocks during training.
    pub dropout: f64,
    /// Shared embedding width D of both modality inputs.
    pub shared_dim: usize,
    /// Feed-forward hidden width inside each block.
    pub ff_hidden: usize,
    /// The two hidden widths of the three-layer MLP classifier.
    pub mlp_hidden: (usize, usize),
    pub classes: usize,
}

impl FusionConfig {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk(shared_dim: usize) -> Self {
        Self {
            variant: FusionVariant::DualDecoder,
            layers: 2,
            heads: 2,
            dropout: 0.1,
            shared_dim,
            ff_hidden: 2 * shared_dim,
            mlp_hidden: (128, 32),
            classes: 1,
        }
    }

    /// Full-scale configuration: eight-layer stacks, two heads, dropout 0.4.
    pub fn full_scale(shared_dim: usize) -> Self {
        Self {
            variant: FusionVariant::DualDecoder,
            layers: 8,
            heads: 2,
            dropout: 0.4,
            shared_dim,
            ff_hidden: 2 * shared_dim,
            mlp_hidden: (128, 32),
            classes: 1,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (field, value) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("shared_dim", self.shared_dim),
            ("ff_hidden", self.ff_hidden),
            ("classes", self.classes),
            ("mlp_hidden.0", self.mlp_hidden.0),
            ("mlp_hidden.1", self.mlp_hidden.1),
        ] {
            if value == 0 {
                problems.push(format!("{field} must be positive"));
            }
        }
        if self.heads > 0 && !self.shared_dim.is_multiple_of(self.heads) {
            problems.push(format!(
                "shared_dim {} not divisible by heads {}",
                self.shared_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        problems
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FusionError::InvalidConfig { problems })
        }
    }

    /// MLP input width: 2D for concatenating variants, D for single-stream
    /// variants.
    fn mlp_in(&self) -> usize {
        match self.variant {
            FusionVariant::DualDecoder | FusionVariant::Mlp | FusionVariant::Encoder => {
                2 * self.shared_dim
            }
            FusionVariant::Decoder | FusionVariant::EncoderCross => self.shared_dim,
        }
    }
}

// ---------------------------------------------------------------------------
// Batch
// ---------------------------------------------------------------------------

/// Paired per-sample embeddings from both modalities; row `i` of both arrays
/// belongs to the same sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBatch {
    pub z_image: Array2<f64>,
    pub z_tabular: Array2<f64>,
}

impl FusionBatch {
    pub fn new(z_image: Array2<f64>, z_tabular: Array2<f64>) -> Result<Self, FusionError> {
        if z_image.dim() != z_tabular.dim() {
            return Err(FusionError::ShapeMismatch {
                expected: format!("matching shapes, image is {:?}", z_image.dim()),
                got: format!("tabular is {:?}", z_tabular.dim()),
            });
        }
        if z_image.dim().0 == 0 {
            return Err(FusionError::ShapeMismatch {
                expected: "at least one row".to_string(),
                got: "empty batch".to_string(),
            });
        }
        Ok(Self { z_image, z_tabular })
    }

    pub fn batch_size(&self) -> usize {
        self.z_image.dim().0
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Node handles from one fusion forward pass, for loss attachment, embedding
/// export, and wiring tests.
pub struct FusionForward {
    /// `(B, classes)` logits.
    pub logits: NodeId,
    /// Dual-decoder only: the image stack's refined `(B, D)` output.
    pub image_refined: Option<NodeId>,
    /// Dual-decoder only: the tabular stack's refined `(B, D)` output.
    pub tabular_refined: Option<NodeId>,
    /// Dual-decoder only: elementwise mean of the two refined outputs,
    /// `(B, D)` — the fused embedding export tap.
    pub fused_mean: Option<NodeId>,
    /// Per-layer taps of the image-side decoder stack.
    pub image_taps: Vec<DecoderTaps>,
    /// Per-layer taps of the tabular-side decoder stack.
    pub tabular_taps: Vec<DecoderTaps>,
    /// The `(1, B, D)` node holding the image encoder output Z_I.
    pub z_image_node: NodeId,
    /// The `(1, B, D)` node holding the tabular encoder output Z_T.
    pub z_tabular_node: NodeId,
}

/// The fusion module. Parameters live under the `{name}.` prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub name: String,
    pub cfg: FusionConfig,
}

impl FusionModel {
    pub const CHECKPOINT_KIND: &'static str = "fusion";

    pub fn new(name: impl Into<String>, cfg: FusionConfig) -> Result<Self, FusionError> {
        cfg.validate()?;
        Ok(Self { name: name.into(), cfg })
    }

    fn decoder_block(&self, stack: &str, i: usize) -> DecoderBlock {
        DecoderBlock::new(
            format!("{}.{stack}.block{i}", self.name),
            self.cfg.shared_dim,
            self.cfg.heads,
            self.cfg.ff_hidden,
            self.cfg.dropout,
            true,
        )
    }

    fn encoder_block(&self, stack: &str, i: usize, d_model: usize) -> EncoderBlock {
        EncoderBlock::new(
            format!("{}.{stack}.block{i}", self.name),
            d_model,
            self.cfg.heads,
            self.cfg.ff_hidden,
            self.cfg.dropout,
            true,
        )
    }

    fn stack_norm(&self, stack: &str, d_model: usize) -> LayerNorm {
        LayerNorm::new(format!("{}.{stack}.ln_f", self.name), d_model)
    }

    fn cross_attention(&self) -> MultiHeadAttention {
        MultiHeadAttention::new(
            format!("{}.cross", self.name),
            self.cfg.shared_dim,
            self.cfg.heads,
            self.cfg.dropout,
            true,
        )
    }

    fn mlp(&self) -> MlpHead {
        let (h1, h2) = self.cfg.mlp_hidden;
        MlpHead::new(
            format!("{}.mlp", self.name),
            &[self.cfg.mlp_in(), h1, h2, self.cfg.classes],
            0.0,
            true,
        )
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let d = self.cfg.shared_dim;
        match self.cfg.variant {
            FusionVariant::DualDecoder => {
                for i in 0..self.cfg.layers {
                    self.decoder_block("img", i).register(store, rng);
                    self.decoder_block("tab", i).register(store, rng);
                }
                self.stack_norm("img", d).register(store);
                self.stack_norm("tab", d).register(store);
            }
            FusionVariant::Mlp => {}
            FusionVariant::Encoder => {
                for i in 0..self.cfg.layers {
                    self.encoder_block("enc", i, 2 * d).register(store, rng);
                }
                self.stack_norm("enc", 2 * d).register(store);
            }
            FusionVariant::Decoder => {
                for i in 0..self.cfg.layers {
                    self.decoder_block("img", i).register(store, rng);
                }
                self.stack_norm("img", d).register(store);
            }
            FusionVariant::EncoderCross => {
                for i in 0..self.cfg.layers {
                    self.encoder_block("img", i, d).register(store, rng);
                    self.encoder_block("tab", i, d).register(store, rng);
                }
                self.stack_norm("img", d).register(store);
                self.stack_norm("tab", d).register(store);
                self.cross_attention().register(store, rng);
            }
        }
        self.mlp().register(store, rng);
    }

    /// Runs the configured fusion strategy over one batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &FusionBatch,
        mode: &mut ForwardMode,
    ) -> Result<FusionForward, FusionError> {
        let zi_rows = g.input(batch.z_image.clone().into_dyn());
        let zt_rows = g.input(batch.z_tabular.clone().into_dyn());
        self.forward_from_rows(g, store, zi_rows, zt_rows, mode)
    }

    /// Like [`Self::forward`], but starts from `(B, D)` nodes already in the
    /// graph — e.g. the outputs of trainable shared-space projections — so
    /// gradients can flow through whatever produced them.
    pub fn forward_from_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        zi_rows: NodeId,
        zt_rows: NodeId,
        mode: &mut ForwardMode,
    ) -> Result<FusionForward, FusionError> {
        let (shape_i, shape_t) =
            (g.value(zi_rows).shape().to_vec(), g.value(zt_rows).shape().to_vec());
        if shape_i != shape_t || shape_i.len() != 2 {
            return Err(FusionError::ShapeMismatch {
                expected: format!("two (B, {}) inputs", self.cfg.shared_dim),
                got: format!("{shape_i:?} and {shape_t:?}"),
            });
        }
        let (b, d) = (shape_i[0], shape_i[1]);
        if d != self.cfg.shared_dim || b == 0 {
            return Err(FusionError::ShapeMismatch {
                expected: format!("(B >= 1, {})", self.cfg.shared_dim),
                got: format!("({b}, {d})"),
            });
        }
        // Batch-as-sequence layout: B samples become the tokens of one
        // sequence.
        let zi = g.reshape(zi_rows, &[1, b, d]);
        let zt = g.reshape(zt_rows, &[1, b, d]);

        let mut out = FusionForward {
            logits: zi, // placeholder until set below
            image_refined: None,
            tabular_refined: None,
            fused_mean: None,
            image_taps: Vec::new(),
            tabular_taps: Vec::new(),
            z_image_node: zi,
            z_tabular_node: zt,
        };

        let mlp_input = match self.cfg.variant {
            FusionVariant::DualDecoder => {
                let (mut xi, mut xt) = (zi, zt);
                for i in 0..self.cfg.layers {
                    // Keys/values always come from the opposite modality's
                    // encoder output, not the opposite stack's running state.
                    let tap_i = self.decoder_block("img", i).forward_probed(g, store, xi, zt, mode);
                    let tap_t = self.decoder_block("tab", i).forward_probed(g, store, xt, zi, mode);
                    xi = tap_i.out;
                    xt = tap_t.out;
                    out.image_taps.push(tap_i);
                    out.tabular_taps.push(tap_t);
                }
                xi = self.stack_norm("img", d).forward(g, store, xi);
                xt = self.stack_norm("tab", d).forward(g, store, xt);
                let ri = g.reshape(xi, &[b, d]);
                let rt = g.reshape(xt, &[b, d]);
                let summed = g.add(ri, rt);
                out.image_refined = Some(ri);
                out.tabular_refined = Some(rt);
                out.fused_mean = Some(g.scale(summed, 0.5));
                g.concat(&[ri, rt], 1)
            }
            FusionVariant::Mlp => g.concat(&[zi_rows, zt_rows], 1),
            FusionVariant::Encoder => {
                let cat = g.concat(&[zi_rows, zt_rows], 1);
                let mut x = g.reshape(cat, &[1, b, 2 * d]);
                for i in 0..self.cfg.layers {
                    x = self.encoder_block("enc", i, 2 * d).forward(g, store, x, mode);
                }
                let x = self.stack_norm("enc", 2 * d).forward(g, store, x);
                g.reshape(x, &[b, 2 * d])
            }
            FusionVariant::Decoder => {
                let mut xi = zi;
                for i in 0..self.cfg.layers {
                    let tap = self.decoder_block("img", i).forward_probed(g, store, xi, zt, mode);
                    xi = tap.out;
                    out.image_taps.push(tap);
                }
                let xi = self.stack_norm("img", d).forward(g, store, xi);
                g.reshape(xi, &[b, d])
            }
            FusionVariant::EncoderCross => {
                let (mut xi, mut xt) = (zi, zt);
                for i in 0..self.cfg.layers {
                    xi = self.encoder_block("img", i, d).forward(g, store, xi, mode);
                    xt = self.encoder_block("tab", i, d).forward(g, store, xt, mode);
                }
                let xi = self.stack_norm("img", d).forward(g, store, xi);
                let xt = self.stack_norm("tab", d).forward(g, store, xt);
                let fused = self.cross_attention().forward(g, store, xi, xt, mode);
                g.reshape(fused.out, &[b, d])
            }
        };
        out.logits = self.mlp().forward(g, store, mlp_input, mode);
        Ok(out)
    }

    /// Errors when this model's variant differs from `expected` (evaluation
    /// refuses mismatched checkpoints).
    pub fn expect_variant(&self, expected: FusionVariant) -> Result<(), FusionError> {
        if self.cfg.variant != expected {
            return Err(FusionError::VariantMismatch { expected, got: self.cfg.variant });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, store: &ParamStore, schema_hash: &str) -> ModelCheckpoint {
        let own = store.subset_prefix(&format!("{}.", self.name));
        ModelCheckpoint::new(Self::CHECKPOINT_KIND, self, schema_hash, own)
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<(Self, ParamStore), FusionError> {
        ckpt.expect_kind(Self::CHECKPOINT_KIND)?;
        let model: FusionModel = ckpt.config_as()?;
        model.cfg.validate()?;
        let mut expected = ParamStore::new();
        let mut rng = derive_rng(0, "checkpoint-shape-check");
        model.register(&mut expected, &mut rng);
        ckpt.validate_shapes(&expected)?;
        Ok((model, ckpt.store.clone()))
    }
}
