//! Modality-specific encoders: a patch-transformer image encoder and a
//! feature-tokenizer tabular encoder, each with a detachable classification
//! head for stage-1 training and an affine projection into the shared fusion
//! space.
//!
//! Both encoders are descriptors: construction validates the config,
//! `register` creates named parameters in a [`ParamStore`], and `forward`
//! appends ops to a [`Graph`]. All parameters of an encoder named `enc` live
//! under the `enc.` prefix; its stage-1 head lives under `enc_head.` so the
//! encoder can be checkpointed without it.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ImageTensor;
use crate::nn::checkpoint::{CheckpointError, ModelCheckpoint};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{EncoderBlock, ForwardMode, LayerNorm, Linear};
use crate::nn::params::{normal_init, ParamStore};
use crate::util::derive_rng;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {}", problems.join("; "))]
    InvalidConfig { problems: Vec<String> },
    #[error("input shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

// ---------------------------------------------------------------------------
// Shared-space embeddings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Image,
    Tabular,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Image => write!(f, "image"),
            Modality::Tabular => write!(f, "tabular"),
        }
    }
}

/// One sample's representation in the shared fusion space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEmbedding {
    pub vector: Array1<f64>,
    pub modality: Modality,
    pub shared_dim: usize,
}

impl ModalityEmbedding {
    pub fn new(
        vector: Array1<f64>,
        modality: Modality,
        shared_dim: usize,
    ) -> Result<Self, EncoderError> {
        if vector.len() != shared_dim {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("width {shared_dim}"),
                got: format!("width {}", vector.len()),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::ShapeMismatch {
                expected: "finite entries".to_string(),
                got: "non-finite entry".to_string(),
            });
        }
        Ok(Self { vector, modality, shared_dim })
    }
}

/// Splits a `(B, D)` activation into per-row embeddings, validating width
/// and finiteness.
pub fn embeddings_from_rows(
    rows: ArrayView2<'_, f64>,
    modality: Modality,
    shared_dim: usize,
) -> Result<Vec<ModalityEmbedding>, EncoderError> {
    rows.outer_iter()
        .map(|row| ModalityEmbedding::new(row.to_owned(), modality, shared_dim))
        .collect()
}

// ---------------------------------------------------------------------------
// Image encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Square patch edge in pixels.
    pub patch_size: usize,
    /// Token width D_I; also the output embedding width.
    pub hidden_dim: usize,
    /// Feed-forward hidden width inside each block.
    pub ff_hidden: usize,
    /// Dropout on the transformer path (attention probabilities and residual
    /// branches) during training.
    pub dropout_path: f64,
    /// Dropout in front of the classification head during training.
    pub dropout_head: f64,
    pub in_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl ImageEncoderConfig {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk(image_height: usize, image_width: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            patch_size: 16,
            hidden_dim: 64,
            ff_hidden: 128,
            dropout_path: 0.1,
            dropout_head: 0.1,
            in_channels: 1,
            image_height,
            image_width,
        }
    }

    /// Full-scale configuration: 12 layers, 6 heads, path/head dropout
    /// 0.3/0.2.
    pub fn full_scale(image_height: usize, image_width: usize) -> Self {
        Self {
            layers: 12,
            heads: 6,
            patch_size: 16,
            hidden_dim: 384,
            ff_hidden: 1536,
            dropout_path: 0.3,
            dropout_head: 0.2,
            in_channels: 1,
            image_height,
            image_width,
        }
    }

    /// Collects every violated constraint (empty = valid).
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (field, value) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("patch_size", self.patch_size),
            ("hidden_dim", self.hidden_dim),
            ("ff_hidden", self.ff_hidden),
            ("in_channels", self.in_channels),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
        ] {
            if value == 0 {
                problems.push(format!("{field} must be positive"));
            }
        }
        if self.patch_size > 0 {
            if !self.image_height.is_multiple_of(self.patch_size) {
                problems.push(format!(
                    "image_height {} not divisible by patch_size {}",
                    self.image_height, self.patch_size
                ));
            }
            if !self.image_width.is_multiple_of(self.patch_size) {
                problems.push(format!(
                    "image_width {} not divisible by patch_size {}",
                    self.image_width, self.patch_size
                ));
            }
        }
        if self.heads > 0 && !self.hidden_dim.is_multiple_of(self.heads) {
            problems.push(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        for (field, value) in [("dropout_path", self.dropout_path), ("dropout_head", self.dropout_head)]
        {
            if !(0.0..1.0).contains(&value) {
                problems.push(format!("{field} must be in [0, 1), got {value}"));
            }
        }
        problems
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EncoderError::InvalidConfig { problems })
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Patch tokens plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    /// Flattened pixel count of one patch.
    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

/// Patch-transformer image encoder: patchify, linear patch embedding, learned
/// position embeddings and class token, `layers` pre-norm blocks, final layer
/// norm, class-token readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub name: String,
    pub cfg: ImageEncoderConfig,
}

impl ImageEncoder {
    pub const CHECKPOINT_KIND: &'static str = "image-encoder";

    pub fn new(name: impl Into<String>, cfg: ImageEncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        Ok(Self { name: name.into(), cfg })
    }

    fn patch_embed(&self) -> Linear {
        Linear::new(format!("{}.patch", self.name), self.cfg.patch_dim(), self.cfg.hidden_dim, false)
    }

    fn block(&self, i: usize) -> EncoderBlock {
        EncoderBlock::new(
            format!("{}.block{i}", self.name),
            self.cfg.hidden_dim,
            self.cfg.heads,
            self.cfg.ff_hidden,
            self.cfg.dropout_path,
            false,
        )
    }

    fn final_norm(&self) -> LayerNorm {
        LayerNorm::new(format!("{}.ln_f", self.name), self.cfg.hidden_dim)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.patch_embed().register(store, rng);
        store
            .add(&format!("{}.cls", self.name), normal_init(rng, &[1, self.cfg.hidden_dim], 0.02))
            .expect("unique encoder name");
        store
            .add(
                &format!("{}.pos", self.name),
                normal_init(rng, &[self.cfg.n_tokens(), self.cfg.hidden_dim], 0.02),
            )
            .expect("unique encoder name");
        for i in 0..self.cfg.layers {
            self.block(i).register(store, rng);
        }
        self.final_norm().register(store);
    }

    /// Rearranges `(B, C, H, W)` pixels into `(B, n_patches, patch_dim)` rows,
    /// patches in raster order, pixels within a patch in `(c, dy, dx)` order.
    pub fn patchify(&self, images: &Array4<f64>) -> Result<Array3<f64>, EncoderError> {
        let (b, c, h, w) = images.dim();
        let cfg = &self.cfg;
        if c != cfg.in_channels || h != cfg.image_height || w != cfg.image_width {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("(B, {}, {}, {})", cfg.in_channels, cfg.image_height, cfg.image_width),
                got: format!("({b}, {c}, {h}, {w})"),
            });
        }
        let ps = cfg.patch_size;
        let (gh, gw) = (h / ps, w / ps);
        let mut out = Array3::<f64>::zeros((b, gh * gw, cfg.patch_dim()));
        for bi in 0..b {
            for py in 0..gh {
                for px in 0..gw {
                    let token = py * gw + px;
                    for ci in 0..c {
                        for dy in 0..ps {
                            for dx in 0..ps {
                                out[[bi, token, (ci * ps + dy) * ps + dx]] =
                                    images[[bi, ci, py * ps + dy, px * ps + dx]];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// `(B, C, H, W)` pixels -> `(B, hidden_dim)` class-token embeddings.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &Array4<f64>,
        mode: &mut ForwardMode,
    ) -> Result<NodeId, EncoderError> {
        Ok(self.forward_probed(g, store, images, mode)?.0)
    }

    /// Like [`Self::forward`] but also returns each block's attention
    /// probability node.
    pub fn forward_probed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &Array4<f64>,
        mode: &mut ForwardMode,
    ) -> Result<(NodeId, Vec<NodeId>), EncoderError> {
        let patches = self.patchify(images)?;
        let batch = patches.dim().0;
        let x = g.input(patches.into_dyn());
        let tokens = self.patch_embed().forward(g, store, x);
        let cls = g.param(store, &format!("{}.cls", self.name));
        let cls = g.tile_batch(cls, batch);
        let x = g.concat(&[cls, tokens], 1);
        let pos = g.param(store, &format!("{}.pos", self.name));
        let mut x = g.add_broadcast_batch(x, pos);
        let mut probs = Vec::with_capacity(self.cfg.layers);
        for i in 0..self.cfg.layers {
            let (out, p) = self.block(i).forward_probed(g, store, x, mode);
            x = out;
            probs.push(p);
        }
        let x = self.final_norm().forward(g, store, x);
        Ok((g.select_axis1(x, 0), probs))
    }

    /// Stage-1 classification head (`classes` logits) with this encoder's
    /// head dropout. Its parameters live under `{name}_head.`, outside the
    /// encoder's checkpoint prefix.
    pub fn head(&self, classes: usize) -> ClassifierHead {
        ClassifierHead::new(
            format!("{}_head", self.name),
            self.cfg.hidden_dim,
            classes,
            self.cfg.dropout_head,
        )
    }

    /// Bundles this encoder's parameters (only them) with its config echo.
    pub fn to_checkpoint(&self, store: &ParamStore, schema_hash: &str) -> ModelCheckpoint {
        let own = store.subset_prefix(&format!("{}.", self.name));
        ModelCheckpoint::new(Self::CHECKPOINT_KIND, self, schema_hash, own)
    }

    /// Reconstructs the encoder from a checkpoint, validating kind, config
    /// and parameter shapes.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<(Self, ParamStore), EncoderError> {
        ckpt.expect_kind(Self::CHECKPOINT_KIND)?;
        let enc: ImageEncoder = ckpt.config_as()?;
        enc.cfg.validate()?;
        let mut expected = ParamStore::new();
        let mut rng = derive_rng(0, "checkpoint-shape-check");
        enc.register(&mut expected, &mut rng);
        ckpt.validate_shapes(&expected)?;
        Ok((enc, ckpt.store.clone()))
    }
}

/// Stacks same-shaped image tensors into a `(B, C, H, W)` batch.
pub fn stack_images(images: &[&ImageTensor]) -> Result<Array4<f64>, EncoderError> {
    let Some(first) = images.first() else {
        return Err(EncoderError::ShapeMismatch {
            expected: "at least one image".to_string(),
            got: "empty batch".to_string(),
        });
    };
    let (c, h, w) = first.shape();
    let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
    for (bi, img) in images.iter().enumerate() {
        if img.shape() != (c, h, w) {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("({c}, {h}, {w})"),
                got: format!("{:?}", img.shape()),
            });
        }
        out.index_axis_mut(ndarray::Axis(0), bi).assign(&img.data);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tabular encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Width each scalar feature is lifted to.
    pub token_dim: usize,
    /// Output embedding width D_T.
    pub output_dim: usize,
    /// Feed-forward hidden width inside each block.
    pub ff_hidden: usize,
    /// Number of input features n.
    pub n_features: usize,
}

impl TabularEncoderConfig {
    /// Two layers, eight heads; small token width for CPU speed.
    pub fn desk(n_features: usize) -> Self {
        Self { layers: 2, heads: 8, token_dim: 16, output_dim: 64, ff_hidden: 32, n_features }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (field, value) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("token_dim", self.token_dim),
            ("output_dim", self.output_dim),
            ("ff_hidden", self.ff_hidden),
            ("n_features", self.n_features),
        ] {
            if value == 0 {
                problems.push(format!("{field} must be positive"));
            }
        }
        if self.heads > 0 && !self.token_dim.is_multiple_of(self.heads) {
            problems.push(format!(
                "token_dim {} not divisible by heads {}",
                self.token_dim, self.heads
            ));
        }
        problems
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EncoderError::InvalidConfig { problems })
        }
    }

    /// Width after flattening the `n_features × token_dim` token grid.
    pub fn flatten_width(&self) -> usize {
        self.n_features * self.token_dim
    }
}

/// Feature-tokenizer tabular encoder: each scalar feature becomes a token via
/// a learned per-feature affine lift plus a per-feature position embedding;
/// the token set runs through `layers` pre-norm blocks, is flattened, and is
/// mapped linearly to the output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoder {
    pub name: String,
    pub cfg: TabularEncoderConfig,
}

impl TabularEncoder {
    pub const CHECKPOINT_KIND: &'static str = "tabular-encoder";

    pub fn new(name: impl Into<String>, cfg: TabularEncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        Ok(Self { name: name.into(), cfg })
    }

    fn block(&self, i: usize) -> EncoderBlock {
        EncoderBlock::new(
            format!("{}.block{i}", self.name),
            self.cfg.token_dim,
            self.cfg.heads,
            self.cfg.ff_hidden,
            0.0,
            false,
        )
    }

    fn final_norm(&self) -> LayerNorm {
        LayerNorm::new(format!("{}.ln_f", self.name), self.cfg.token_dim)
    }

    fn out_map(&self) -> Linear {
        Linear::new(format!("{}.out", self.name), self.cfg.flatten_width(), self.cfg.output_dim, false)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let (n, d) = (self.cfg.n_features, self.cfg.token_dim);
        store
            .add(&format!("{}.lift.w", self.name), normal_init(rng, &[n, d], 0.2))
            .expect("unique encoder name");
        store
            .add(&format!("{}.lift.b", self.name), normal_init(rng, &[n, d], 0.02))
            .expect("unique encoder name");
        store
            .add(&format!("{}.pos", self.name), normal_init(rng, &[n, d], 0.02))
            .expect("unique encoder name");
        for i in 0..self.cfg.layers {
            self.block(i).register(store, rng);
        }
        self.final_norm().register(store);
        self.out_map().register(store, rng);
    }

    /// `(B, n_features)` numeric rows -> `(B, output_dim)` embeddings.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: &Array2<f64>,
        mode: &mut ForwardMode,
    ) -> Result<NodeId, EncoderError> {
        Ok(self.forward_probed(g, store, rows, mode)?.0)
    }

    pub fn forward_probed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: &Array2<f64>,
        mode: &mut ForwardMode,
    ) -> Result<(NodeId, Vec<NodeId>), EncoderError> {
        let (batch, n) = rows.dim();
        if n != self.cfg.n_features {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("(B, {})", self.cfg.n_features),
                got: format!("({batch}, {n})"),
            });
        }
        let x = g.input(rows.clone().into_dyn());
        let w = g.param(store, &format!("{}.lift.w", self.name));
        let b = g.param(store, &format!("{}.lift.b", self.name));
        let tokens = g.feature_lift(x, w, b);
        let pos = g.param(store, &format!("{}.pos", self.name));
        let mut x = g.add_broadcast_batch(tokens, pos);
        let mut probs = Vec::with_capacity(self.cfg.layers);
        for i in 0..self.cfg.layers {
            let (out, p) = self.block(i).forward_probed(g, store, x, mode);
            x = out;
            probs.push(p);
        }
        let x = self.final_norm().forward(g, store, x);
        let flat = g.reshape(x, &[batch, self.cfg.flatten_width()]);
        Ok((self.out_map().forward(g, store, flat), probs))
    }

    /// Stage-1 classification head; no head dropout on the tabular side.
    pub fn head(&self, classes: usize) -> ClassifierHead {
        ClassifierHead::new(format!("{}_head", self.name), self.cfg.output_dim, classes, 0.0)
    }

    pub fn to_checkpoint(&self, store: &ParamStore, schema_hash: &str) -> ModelCheckpoint {
        let own = store.subset_prefix(&format!("{}.", self.name));
        ModelCheckpoint::new(Self::CHECKPOINT_KIND, self, schema_hash, own)
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<(Self, ParamStore), EncoderError> {
        ckpt.expect_kind(Self::CHECKPOINT_KIND)?;
        let enc: TabularEncoder = ckpt.config_as()?;
        enc.cfg.validate()?;
        let mut expected = ParamStore::new();
        let mut rng = derive_rng(0, "checkpoint-shape-check");
        enc.register(&mut expected, &mut rng);
        ckpt.validate_shapes(&expected)?;
        Ok((enc, ckpt.store.clone()))
    }
}

// ---------------------------------------------------------------------------
// Classification head and shared-space projection
// ---------------------------------------------------------------------------

/// Linear classification head with optional input dropout; one logit when
/// `classes == 1` (sigmoid-compatible), otherwise `classes` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub name: String,
    pub in_dim: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl ClassifierHead {
    pub fn new(name: impl Into<String>, in_dim: usize, classes: usize, dropout: f64) -> Self {
        assert!(classes >= 1, "head needs at least one class");
        assert!(in_dim >= 1, "head needs a positive input width");
        Self { name: name.into(), in_dim, classes, dropout }
    }

    fn lin(&self) -> Linear {
        Linear::new(format!("{}.lin", self.name), self.in_dim, self.classes, false)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.lin().register(store, rng);
    }

    /// `(B, in_dim)` -> `(B, classes)` logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: NodeId,
        mode: &mut ForwardMode,
    ) -> NodeId {
        let z = mode.dropout(g, z, self.dropout);
        self.lin().forward(g, store, z)
    }
}

/// Learned affine map from an encoder's native width into the shared fusion
/// width D. `canonical` selects order-canonical reductions for bitwise row
/// permutation equivariance along the fusion path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedProjection {
    pub name: String,
    pub in_dim: usize,
    pub shared_dim: usize,
    pub canonical: bool,
}

impl SharedProjection {
    pub fn new(name: impl Into<String>, in_dim: usize, shared_dim: usize, canonical: bool) -> Self {
        assert!(in_dim >= 1 && shared_dim >= 1, "projection widths must be positive");
        Self { name: name.into(), in_dim, shared_dim, canonical }
    }

    fn lin(&self) -> Linear {
        Linear::new(self.name.clone(), self.in_dim, self.shared_dim, self.canonical)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.lin().register(store, rng);
    }

    /// `(B, in_dim)` -> `(B, shared_dim)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: NodeId) -> NodeId {
        self.lin().forward(g, store, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradients, GradCheckConfig};
    use crate::nn::graph::Graph;
    use crate::util::derive_rng;
    use ndarray::{Array2, Array4, Axis};

    fn toy_images(b: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = derive_rng(seed, "encoder-test-images");
        Array4::from_shape_fn((b, 1, h, w), |_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
    }

    fn toy_rows(b: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = derive_rng(seed, "encoder-test-rows");
        Array2::from_shape_fn((b, n), |_| rand::Rng::gen_range(&mut rng, -2.0..2.0))
    }

    #[test]
    fn image_encoder_token_count_and_output_shape() {
        let cfg = ImageEncoderConfig::desk(64, 64);
        assert_eq!(cfg.n_tokens(), 17, "16 patches plus the class token");
        let enc = ImageEncoder::new("img", cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = derive_rng(5, "img-init");
        enc.register(&mut store, &mut rng);

        let images = toy_images(3, 64, 64, 1);
        let mut g = Graph::new();
        let z = enc.forward(&mut g, &store, &images, &mut ForwardMode::Eval).unwrap();
        assert_eq!(g.value(z).shape(), &[3, 64]);

        // Wrong input geometry is rejected, not silently reshaped.
        let bad = toy_images(2, 32, 32, 2);
        let mut g = Graph::new();
        assert!(matches!(
            enc.forward(&mut g, &store, &bad, &mut ForwardMode::Eval),
            Err(EncoderError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn invalid_configs_report_every_problem() {
        let mut cfg = ImageEncoderConfig::desk(64, 64);
        cfg.image_height = 60; // not divisible by 16
        cfg.hidden_dim = 65; // not divisible by 4
        cfg.dropout_path = 1.5;
        let problems = cfg.problems();
        assert_eq!(problems.len(), 3, "all violations listed at once: {problems:?}");
        assert!(ImageEncoder::new("img", cfg).is_err());

        let mut tcfg = TabularEncoderConfig::desk(26);
        tcfg.token_dim = 12; // not divisible by 8
        tcfg.n_features = 0;
        assert_eq!(tcfg.problems().len(), 2);
    }

    #[test]
    fn image_eval_is_deterministic_and_train_dropout_varies() {
        let enc = ImageEncoder::new("img", ImageEncoderConfig::desk(32, 32)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = derive_rng(6, "img-init");
        enc.register(&mut store, &mut rng);
        let images = toy_images(2, 32, 32, 3);

        let run_eval = || {
            let mut g = Graph::new();
            let z = enc.forward(&mut g, &store, &images, &mut ForwardMode::Eval).unwrap();
            g.value(z).clone()
        };
        assert_eq!(run_eval(), run_eval(), "eval mode is bitwise reproducible");

        let run_train = |seed: u64| {
            let mut rng = derive_rng(seed, "img-dropout");
            let mut g = Graph::new();
            let mut mode = ForwardMode::Train { rng: &mut rng };
            let z = enc.forward(&mut g, &store, &images, &mut mode).unwrap();
            g.value(z).clone()
        };
        assert_ne!(run_train(1), run_train(2), "dropout_path > 0 varies with the RNG stream");
    }

    #[test]
    fn attention_rows_are_stochastic_in_both_encoders() {
        let enc = ImageEncoder::new("img", ImageEncoderConfig::desk(32, 32)).unwrap();
        let tab = TabularEncoder::new("tab", TabularEncoderConfig::desk(9)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = derive_rng(7, "stochastic-init");
        enc.register(&mut store, &mut rng);
        tab.register(&mut store, &mut rng);

        let mut g = Graph::new();
        let images = toy_images(2, 32, 32, 4);
        let (_, img_probs) =
            enc.forward_probed(&mut g, &store, &images, &mut ForwardMode::Eval).unwrap();
        let rows = toy_rows(2, 9, 5);
        let (_, tab_probs) =
            tab.forward_probed(&mut g, &store, &rows, &mut ForwardMode::Eval).unwrap();

        let all = img_probs.iter().chain(tab_probs.iter());
        let mut lanes = 0usize;
        for probs in all {
            let v = g.value(*probs);
            for lane in v.lanes(Axis(v.ndim() - 1)) {
                let sum: f64 = lane.sum();
                assert!((sum - 1.0).abs() < 1e-6, "attention row sums to {sum}");
                lanes += 1;
            }
        }
        assert!(lanes > 0);
    }

    #[test]
    fn tabular_flatten_width_matches_example_and_zero_input_is_finite() {
        let cfg = TabularEncoderConfig {
            layers: 2,
            heads: 8,
            token_dim: 32,
            output_dim: 64,
            ff_hidden: 64,
            n_features: 26,
        };
        assert_eq!(cfg.flatten_width(), 832);
        let enc = TabularEncoder::new("tab", cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = derive_rng(8, "tab-init");
        enc.register(&mut store, &mut rng);

        let zeros = Array2::<f64>::zeros((3, 26));
        let mut g = Graph::new();
        let z = enc.forward(&mut g, &store, &zeros, &mut ForwardMode::Eval).unwrap();
        assert_eq!(g.value(z).shape(), &[3, 64]);
        assert!(g.value(z).iter().all(|v| v.is_finite()), "all-zero input stays finite");

        // Width mismatch is rejected.
        let narrow = Array2::<f64>::zeros((3, 25));
        let mut g = Graph::new();
        assert!(enc.forward(&mut g, &store, &narrow, &mut ForwardMode::Eval).is_err());
    }

    #[test]
    fn permuting_features_with_their_lifts_and_positions_is_identity() {
        let cfg = TabularEncoderConfig {
            layers: 2,
            heads: 2,
            token_dim: 8,
            output_dim: 6,
            ff_hidden: 16,
            n_features: 5,
        };
        let enc = TabularEncoder::new("tab", cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = derive_rng(9, "perm-init");
        enc.register(&mut store, &mut rng);
        let rows = toy_rows(3, 5, 6);

        let run = |store: &ParamStore, rows: &Array2<f64>| {
            let mut g = Graph::new();
            let z = enc.forward(&mut g, store, rows, &mut ForwardMode::Eval).unwrap();
            g.value(z).clone()
        };
        let baseline = run(&store, &rows);

        // Swap features 1 and 3 together with their lift rows, position rows,
        // and the flatten map's corresponding input-row blocks.
        let (i, j) = (1usize, 3usize);
        let mut rows_p = rows.clone();
        for bi in 0..rows_p.dim().0 {
            rows_p.swap((bi, i), (bi, j));
        }
        let mut store_p = store.clone();
        for name in ["tab.lift.w", "tab.lift.b", "tab.pos"] {
            let value = &mut store_p.get_mut(name).unwrap().value;
            let d = value.shape()[1];
            for k in 0..d {
                value.swap([i, k], [j, k]);
            }
        }
        let td = enc.cfg.token_dim;
        let out_w = &mut store_p.get_mut("tab.out.w").unwrap().value;
        let width = out_w.shape()[1];
        for t in 0..td {
            for k in 0..width {
                out_w.swap([i * td + t, k], [j * td + t, k]);
            }
        }

        let permuted = run(&store_p, &rows_p);
        let max_diff = (&baseline - &permuted).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(max_diff < 1e-10, "relabeled features give the same embedding, diff {max_diff}");
    }

    #[test]
    fn heads_produce_single_logit_or_softmax_ready_classes() {
        let tab = TabularEncoder::new("tab", TabularEncoderConfig::desk(7)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = derive_rng(10, "head-init");
        tab.register(&mut store, &mut rng);
        let binary = tab.head(1);
        let multi = tab.head(6);
        // Heads share the `{encoder}_head` prefix, so each lives in its own
        // store next to the shared encoder weights.
        let mut store6 = store.clone();
        binary.register(&mut store, &mut rng);
        multi.register(&mut store6, &mut rng);

        let rows = toy_rows(4, 7, 11);
        let mut g = Graph::new();
        let z = tab.forward(&mut g, &store, &rows, &mut ForwardMode::Eval).unwrap();
        let logit = binary.forward(&mut g, &store, z, &mut ForwardMode::Eval);
        assert_eq!(g.value(logit).shape(), &[4, 1], "binary head emits one logit per sample");

        let mut g = Graph::new();
        let z = tab.forward(&mut g, &store6, &rows, &mut ForwardMode::Eval).unwrap();
        let logits = multi.forward(&mut g, &store6, z, &mut ForwardMode::Eval);
        assert_eq!(g.value(logits).shape(), &[4, 6]);
        let probs = g.softmax_last(logits, false);
        for lane in g.value(probs).lanes(Axis(1)) {
            assert!((lane.sum() - 1.0).abs() < 1e-9, "six-class probabilities sum to 1");
        }
    }

    #[test]
    fn projection_maps_to_shared_width_and_embeddings_validate() {
        let proj = SharedProjection::new("proj_img", 128, 64, false);
        let mut store = ParamStore::new();
        let mut rng = derive_rng(11, "proj-init");
        proj.register(&mut store, &mut rng);
        let z_val = toy_rows(2, 128, 12);
        let mut g = Graph::new();
        let z = g.input(z_val.into_dyn());
        let shared = proj.forward(&mut g, &store, z);
        assert_eq!(g.value(shared).shape(), &[2, 64]);

        let rows = g.value(shared).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let embs = embeddings_from_rows(rows, Modality::Image, 64).unwrap();
        assert_eq!(embs.len(), 2);
        assert!(embs.iter().all(|e| e.modality == Modality::Image && e.vector.len() == 64));

        // Wrong width and non-finite entries are rejected.
        assert!(ModalityEmbedding::new(Array1::zeros(3), Modality::Tabular, 4).is_err());
        let mut bad = Array1::zeros(4);
        bad[0] = f64::NAN;
        assert!(ModalityEmbedding::new(bad, Modality::Tabular, 4).is_err());
    }

    #[test]
    fn image_encoder_gradients_match_finite_differences() {
        let cfg = ImageEncoderConfig {
            layers: 2,
            heads: 2,
            patch_size: 8,
            hidden_dim: 8,
            ff_hidden: 16,
            dropout_path: 0.0,
            dropout_head: 0.0,
            in_channels: 1,
            image_height: 16,
            image_width: 16,
        };
        let enc = ImageEncoder::new("img", cfg).unwrap();
        let head = enc.head(1);
        let mut store = ParamStore::new();
        let mut rng = derive_rng(12, "img-gradcheck");
        enc.register(&mut store, &mut rng);
        head.register(&mut store, &mut rng);
        let images = toy_images(2, 16, 16, 13);
        let targets = [1.0, 0.0];
        let weights = [1.2, 1.0];

        let build = |g: &mut Graph, store: &ParamStore| {
            let z = enc.forward(g, store, &images, &mut ForwardMode::Eval).unwrap();
            let logits = head.forward(g, store, z, &mut ForwardMode::Eval);
            let flat = g.reshape(logits, &[2]);
            g.bce_with_logits(flat, &targets, &weights)
        };
        let mut g = Graph::new();
        let loss = build(&mut g, &store);
        let analytic = g.backward(loss);

        let cfg = GradCheckConfig { samples_per_param: 3, ..GradCheckConfig::default() };
        let mut check_rng = derive_rng(14, "img-gradcheck-sample");
        let report = check_gradients(
            &mut store,
            &analytic,
            |s| {
                let mut g = Graph::new();
                let loss = build(&mut g, s);
                g.scalar_value(loss)
            },
            &cfg,
            &mut check_rng,
        );
        assert!(
            report.max_rel_err <= 1e-3,
            "worst {} at {}: rel err {}",
            report.worst_param,
            report.worst_coord,
            report.max_rel_err
        );
    }

    #[test]
    fn tabular_encoder_gradients_match_finite_differences() {
        let cfg = TabularEncoderConfig {
            layers: 2,
            heads: 2,
            token_dim: 8,
            output_dim: 5,
            ff_hidden: 16,
            n_features: 4,
        };
        let enc = TabularEncoder::new("tab", cfg).unwrap();
        let head = enc.head(1);
        let mut store = ParamStore::new();
        let mut rng = derive_rng(15, "tab-gradcheck");
        enc.register(&mut store, &mut rng);
        head.register(&mut store, &mut rng);
        let rows = toy_rows(3, 4, 16);
        let targets = [1.0, 0.0, 1.0];
        let weights = [1.2, 1.0, 1.2];

        let build = |g: &mut Graph, store: &ParamStore| {
            let z = enc.forward(g, store, &rows, &mut ForwardMode::Eval).unwrap();
            let logits = head.forward(g, store, z, &mut ForwardMode::Eval);
            let flat = g.reshape(logits, &[3]);
            g.bce_with_logits(flat, &targets, &weights)
        };
        let mut g = Graph::new();
        let loss = build(&mut g, &store);
        let analytic = g.backward(loss);

        let cfg = GradCheckConfig { samples_per_param: 3, ..GradCheckConfig::default() };
        let mut check_rng = derive_rng(17, "tab-gradcheck-sample");
        let report = check_gradients(
            &mut store,
            &analytic,
            |s| {
                let mut g = Graph::new();
                let loss = build(&mut g, s);
                g.scalar_value(loss)
            },
            &cfg,
            &mut check_rng,
        );
        assert!(
            report.max_rel_err <= 1e-3,
            "worst {} at {}: rel err {}",
            report.worst_param,
            report.worst_coord,
            report.max_rel_err
        );
    }

    #[test]
    fn checkpoints_round_trip_and_reject_mismatches() {
        let enc = ImageEncoder::new("img", ImageEncoderConfig::desk(32, 32)).unwrap();
        let tab = TabularEncoder::new("tab", TabularEncoderConfig::desk(9)).unwrap();
        let head = enc.head(1);
        let mut store = ParamStore::new();
        let mut rng = derive_rng(18, "ckpt-init");
        enc.register(&mut store, &mut rng);
        tab.register(&mut store, &mut rng);
        head.register(&mut store, &mut rng);

        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("image.ckpt.json");
        let tab_path = dir.path().join("tabular.ckpt.json");
        enc.to_checkpoint(&store, "schema-xyz").save(&img_path).unwrap();
        tab.to_checkpoint(&store, "schema-xyz").save(&tab_path).unwrap();

        let loaded = ModelCheckpoint::load(&img_path).unwrap();
        assert_eq!(loaded.schema_hash, "schema-xyz");
        let (enc2, store2) = ImageEncoder::from_checkpoint(&loaded).unwrap();
        assert_eq!(enc2, enc, "config echo reconstructs the encoder");
        for (name, param) in store2.iter() {
            assert!(name.starts_with("img."), "head params stay out of the checkpoint: {name}");
            assert_eq!(store.get(name).unwrap().value, param.value, "weights survive bit-exactly");
        }

        // Same input works through the reloaded weights.
        let images = toy_images(2, 32, 32, 19);
        let run = |st: &ParamStore| {
            let mut g = Graph::new();
            let z = enc.forward(&mut g, st, &images, &mut ForwardMode::Eval).unwrap();
            g.value(z).clone()
        };
        // A store holding exactly the encoder's params must reproduce the
        // full-store forward bitwise.
        assert_eq!(run(&store), run(&store2));

        // Kind mismatch: an image checkpoint is not a tabular checkpoint.
        let tab_ckpt = ModelCheckpoint::load(&tab_path).unwrap();
        assert!(ImageEncoder::from_checkpoint(&tab_ckpt).is_err());

        // Shape mismatch: claim a different config than the stored tensors.
        let mut lying = loaded.clone();
        let wrong = ImageEncoder::new("img", ImageEncoderConfig::desk(64, 64)).unwrap();
        lying.config = serde_json::to_value(&wrong).unwrap();
        assert!(ImageEncoder::from_checkpoint(&lying).is_err());
    }
}
