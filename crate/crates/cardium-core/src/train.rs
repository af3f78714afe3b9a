//! Staged training with class-imbalance machinery: weighted random sampling,
//! a positive-class loss factor, hard positive mining, and the fusion stage
//! that trains projections + fusion on top of frozen encoders.
//!
//! The three stages share one deterministic loop ([`run_training_loop`]):
//! a stratified validation split is carved from the inputs, every epoch draws
//! `n_train` samples with replacement from the sampler, batches are optimized
//! with AdamW, and the per-epoch training loss and validation F1 are recorded.
//! Everything is a pure function of `(seed, config, data)`.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ImageTensor;
use crate::encoders::{
    stack_images, ClassifierHead, EncoderError, ImageEncoder, SharedProjection, TabularEncoder,
};
use crate::fusion::{FusionError, FusionForward, FusionModel};
use crate::nn::checkpoint::{CheckpointError, ModelCheckpoint};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::ForwardMode;
use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::params::ParamStore;
use crate::util::derive_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {}", problems.join("; "))]
    InvalidConfig { problems: Vec<String> },
    #[error("training labels all belong to class {class}; need both classes")]
    SingleClass { class: u8 },
    #[error("no training samples")]
    EmptyTrainingSet,
    #[error("labels/sample count mismatch: {labels} labels for {samples} samples")]
    LabelMismatch { labels: usize, samples: usize },
    #[error(
        "non-finite loss ({value}) in {stage} stage at epoch {epoch}, batch {batch}; \
         lower the learning rate or inspect the inputs"
    )]
    NonFiniteLoss { stage: Stage, epoch: usize, batch: usize, value: f64 },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Image,
    Tabular,
    Fusion,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Image, Stage::Tabular, Stage::Fusion];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Image => "image",
            Stage::Tabular => "tabular",
            Stage::Fusion => "fusion",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.iter().find(|v| v.as_str() == s).copied().ok_or_else(|| {
            format!("unknown stage `{s}` (expected one of: image, tabular, fusion)")
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    None,
    WeightedRandom,
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerMode::None => "none",
            SamplerMode::WeightedRandom => "weighted-random",
        })
    }
}

impl std::str::FromStr for SamplerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(SamplerMode::None),
            "weighted-random" => Ok(SamplerMode::WeightedRandom),
            other => Err(format!("unknown sampler `{other}` (expected none or weighted-random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Multiplier on positive-class loss terms.
    pub pos_loss_factor: f64,
    pub sampler: SamplerMode,
    /// Hard-positive mining runs every this many epochs (tabular stage only).
    pub hard_mining_period: usize,
    /// Weight multiplier per mining event for misclassified positives.
    pub mining_boost: f64,
    /// Mining never raises a weight beyond this multiple of its base value.
    pub mining_cap: f64,
    /// Fraction of the training samples carved into a stratified validation
    /// split for the history's F1 signal.
    pub val_fraction: f64,
    /// Seed-driven image augmentation (image stage only).
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Small CPU-friendly defaults. The fusion stage keeps its 100-epoch
    /// budget; callers running tiny experiments usually lower `epochs`.
    pub fn desk(stage: Stage) -> Self {
        Self {
            stage,
            epochs: match stage {
                Stage::Image | Stage::Tabular => 50,
                Stage::Fusion => 100,
            },
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            pos_loss_factor: 1.2,
            sampler: SamplerMode::WeightedRandom,
            hard_mining_period: 20,
            mining_boost: 2.0,
            mining_cap: 32.0,
            val_fraction: 0.1,
            augment: false,
            seed: 42,
        }
    }

    /// The full-scale fusion schedule: 100 epochs at learning rate 5e-7.
    pub fn paper_preset(stage: Stage) -> Self {
        Self { learning_rate: 5e-7, epochs: 100, ..Self::desk(stage) }
    }

    // NaN must fail these bounds too, so keep the negated comparisons.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".to_string());
        }
        if !(self.pos_loss_factor > 0.0) {
            problems.push(format!("pos_loss_factor must be > 0, got {}", self.pos_loss_factor));
        }
        if self.hard_mining_period == 0 {
            problems.push("hard_mining_period must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0) {
            problems.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if !(self.mining_boost >= 1.0) {
            problems.push(format!("mining_boost must be >= 1, got {}", self.mining_boost));
        }
        if !(self.mining_cap >= 1.0) {
            problems.push(format!("mining_cap must be >= 1, got {}", self.mining_cap));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            problems.push(format!("val_fraction must be in [0, 0.5], got {}", self.val_fraction));
        }
        problems
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig { problems })
        }
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }
}

// ---------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------

/// With-replacement sampler; each sample is drawn with probability
/// proportional to its current weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    labels: Vec<u8>,
    base: Vec<f64>,
    weights: Vec<f64>,
    pub class_counts: [usize; 2],
}

/// Builds the sampler for one training split. `weighted-random` gives every
/// sample the weight `1 / (count of its class)`, so both classes are drawn
/// equally often in expectation; `none` gives uniform weights.
pub fn build_sampler(labels: &[u8], mode: SamplerMode) -> Result<SamplerState, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut class_counts = [0usize; 2];
    for &label in labels {
        class_counts[usize::from(label)] += 1;
    }
    if class_counts[0] == 0 || class_counts[1] == 0 {
        return Err(TrainError::SingleClass { class: if class_counts[0] == 0 { 1 } else { 0 } });
    }
    let base: Vec<f64> = match mode {
        SamplerMode::None => vec![1.0; labels.len()],
        SamplerMode::WeightedRandom => labels
            .iter()
            .map(|&label| 1.0 / class_counts[usize::from(label)] as f64)
            .collect(),
    };
    Ok(SamplerState { labels: labels.to_vec(), weights: base.clone(), base, class_counts })
}

impl SamplerState {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Draws `n` sample indices with replacement, probability ∝ weight.
    pub fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let dist = WeightedIndex::new(&self.weights).expect("weights positive by construction");
        (0..n).map(|_| dist.sample(rng)).collect()
    }
}

/// Multiplies the sampler weight of every *hard positive* — a positive sample
/// whose predicted probability fell below 0.5 — by `boost`, capped at
/// `cap` times the sample's base weight. All other weights are untouched.
/// Returns how many weights changed.
pub fn mine_hard_positives(
    state: &mut SamplerState,
    probs: &[f64],
    boost: f64,
    cap: f64,
) -> usize {
    assert_eq!(probs.len(), state.labels.len(), "one probability per training sample");
    let mut boosted = 0;
    let rows = state.labels.iter().zip(probs).zip(&state.base).zip(&mut state.weights);
    for (((&label, &p), &base), weight) in rows {
        if label == 1 && p < 0.5 {
            let raised = (*weight * boost).min(base * cap);
            if raised > *weight {
                *weight = raised;
                boosted += 1;
            }
        }
    }
    boosted
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Per-sample loss weights: `pos_factor` for positives, 1 for negatives.
pub fn bce_sample_weights(labels: &[u8], pos_factor: f64) -> Vec<f64> {
    labels.iter().map(|&y| if y == 1 { pos_factor } else { 1.0 }).collect()
}

/// Mean over the batch of per-sample binary cross-entropy terms, with each
/// positive-label term multiplied by `pos_factor`.
pub fn weighted_bce(
    g: &mut Graph,
    logits: NodeId,
    labels: &[u8],
    pos_factor: f64,
) -> NodeId {
    let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    let weights = bce_sample_weights(labels, pos_factor);
    g.bce_with_logits(logits, &targets, &weights)
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// F1 on the validation carve-out at threshold 0.5; 0 when undefined
    /// (empty split or no predicted/actual positives).
    pub val_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    pub fn best_val_f1(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_f1).fold(None, |acc, v| match acc {
            Some(best) if best >= v => Some(best),
            _ => Some(v),
        })
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_f1"])?;
        for r in &self.records {
            w.write_record(&[r.epoch.to_string(), r.train_loss.to_string(), r.val_f1.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Image augmentation (off by default)
// ---------------------------------------------------------------------------

/// Conservative seed-driven augmentation: horizontal flip with probability
/// 1/2, rotation by a uniform angle in ±10°, and additive brightness jitter
/// in ±0.1, clamped back into [0, 1].
pub fn augment_image(image: &ImageTensor, rng: &mut ChaCha8Rng) -> ImageTensor {
    let (c, h, w) = image.shape();
    let flip = rng.gen_bool(0.5);
    let angle_deg: f64 = rng.gen_range(-10.0..10.0);
    let brightness: f64 = rng.gen_range(-0.1..0.1);

    let angle = angle_deg.to_radians();
    let (sin, cos) = angle.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);

    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        let plane = image.data.index_axis(Axis(0), ch);
        for y in 0..h {
            for x in 0..w {
                let xs = if flip { (w - 1 - x) as f64 } else { x as f64 };
                // Inverse-map the output pixel into the source image.
                let dy = y as f64 - cy;
                let dx = xs - cx;
                let sy = cy + dy * cos - dx * sin;
                let sx = cx + dy * sin + dx * cos;
                let value = bilinear_sample(&plane, sy, sx);
                out[[ch, y, x]] = (value + brightness).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(out).expect("augmented pixels clamped into range")
}

fn bilinear_sample(plane: &ndarray::ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = plane.dim();
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return 0.0;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
    let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

// ---------------------------------------------------------------------------
// Validation split
// ---------------------------------------------------------------------------

/// Deterministic stratified carve-out: per class, `val_fraction` of the
/// samples (rounded, at least 1 and at most all-but-one when the class has
/// two or more members) move to the validation split.
pub fn split_train_val(labels: &[u8], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = derive_rng(seed, "val-split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        // Deterministic shuffle within the class.
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        let n = members.len();
        let take = if n >= 2 && val_fraction > 0.0 {
            ((val_fraction * n as f64).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        val.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

// ---------------------------------------------------------------------------
// Stage model abstraction
// ---------------------------------------------------------------------------

/// One trainable stage: how to build the loss for a batch of sample indices
/// and how to score samples in eval mode.
trait StageModel {
    fn n_samples(&self) -> usize;
    fn labels(&self) -> &[u8];

    /// Builds the loss node for the given samples. `aug_rng` is `Some` when
    /// augmentation applies (training batches of the image stage).
    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        idx: &[usize],
        mode: &mut ForwardMode,
        pos_factor: f64,
        aug_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, TrainError>;

    /// Eval-mode positive-class probabilities for the given samples.
    fn probs(&self, store: &ParamStore, idx: &[usize]) -> Result<Vec<f64>, TrainError> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(64) {
            let mut g = Graph::new();
            let logits = self.batch_logits(&mut g, store, chunk, &mut ForwardMode::Eval)?;
            let values = g.value(logits);
            out.extend(values.iter().map(|&z| crate::util::sigmoid(z)));
        }
        Ok(out)
    }

    /// Builds `(B, 1)` logits for the given samples.
    fn batch_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        idx: &[usize],
        mode: &mut ForwardMode,
    ) -> Result<NodeId, TrainError>;
}

/// F1 of thresholded probabilities; 0 when undefined. Training-history
/// signal only — evaluation owns the reported metrics.
fn threshold_f1(probs: &[f64], labels: &[u8]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &y) in probs.iter().zip(labels) {
        let pred = p >= 0.5;
        match (pred, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

// ---------------------------------------------------------------------------
// The shared loop
// ---------------------------------------------------------------------------

fn run_training_loop(
    model: &dyn StageModel,
    store: &mut ParamStore,
    cfg: &TrainConfig,
) -> Result<History, TrainError> {
    cfg.validate()?;
    let n = model.n_samples();
    if n == 0 {
        return Err(TrainError::EmptyTrainingSet);
    }
    if model.labels().len() != n {
        return Err(TrainError::LabelMismatch { labels: model.labels().len(), samples: n });
    }

    let (train_idx, val_idx) = split_train_val(model.labels(), cfg.val_fraction, cfg.seed);
    let train_labels: Vec<u8> = train_idx.iter().map(|&i| model.labels()[i]).collect();
    let val_labels: Vec<u8> = val_idx.iter().map(|&i| model.labels()[i]).collect();
    let mut sampler = build_sampler(&train_labels, cfg.sampler)?;

    let mut opt = cfg.optimizer();
    let mut draw_rng = derive_rng(cfg.seed, "epoch-draws");
    let mut dropout_rng = derive_rng(cfg.seed, "dropout");
    let mut aug_rng = derive_rng(cfg.seed, "augment");

    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        let order = sampler.draw(train_idx.len(), &mut draw_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let idx: Vec<usize> = chunk.iter().map(|&k| train_idx[k]).collect();
            let mut g = Graph::new();
            let mut mode = ForwardMode::Train { rng: &mut dropout_rng };
            let aug = if cfg.augment { Some(&mut aug_rng) } else { None };
            let loss =
                model.batch_loss(&mut g, store, &idx, &mut mode, cfg.pos_loss_factor, aug)?;
            let loss_value = g.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    stage: cfg.stage,
                    epoch,
                    batch: batch_no,
                    value: loss_value,
                });
            }
            let grads = g.backward(loss);
            store.zero_grads();
            store
                .accumulate_grads(&grads)
                .expect("gradient names come from this store's parameters");
            opt.step(store);
            loss_sum += loss_value;
            n_batches += 1;
        }

        let val_f1 = if val_idx.is_empty() {
            0.0
        } else {
            let probs = model.probs(store, &val_idx)?;
            threshold_f1(&probs, &val_labels)
        };
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_f1,
        });

        // Hard positive mining: tabular stage only, every
        // `hard_mining_period` epochs, never after the final epoch.
        if cfg.stage == Stage::Tabular
            && cfg.sampler == SamplerMode::WeightedRandom
            && epoch % cfg.hard_mining_period == 0
            && epoch < cfg.epochs
        {
            let probs = model.probs(store, &train_idx)?;
            mine_hard_positives(&mut sampler, &probs, cfg.mining_boost, cfg.mining_cap);
        }
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Stage: image encoder
// ---------------------------------------------------------------------------

struct ImageStage<'a> {
    encoder: &'a ImageEncoder,
    head: ClassifierHead,
    images: &'a [&'a ImageTensor],
    labels: &'a [u8],
}

impl StageModel for ImageStage<'_> {
    fn n_samples(&self) -> usize {
        self.images.len()
    }

    fn labels(&self) -> &[u8] {
        self.labels
    }

    fn batch_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        idx: &[usize],
        mode: &mut ForwardMode,
    ) -> Result<NodeId, TrainError> {
        let picked: Vec<&ImageTensor> = idx.iter().map(|&i| self.images[i]).collect();
        let stacked = stack_images(&picked)?;
        let z = self.encoder.forward(g, store, &stacked, mode)?;
        Ok(self.head.forward(g, store, z, mode))
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        idx: &[usize],
        mode: &mut ForwardMode,
        pos_factor: f64,
        aug_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, TrainError> {
        let labels: Vec<u8> = idx.iter().map(|&i| self.labels[i]).collect();
        let logits = if let Some(rng) = aug_rng {
            let augmented: Vec<ImageTensor> =
                idx.iter().map(|&i| augment_image(self.images[i], rng)).collect();
            let refs: Vec<&ImageTensor> = augmented.iter().collect();
            let stacked = stack_images(&refs)?;
            let z = self.encoder.forward(g, store, &stacked, mode)?;
            self.head.forward(g, store, z, mode)
        } else {
            self.batch_logits(g, store, idx, mode)?
        };
        let flat = g.reshape(logits, &[labels.len()]);
        Ok(weighted_bce(g, flat, &labels, pos_factor))
    }
}

/// Trains the image encoder plus a temporary classification head from
/// scratch. Returns the trained parameters (encoder + head) and the history.
pub fn train_image_stage(
    encoder: &ImageEncoder,
    images: &[&ImageTensor],
    labels: &[u8],
    cfg: &TrainConfig,
) -> Result<StageOutcome, TrainError> {
    let mut store = ParamStore::new();
    let mut rng = derive_rng(cfg.seed, "image-init");
    encoder.register(&mut store, &mut rng);
    let head = encoder.head(1);
    head.register(&mut store, &mut rng);
    let stage = ImageStage { encoder, head, images, labels };
    let history = run_training_loop(&stage, &mut store, cfg)?;
    Ok(StageOutcome { store, history })
}

// ---------------------------------------------------------------------------
// Stage: tabular encoder
// ---------------------------------------------------------------------------

struct TabularStage<'a> {
    encoder: &'a TabularEncoder,
    head: ClassifierHead,
    rows: ArrayView2<'a, f64>,
    labels: &'a [u8],
}

impl TabularStage<'_> {
    fn gather(&self, idx: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), self.rows.dim().1));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&self.rows.row(i));
        }
        out
    }
}

impl StageModel for TabularStage<'_> {
    fn n_samples(&self) -> usize {
        self.rows.dim().0
    }

    fn labels(&self) -> &[u8] {
        self.labels
    }

    fn batch_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        idx: &[usize],
        mode: &mut ForwardMode,
    ) -> Result<NodeId, TrainError> {
        let rows = self.gather(idx);
        let z = self.encoder.forward(g, store, &rows, mode)?;
        Ok(self.head.forward(g, store, z, mode))
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        idx: &[usize],
        mode: &mut ForwardMode,
        pos_factor: f64,
        _aug_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, TrainError> {
        let labels: Vec<u8> = idx.iter().map(|&i| self.labels[i]).collect();
        let logits = self.batch_logits(g, store, idx, mode)?;
        let flat = g.reshape(logits, &[labels.len()]);
        Ok(weighted_bce(g, flat, &labels, pos_factor))
    }
}

/// Trains the tabular encoder plus a temporary classification head.
pub fn train_tabular_stage(
    encoder: &TabularEncoder,
    rows: &ArrayView2<f64>,
    labels: &[u8],
    cfg: &TrainConfig,
) -> Result<StageOutcome, TrainError> {
    let mut store = ParamStore::new();
    let mut rng = derive_rng(cfg.seed, "tabular-init");
    encoder.register(&mut store, &mut rng);
    let head = encoder.head(1);
    head.register(&mut store, &mut rng);
    let stage = TabularStage { encoder, head, rows: rows.view(), labels };
    let history = run_training_loop(&stage, &mut store, cfg)?;
    Ok(StageOutcome { store, history })
}

// ---------------------------------------------------------------------------
// Stage: fusion (projections + fusion model over frozen embeddings)
// ---------------------------------------------------------------------------

/// The trainable part of the fusion stage: two shared-space projections and
/// the fusion model itself. The frozen encoders are *not* part of this —
/// their outputs arrive as fixed inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionStageModel {
    pub proj_image: SharedProjection,
    pub proj_tabular: SharedProjection,
    pub fusion: FusionModel,
}

impl FusionStageModel {
    pub const CHECKPOINT_KIND: &'static str = "fusion-stage";

    /// `image_dim`/`tabular_dim` are the frozen encoders' output widths.
    pub fn new(fusion: FusionModel, image_dim: usize, tabular_dim: usize) -> Self {
        let d = fusion.cfg.shared_dim;
        let name = fusion.name.clone();
        Self {
            proj_image: SharedProjection::new(format!("{name}_proj_img"), image_dim, d, true),
            proj_tabular: SharedProjection::new(format!("{name}_proj_tab"), tabular_dim, d, true),
            fusion,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.proj_image.register(store, rng);
        self.proj_tabular.register(store, rng);
        self.fusion.register(store, rng);
    }

    /// Projects raw encoder outputs into the shared space and fuses them.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_image_raw: &ArrayView2<f64>,
        z_tabular_raw: &ArrayView2<f64>,
        mode: &mut ForwardMode,
    ) -> Result<FusionForward, TrainError> {
        let zi = g.input(z_image_raw.to_owned().into_dyn());
        let zt = g.input(z_tabular_raw.to_owned().into_dyn());
        let zi = self.proj_image.forward(g, store, zi);
        let zt = self.proj_tabular.forward(g, store, zt);
        Ok(self.fusion.forward_from_rows(g, store, zi, zt, mode)?)
    }

    pub fn to_checkpoint(&self, store: &ParamStore, schema_hash: &str) -> ModelCheckpoint {
        let mut own = store.subset_prefix(&format!("{}.", self.fusion.name));
        own.absorb(store.subset_prefix(&format!("{}.", self.proj_image.name)))
            .expect("projection and fusion parameter names never collide");
        own.absorb(store.subset_prefix(&format!("{}.", self.proj_tabular.name)))
            .expect("projection and fusion parameter names never collide");
        ModelCheckpoint::new(Self::CHECKPOINT_KIND, self, schema_hash, own)
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<(Self, ParamStore), TrainError> {
        ckpt.expect_kind(Self::CHECKPOINT_KIND)?;
        let model: FusionStageModel = ckpt.config_as().map_err(TrainError::Checkpoint)?;
        model.fusion.cfg.validate()?;
        let mut expected = ParamStore::new();
        let mut rng = derive_rng(0, "checkpoint-shape-check");
        model.register(&mut expected, &mut rng);
        ckpt.validate_shapes(&expected)?;
        Ok((model, ckpt.store.clone()))
    }
}

struct FusionStage<'a> {
    model: &'a FusionStageModel,
    z_image: ArrayView2<'a, f64>,
    z_tabular: ArrayView2<'a, f64>,
    labels: &'a [u8],
}

impl FusionStage<'_> {
    fn gather(src: &ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), src.dim().1));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&src.row(i));
        }
        out
    }
}

impl StageModel for FusionStage<'_> {
    fn n_samples(&self) -> usize {
        self.z_image.dim().0
    }

    fn labels(&self) -> &[u8] {
        self.labels
    }

    fn batch_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        idx: &[usize],
        mode: &mut ForwardMode,
    ) -> Result<NodeId, TrainError> {
        let zi = Self::gather(&self.z_image, idx);
        let zt = Self::gather(&self.z_tabular, idx);
        let out = self.model.forward(g, store, &zi.view(), &zt.view(), mode)?;
        Ok(out.logits)
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        idx: &[usize],
        mode: &mut ForwardMode,
        pos_factor: f64,
        _aug_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, TrainError> {
        let labels: Vec<u8> = idx.iter().map(|&i| self.labels[i]).collect();
        let logits = self.batch_logits(g, store, idx, mode)?;
        let flat = g.reshape(logits, &[labels.len()]);
        Ok(weighted_bce(g, flat, &labels, pos_factor))
    }
}

/// Trains projections + fusion over precomputed frozen-encoder embeddings.
/// Row `i` of both embedding matrices must describe the same sample.
pub fn train_fusion_stage(
    model: &FusionStageModel,
    z_image: &ArrayView2<f64>,
    z_tabular: &ArrayView2<f64>,
    labels: &[u8],
    cfg: &TrainConfig,
) -> Result<StageOutcome, TrainError> {
    if z_image.dim().0 != z_tabular.dim().0 {
        return Err(TrainError::Fusion(FusionError::ShapeMismatch {
            expected: format!("matching row counts, image has {}", z_image.dim().0),
            got: format!("tabular has {}", z_tabular.dim().0),
        }));
    }
    let mut store = ParamStore::new();
    let mut rng = derive_rng(cfg.seed, "fusion-init");
    model.register(&mut store, &mut rng);
    let stage =
        FusionStage { model, z_image: z_image.view(), z_tabular: z_tabular.view(), labels };
    let history = run_training_loop(&stage, &mut store, cfg)?;
    Ok(StageOutcome { store, history })
}

/// A trained stage: the final parameters and the per-epoch history.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub store: ParamStore,
    pub history: History,
}
