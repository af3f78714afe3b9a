//! Run configuration: one JSON document pinning every knob of a pipeline run.
//!
//! A [`RunConfig`] is the single source of truth shared by the CLI and the
//! orchestration layer. Validation is exhaustive — [`RunConfig::problems`]
//! reports **every** violated field at once, each addressed by its dotted
//! field path, so a misconfigured run fails with one complete diagnosis
//! instead of a fix-one-find-another loop. [`RunConfig::apply_seed`] rewrites
//! all component seeds from a single override (CLI flag or environment
//! variable), and the JSON round-trip is exact so the effective-config echo
//! written into a run directory reproduces the run bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{ImageEncoderConfig, TabularEncoderConfig};
use crate::eval::EvalConfig;
use crate::fusion::FusionConfig;
use crate::preprocess::{CategoryAliasMap, ConsolidationPolicy, PreprocessOptions, WoeConfig};
use crate::synth::SyntheticConfig;
use crate::train::{Stage, TrainConfig};

/// Version of the on-disk config document.
pub const CONFIG_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// One violated configuration constraint, addressed by its dotted field path
/// (e.g. `train.image.learning_rate`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn list_violations(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {}", list_violations(.violations))]
    Invalid { violations: Vec<Violation> },
    #[error("config io error at `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Component settings
// ---------------------------------------------------------------------------

/// Tabular-encoder shape without the feature count, which is only known once
/// the schema is loaded (`n_features = schema.encoded_width()`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoderSettings {
    pub layers: usize,
    pub heads: usize,
    pub token_dim: usize,
    pub output_dim: usize,
    pub ff_hidden: usize,
}

impl TabularEncoderSettings {
    /// Mirrors [`TabularEncoderConfig::desk`].
    pub fn desk() -> Self {
        Self { layers: 2, heads: 8, token_dim: 16, output_dim: 64, ff_hidden: 32 }
    }

    /// Completes the config with the schema's encoded feature count.
    pub fn with_features(&self, n_features: usize) -> TabularEncoderConfig {
        TabularEncoderConfig {
            layers: self.layers,
            heads: self.heads,
            token_dim: self.token_dim,
            output_dim: self.output_dim,
            ff_hidden: self.ff_hidden,
            n_features,
        }
    }

    fn problems(&self) -> Vec<String> {
        // The feature count comes from the schema and is positive by
        // construction, so validate with a placeholder of 1.
        self.with_features(1).problems()
    }
}

/// Tabular preprocessing knobs; the alias map itself is loaded from
/// `alias_map_path` (or the built-in clinical aliases when `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSettings {
    pub policy: ConsolidationPolicy,
    /// JSON file mapping feature name -> raw category -> canonical category.
    /// `None` uses the built-in clinical alias map.
    pub alias_map_path: Option<PathBuf>,
    /// Categories observed fewer than this many times merge into `"Others"`.
    pub rare_min_count: usize,
    pub zscore_ordinals: bool,
    pub woe: WoeConfig,
    pub seed: u64,
}

impl PreprocessSettings {
    pub fn desk() -> Self {
        Self {
            policy: ConsolidationPolicy::default(),
            alias_map_path: None,
            rare_min_count: 4,
            zscore_ordinals: true,
            woe: WoeConfig::default(),
            seed: 42,
        }
    }

    /// Completes the options with a loaded alias map.
    pub fn to_options(&self, alias_map: CategoryAliasMap) -> PreprocessOptions {
        PreprocessOptions {
            policy: self.policy,
            alias_map,
            rare_min_count: self.rare_min_count,
            zscore_ordinals: self.zscore_ordinals,
            woe: self.woe.clone(),
            seed: self.seed,
        }
    }

    // NaN must fail the epsilon bound too, so keep the negated comparison.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.woe.folds < 2 {
            problems.push(format!(
                "woe.folds must be >= 2 for inner cross-fitting, got {}",
                self.woe.folds
            ));
        }
        if !(self.woe.epsilon > 0.0) {
            problems.push(format!("woe.epsilon must be > 0, got {}", self.woe.epsilon));
        }
        problems
    }
}

/// Outer cross-validation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSettings {
    pub k: usize,
    pub seed: u64,
}

impl FoldSettings {
    pub fn desk() -> Self {
        Self { k: 3, seed: 42 }
    }

    fn problems(&self) -> Vec<String> {
        if self.k < 2 {
            vec![format!("k must be >= 2 for cross-validation, got {}", self.k)]
        } else {
            Vec::new()
        }
    }
}

/// One training schedule per pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfigs {
    pub image: TrainConfig,
    pub tabular: TrainConfig,
    pub fusion: TrainConfig,
}

impl StageConfigs {
    pub fn desk() -> Self {
        Self {
            image: TrainConfig::desk(Stage::Image),
            tabular: TrainConfig::desk(Stage::Tabular),
            fusion: TrainConfig::desk(Stage::Fusion),
        }
    }

    /// The schedule for one stage.
    pub fn for_stage(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Image => &self.image,
            Stage::Tabular => &self.tabular,
            Stage::Fusion => &self.fusion,
        }
    }
}

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

/// Everything a pipeline run needs: paths, generator preset, preprocessing,
/// model shapes, training schedules, fold plan and evaluation options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: u32,
    /// Dataset directory (written by `generate`, read by everything else).
    pub data_dir: PathBuf,
    /// Run directory; every artifact the pipeline produces lands under it.
    pub run_dir: PathBuf,
    /// Path to a schema JSON; `None` uses the built-in clinical schema.
    pub schema_path: Option<PathBuf>,
    pub synth: SyntheticConfig,
    pub preprocess: PreprocessSettings,
    pub image_encoder: ImageEncoderConfig,
    pub tabular_encoder: TabularEncoderSettings,
    pub fusion: FusionConfig,
    pub train: StageConfigs,
    pub folds: FoldSettings,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale preset: every component at its CPU-friendly default, with
    /// the image encoder sized to the generator's 64x64 output.
    pub fn desk(data_dir: impl Into<PathBuf>, run_dir: impl Into<PathBuf>) -> Self {
        let synth = SyntheticConfig::default();
        let (_, h, w) = synth.image_size;
        Self {
            format_version: CONFIG_VERSION,
            data_dir: data_dir.into(),
            run_dir: run_dir.into(),
            schema_path: None,
            synth,
            preprocess: PreprocessSettings::desk(),
            image_encoder: ImageEncoderConfig::desk(h, w),
            tabular_encoder: TabularEncoderSettings::desk(),
            fusion: FusionConfig::desk(64),
            train: StageConfigs::desk(),
            folds: FoldSettings::desk(),
            eval: EvalConfig::default(),
        }
    }

    /// Collects every violated constraint across all components and all
    /// cross-field invariants; empty means the config is valid.
    pub fn problems(&self) -> Vec<Violation> {
        let mut violations = Vec::new();
        let mut push = |field: &str, message: String| {
            violations.push(Violation { field: field.to_string(), message });
        };

        if self.format_version != CONFIG_VERSION {
            push(
                "format_version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.format_version),
            );
        }
        if self.data_dir.as_os_str().is_empty() {
            push("data_dir", "must not be empty".to_string());
        }
        if self.run_dir.as_os_str().is_empty() {
            push("run_dir", "must not be empty".to_string());
        }

        for (field, message) in synth_problems(&self.synth) {
            push(&format!("synth.{field}"), message);
        }
        for v in prefixed("preprocess", self.preprocess.problems()) {
            violations.push(v);
        }
        for v in prefixed("image_encoder", self.image_encoder.problems()) {
            violations.push(v);
        }
        for v in prefixed("tabular_encoder", self.tabular_encoder.problems()) {
            violations.push(v);
        }
        for v in prefixed("fusion", self.fusion.problems()) {
            violations.push(v);
        }
        for (slot, stage, cfg) in [
            ("image", Stage::Image, &self.train.image),
            ("tabular", Stage::Tabular, &self.train.tabular),
            ("fusion", Stage::Fusion, &self.train.fusion),
        ] {
            for v in prefixed(&format!("train.{slot}"), cfg.problems()) {
                violations.push(v);
            }
            if cfg.stage != stage {
                violations.push(Violation {
                    field: format!("train.{slot}.stage"),
                    message: format!("slot holds the `{stage}` schedule, got `{}`", cfg.stage),
                });
            }
        }
        for v in prefixed("folds", self.folds.problems()) {
            violations.push(v);
        }

        // Evaluation knobs (NaN thresholds must fail the range check too).
        if self.eval.eval_batch == 0 {
            violations.push(Violation {
                field: "eval.eval_batch".to_string(),
                message: "must be >= 1".to_string(),
            });
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            violations.push(Violation {
                field: "eval.threshold".to_string(),
                message: format!("must lie in (0, 1), got {}", self.eval.threshold),
            });
        }
        if self.eval.sensitivity_shuffles == 0 {
            violations.push(Violation {
                field: "eval.sensitivity_shuffles".to_string(),
                message: "must be >= 1".to_string(),
            });
        }

        // Cross-field: one config describes one coherent pipeline, so the
        // image encoder must accept exactly the geometry the generator
        // produces (and that the dataset on disk therefore carries).
        let (c, h, w) = self.synth.image_size;
        let enc =
            (self.image_encoder.in_channels, self.image_encoder.image_height, self.image_encoder.image_width);
        if enc != (c, h, w) {
            violations.push(Violation {
                field: "image_encoder".to_string(),
                message: format!(
                    "encoder expects images of (channels, height, width) = {enc:?}, \
                     but synth.image_size is ({c}, {h}, {w})"
                ),
            });
        }
        // The detection task is binary: every head emits one logit, so the
        // fusion classifier must too.
        if self.fusion.classes != 1 {
            violations.push(Violation {
                field: "fusion.classes".to_string(),
                message: format!("the detection task is binary; classes must be 1, got {}", self.fusion.classes),
            });
        }

        violations
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let violations = self.problems();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid { violations })
        }
    }

    /// Rewrites every component seed from one override. Downstream streams
    /// stay decorrelated because each consumer derives its RNG from the seed
    /// plus a purpose tag.
    pub fn apply_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.preprocess.seed = seed;
        self.train.image.seed = seed;
        self.train.tabular.seed = seed;
        self.train.fusion.seed = seed;
        self.folds.seed = seed;
        self.eval.seed = seed;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_json())
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })
    }
}

/// Component `problems()` strings all lead with the offending field name;
/// lift that name into the dotted path so violations stay machine-addressable.
fn prefixed(prefix: &str, problems: Vec<String>) -> Vec<Violation> {
    problems
        .into_iter()
        .map(|message| {
            let field = message.split_whitespace().next().unwrap_or("?").to_string();
            Violation { field: format!("{prefix}.{field}"), message }
        })
        .collect()
}

/// Per-field generator checks; mirrors the generator's own validation but
/// reports every violation instead of stopping at the first.
fn synth_problems(cfg: &SyntheticConfig) -> Vec<(&'static str, String)> {
    let mut problems = Vec::new();
    if cfg.n_patients == 0 {
        problems.push(("n_patients", "must be positive".to_string()));
    }
    if !(cfg.positive_rate > 0.0 && cfg.positive_rate < 1.0) {
        problems.push(("positive_rate", format!("must lie in (0, 1), got {}", cfg.positive_rate)));
    }
    let (lo, hi) = cfg.images_per_patient;
    if lo == 0 || lo > hi {
        problems.push(("images_per_patient", format!("range ({lo}, {hi}) is invalid")));
    }
    let (c, h, w) = cfg.image_size;
    if c != 1 || h < 16 || w < 16 {
        problems.push(("image_size", format!("must be (1, h, w) with h, w >= 16, got ({c}, {h}, {w})")));
    }
    let s = cfg.signal;
    if ![s.image, s.tabular, s.interaction].iter().all(|v| (0.0..=1.0).contains(v)) {
        problems.push(("signal", "strengths must lie in [0, 1]".to_string()));
    }
    if cfg.trimester_weights.iter().any(|v| *v < 0.0)
        || cfg.trimester_weights.iter().sum::<f64>() <= 0.0
    {
        problems.push((
            "trimester_weights",
            "must be non-negative and sum to a positive value".to_string(),
        ));
    }
    problems
}
