//! End-to-end orchestration: dataset generation, per-fold preprocessing,
//! staged training with frozen-encoder fusion, cross-validated evaluation,
//! ablations, and embedding export — all addressed through one [`RunConfig`].
//!
//! Every operation is idempotent: rerunning a command with the same config
//! rewrites the same bytes. All artifacts land under the run directory, laid
//! out as
//!
//! ```text
//! run_dir/
//!   config.json                  effective-config echo
//!   plan.json                    fold-plan echo (recomputed, written for audit)
//!   folds/fold-<f>/
//!     preprocessor.json          fitted tabular preprocessor
//!     encoded-train.csv          encoded fitting-split matrix
//!     image-encoder.json         frozen image-encoder checkpoint
//!     image-head.json            image-only classification head
//!     tabular-encoder.json       frozen tabular-encoder checkpoint
//!     tabular-head.json          tabular-only classification head
//!     fusion.json                projections + fusion model checkpoint
//!     history-<stage>.csv        per-epoch training history
//!   report-<modality>.json/.csv  cross-validated metric reports
//!   embeddings-<tap>.csv         per-patient embedding export
//!   ablation-<name>.json         ablation comparison tables
//!   ablations/<name>/            sub-runs backing each ablation row
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Ix2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::load_dataset;
use crate::data::{DataError, Dataset, ImageStore, ImageTensor, PatientRecord};
use crate::encoders::{
    stack_images, ClassifierHead, EncoderError, ImageEncoder, TabularEncoder,
};
use crate::eval::{
    evaluate_cv, export_embeddings, half_data_subsample, make_folds, AggregateBlock,
    EmbeddingExtractor, EmbeddingTap, EvalError, FoldPlan, MetricsReport, PatientScorer,
    ScoredUnit,
};
use crate::fusion::{FusionError, FusionModel, FusionVariant};
use crate::nn::checkpoint::{CheckpointError, ModelCheckpoint};
use crate::nn::graph::Graph;
use crate::nn::layers::ForwardMode;
use crate::nn::params::{ParamError, ParamStore};
use crate::preprocess::{CategoryAliasMap, PreprocessError, PreprocessorBundle};
use crate::schema::TabularSchema;
use crate::synth::{self, SynthError};
use crate::train::{
    train_fusion_stage, train_image_stage, train_tabular_stage, FusionStageModel, History,
    SamplerMode, Stage, TrainError,
};
use crate::util::{derive_seed, sigmoid};

/// Checkpoint kind for the stand-alone classification heads saved next to
/// each frozen encoder.
pub const HEAD_CHECKPOINT_KIND: &str = "classifier-head";

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("pipeline io error at `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing {what} at `{path}`; {hint}")]
    MissingArtifact { what: String, path: PathBuf, hint: String },
    #[error("fold {fold} is out of range for a {k}-fold plan")]
    FoldOutOfRange { fold: usize, k: usize },
    #[error("patient `{patient_id}` appears in the fold plan but not in the dataset")]
    PlanMismatch { patient_id: String },
    #[error("{what} was fitted for schema {found}, the current schema is {expected}")]
    SchemaMismatch { what: String, found: String, expected: String },
    #[error("artifacts disagree: {0}")]
    IncompatibleArtifacts(String),
    #[error("frozen {which} parameters changed during the fusion stage of fold {fold}")]
    FrozenEncoderChanged { which: String, fold: usize },
}

impl PipelineError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Config(ConfigError::Invalid { .. }) => "config-invalid",
            PipelineError::Config(_) => "config-io",
            PipelineError::Data(_) => "data",
            PipelineError::Synth(_) => "synth",
            PipelineError::Preprocess(_) => "preprocess",
            PipelineError::Encoder(_) => "encoder",
            PipelineError::Fusion(_) => "fusion",
            PipelineError::Train(_) => "train",
            PipelineError::Eval(_) => "eval",
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::Param(_) => "params",
            PipelineError::Io { .. } => "io",
            PipelineError::MissingArtifact { .. } => "missing-artifact",
            PipelineError::FoldOutOfRange { .. } => "fold-out-of-range",
            PipelineError::PlanMismatch { .. } => "plan-mismatch",
            PipelineError::SchemaMismatch { .. } => "schema-mismatch",
            PipelineError::IncompatibleArtifacts(_) => "incompatible-artifacts",
            PipelineError::FrozenEncoderChanged { .. } => "frozen-encoder-changed",
        }
    }
}

// ---------------------------------------------------------------------------
// Modality and run layout
// ---------------------------------------------------------------------------

/// Which model family scores patients during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Multimodal,
    Image,
    Tabular,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Multimodal, Modality::Image, Modality::Tabular];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Multimodal => "multimodal",
            Modality::Image => "image",
            Modality::Tabular => "tabular",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL.iter().find(|m| m.as_str() == s).copied().ok_or_else(|| {
            let names: Vec<&str> = Modality::ALL.iter().map(|m| m.as_str()).collect();
            format!("unknown modality `{s}` (expected one of: {})", names.join(", "))
        })
    }
}

/// Addresses of every artifact under one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub run_dir: PathBuf,
}

impl RunPaths {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        Self { run_dir: run_dir.into() }
    }

    pub fn config_echo(&self) -> PathBuf {
        self.run_dir.join("config.json")
    }

    pub fn plan(&self) -> PathBuf {
        self.run_dir.join("plan.json")
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.run_dir.join("folds").join(format!("fold-{fold}"))
    }

    pub fn bundle(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("preprocessor.json")
    }

    pub fn encoded_matrix(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("encoded-train.csv")
    }

    pub fn image_encoder(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("image-encoder.json")
    }

    pub fn image_head(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("image-head.json")
    }

    pub fn tabular_encoder(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("tabular-encoder.json")
    }

    pub fn tabular_head(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("tabular-head.json")
    }

    pub fn fusion(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("fusion.json")
    }

    pub fn history(&self, fold: usize, stage: Stage) -> PathBuf {
        self.fold_dir(fold).join(format!("history-{stage}.csv"))
    }

    pub fn report_json(&self, label: &str) -> PathBuf {
        self.run_dir.join(format!("report-{label}.json"))
    }

    pub fn report_csv(&self, label: &str) -> PathBuf {
        self.run_dir.join(format!("report-{label}.csv"))
    }

    pub fn embeddings(&self, tap: EmbeddingTap) -> PathBuf {
        self.run_dir.join(format!("embeddings-{tap}.csv"))
    }

    pub fn ablation_table(&self, name: &str) -> PathBuf {
        self.run_dir.join(format!("ablation-{name}.json"))
    }

    pub fn ablation_run_dir(&self, name: &str) -> PathBuf {
        self.run_dir.join("ablations").join(name)
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Fixed internal model names; parameter prefixes derive from them.
const IMAGE_NAME: &str = "img";
const TABULAR_NAME: &str = "tab";
const FUSION_NAME: &str = "fus";

/// Orchestrates one run. Construction validates the whole config (every
/// violated field at once) before any work happens.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: RunConfig,
    pub paths: RunPaths,
    /// When set, every training split is subsampled to 50% per
    /// (class, trimester-profile) stratum; test splits are untouched.
    half_data: bool,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let paths = RunPaths::new(cfg.run_dir.clone());
        Ok(Self { cfg, paths, half_data: false })
    }

    /// Generates the synthetic dataset into `data_dir` (plus a `schema.json`
    /// copy for inspection) and returns it.
    pub fn generate(&self) -> Result<Dataset, PipelineError> {
        let data = synth::generate(&self.cfg.synth)?;
        crate::data::save_dataset(&data, &self.cfg.data_dir)?;
        write_text(&self.cfg.data_dir.join("schema.json"), &data.schema.to_json())?;
        Ok(data)
    }

    /// Loads the schema (from `schema_path`, or the built-in clinical one).
    pub fn load_schema(&self) -> Result<TabularSchema, PipelineError> {
        match &self.cfg.schema_path {
            None => Ok(TabularSchema::clinical_default()),
            Some(path) => {
                let text = read_text(path, "schema", "point schema_path at a schema JSON")?;
                TabularSchema::from_json(&text).map_err(|e| {
                    PipelineError::Config(ConfigError::Parse(e))
                })
            }
        }
    }

    /// Loads the dataset from `data_dir`.
    pub fn load_data(&self) -> Result<Dataset, PipelineError> {
        let schema = self.load_schema()?;
        let manifest = self.cfg.data_dir.join("manifest.json");
        if !manifest.exists() {
            return Err(PipelineError::MissingArtifact {
                what: "dataset manifest".to_string(),
                path: manifest,
                hint: "run `generate` first, or point data_dir at an existing dataset"
                    .to_string(),
            });
        }
        Ok(load_dataset(&self.cfg.data_dir, &schema, &self.cfg.preprocess.policy)?)
    }

    /// Recomputes the deterministic fold plan and echoes it (plus the
    /// effective config) into the run directory for audit.
    pub fn fold_plan(&self, data: &Dataset) -> Result<FoldPlan, PipelineError> {
        let plan = make_folds(&data.records, self.cfg.folds.k, self.cfg.folds.seed)?;
        self.ensure_run_dir()?;
        let json = serde_json::to_string_pretty(&plan).expect("plan serializes");
        write_text(&self.paths.plan(), &json)?;
        Ok(plan)
    }

    /// Writes the effective-config echo into the run directory (creating it),
    /// so every command leaves an auditable, rerunnable config behind.
    pub fn write_config_echo(&self) -> Result<(), PipelineError> {
        self.ensure_run_dir()
    }

    fn ensure_run_dir(&self) -> Result<(), PipelineError> {
        fs::create_dir_all(&self.paths.run_dir)
            .map_err(|e| io_err(&self.paths.run_dir, e))?;
        self.cfg.save(&self.paths.config_echo())?;
        Ok(())
    }

    fn ensure_fold_dir(&self, fold: usize) -> Result<(), PipelineError> {
        fs::create_dir_all(self.paths.fold_dir(fold))
            .map_err(|e| io_err(&self.paths.fold_dir(fold), e))?;
        Ok(())
    }

    fn check_fold(&self, plan: &FoldPlan, fold: usize) -> Result<(), PipelineError> {
        if fold >= plan.k {
            return Err(PipelineError::FoldOutOfRange { fold, k: plan.k });
        }
        Ok(())
    }

    /// The alias map named by the config (built-in clinical aliases when the
    /// path is absent).
    pub fn load_alias_map(&self) -> Result<CategoryAliasMap, PipelineError> {
        match &self.cfg.preprocess.alias_map_path {
            None => Ok(synth::default_alias_map()),
            Some(path) => {
                let text =
                    read_text(path, "alias map", "point alias_map_path at an alias JSON")?;
                serde_json::from_str(&text)
                    .map_err(|e| PipelineError::Config(ConfigError::Parse(e)))
            }
        }
    }

    /// The fitting-split records of one fold, sorted by patient id. Applies
    /// the half-data subsample when this pipeline runs that protocol.
    fn train_records<'a>(
        &self,
        data: &'a Dataset,
        plan: &FoldPlan,
        fold: usize,
    ) -> Result<Vec<&'a PatientRecord>, PipelineError> {
        let by_id: BTreeMap<&str, &PatientRecord> =
            data.records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
        let mut records = Vec::new();
        for id in plan.train_patients(fold) {
            let record = by_id.get(id).copied().ok_or_else(|| PipelineError::PlanMismatch {
                patient_id: id.to_string(),
            })?;
            records.push(record);
        }
        if self.half_data {
            let seed = derive_seed(self.cfg.folds.seed, &format!("half-data-f{fold}"));
            records = half_data_subsample(&records, seed);
        }
        Ok(records)
    }

    /// Training schedule for one stage of one fold: the configured schedule
    /// with a fold-decorrelated seed.
    fn stage_config(&self, stage: Stage, fold: usize) -> crate::train::TrainConfig {
        let mut cfg = *self.cfg.train.for_stage(stage);
        cfg.seed = derive_seed(cfg.seed, &format!("fold-{fold}"));
        cfg
    }

    // -- preprocessing ------------------------------------------------------

    /// Fits the tabular preprocessor on the fold's fitting split and writes
    /// the bundle plus the encoded fitting-split matrix.
    pub fn preprocess_fold(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        fold: usize,
    ) -> Result<PreprocessorBundle, PipelineError> {
        self.check_fold(plan, fold)?;
        self.ensure_run_dir()?;
        self.ensure_fold_dir(fold)?;
        let records = self.train_records(data, plan, fold)?;
        let options = self.cfg.preprocess.to_options(self.load_alias_map()?);
        let bundle = PreprocessorBundle::fit(&records, &data.schema, &options)?;
        write_text(&self.paths.bundle(fold), &bundle.to_json())?;
        self.write_encoded_matrix(&bundle, &records, &data.schema, fold)?;
        Ok(bundle)
    }

    /// Loads the fold's preprocessor bundle, fitting and saving it first if
    /// the artifact is absent (fitting is deterministic, so this keeps every
    /// downstream command idempotent).
    fn load_or_fit_bundle(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        fold: usize,
    ) -> Result<PreprocessorBundle, PipelineError> {
        let path = self.paths.bundle(fold);
        if path.exists() {
            let text = read_text(&path, "preprocessor bundle", "rerun `preprocess`")?;
            Ok(PreprocessorBundle::from_json(&text, &data.schema)?)
        } else {
            self.preprocess_fold(data, plan, fold)
        }
    }

    fn write_encoded_matrix(
        &self,
        bundle: &PreprocessorBundle,
        records: &[&PatientRecord],
        schema: &TabularSchema,
        fold: usize,
    ) -> Result<(), PipelineError> {
        let path = self.paths.encoded_matrix(fold);
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| PipelineError::Io { path: path.display().to_string(), source: e.into() })?;
        let mut header = vec!["patient_id".to_string(), "label".to_string()];
        header.extend(schema.features().iter().map(|f| f.name.clone()));
        w.write_record(&header)
            .map_err(|e| PipelineError::Io { path: path.display().to_string(), source: e.into() })?;
        for record in records {
            let row = bundle.encode_train(record, schema)?;
            let mut cells = vec![record.patient_id.clone(), record.label.to_string()];
            cells.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&cells)
                .map_err(|e| PipelineError::Io { path: path.display().to_string(), source: e.into() })?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// Encodes the given records with the bundle into an `(n, width)` matrix.
    /// `train` selects leakage-safe inner-fold encoding for fitting-split
    /// rows; inference rows use the fold-averaged tables.
    fn encode_rows(
        &self,
        bundle: &PreprocessorBundle,
        records: &[&PatientRecord],
        schema: &TabularSchema,
        train: bool,
    ) -> Result<Array2<f64>, PipelineError> {
        let width = schema.encoded_width();
        let mut rows = Array2::zeros((records.len(), width));
        for (i, record) in records.iter().enumerate() {
            let encoded = if train {
                bundle.encode_train(record, schema)?
            } else {
                bundle.encode_infer(record, schema)?
            };
            rows.row_mut(i).assign(&Array1::from(encoded));
        }
        Ok(rows)
    }

    // -- training -----------------------------------------------------------

    /// Trains one stage of one fold and writes its artifacts. The fusion
    /// stage refuses to run until both encoder checkpoints exist.
    pub fn train_stage(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        stage: Stage,
        fold: usize,
    ) -> Result<History, PipelineError> {
        self.check_fold(plan, fold)?;
        self.ensure_run_dir()?;
        self.ensure_fold_dir(fold)?;
        let history = match stage {
            Stage::Image => self.train_image(data, plan, fold)?,
            Stage::Tabular => self.train_tabular(data, plan, fold)?,
            Stage::Fusion => self.train_fusion(data, plan, fold)?,
        };
        history.write_csv(&self.paths.history(fold, stage)).map_err(|e| io_err_str(
            &self.paths.history(fold, stage),
            e,
        ))?;
        Ok(history)
    }

    /// Trains every stage of every fold in order.
    pub fn train_all(&self, data: &Dataset, plan: &FoldPlan) -> Result<(), PipelineError> {
        for fold in 0..plan.k {
            for stage in Stage::ALL {
                self.train_stage(data, plan, stage, fold)?;
            }
        }
        Ok(())
    }

    fn train_image(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        fold: usize,
    ) -> Result<History, PipelineError> {
        let records = self.train_records(data, plan, fold)?;
        let (images, labels) = per_image_set(data, &records)?;
        let encoder = ImageEncoder::new(IMAGE_NAME, self.cfg.image_encoder.clone())?;
        let outcome = train_image_stage(&encoder, &images, &labels, &self.stage_config(Stage::Image, fold))?;

        let hash = data.schema.hash();
        encoder
            .to_checkpoint(&outcome.store, &hash)
            .save(&self.paths.image_encoder(fold))?;
        save_head_checkpoint(&encoder.head(1), &outcome.store, &hash, &self.paths.image_head(fold))?;
        Ok(outcome.history)
    }

    fn train_tabular(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        fold: usize,
    ) -> Result<History, PipelineError> {
        let records = self.train_records(data, plan, fold)?;
        let bundle = self.load_or_fit_bundle(data, plan, fold)?;
        let rows = self.encode_rows(&bundle, &records, &data.schema, true)?;
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
        let encoder = TabularEncoder::new(
            TABULAR_NAME,
            self.cfg.tabular_encoder.with_features(data.schema.encoded_width()),
        )?;
        let outcome =
            train_tabular_stage(&encoder, &rows.view(), &labels, &self.stage_config(Stage::Tabular, fold))?;

        let hash = data.schema.hash();
        encoder
            .to_checkpoint(&outcome.store, &hash)
            .save(&self.paths.tabular_encoder(fold))?;
        save_head_checkpoint(&encoder.head(1), &outcome.store, &hash, &self.paths.tabular_head(fold))?;
        Ok(outcome.history)
    }

    fn train_fusion(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        fold: usize,
    ) -> Result<History, PipelineError> {
        // Stage ordering: both encoder checkpoints must exist first.
        let (image_encoder, image_store) = self.load_image_encoder(data, fold)?;
        let (tabular_encoder, tabular_store) = self.load_tabular_encoder(data, fold)?;
        let bundle = self.load_or_fit_bundle(data, plan, fold)?;

        // Merge the frozen encoders into one read-only store and fingerprint
        // it; the fingerprint must survive the whole stage untouched.
        let mut frozen = image_store;
        frozen.absorb(tabular_store)?;
        frozen.set_frozen_prefix(&format!("{IMAGE_NAME}."), true);
        frozen.set_frozen_prefix(&format!("{TABULAR_NAME}."), true);
        let image_sum = frozen.checksum_prefix(&format!("{IMAGE_NAME}."));
        let tabular_sum = frozen.checksum_prefix(&format!("{TABULAR_NAME}."));

        // Precompute the frozen eval-mode embeddings: one tabular embedding
        // per patient, replicated across that patient's images.
        let records = self.train_records(data, plan, fold)?;
        let rows = self.encode_rows(&bundle, &records, &data.schema, true)?;
        let z_tabular_patient = tabular_embeddings(&tabular_encoder, &frozen, &rows)?;

        let (images, labels) = per_image_set(data, &records)?;
        let z_image = image_embeddings(&image_encoder, &frozen, &images)?;
        let mut z_tabular = Array2::zeros((labels.len(), z_tabular_patient.dim().1));
        let mut row = 0usize;
        for (p, record) in records.iter().enumerate() {
            for _ in &record.image_refs {
                z_tabular.row_mut(row).assign(&z_tabular_patient.row(p));
                row += 1;
            }
        }

        let fusion = FusionModel::new(FUSION_NAME, self.cfg.fusion)?;
        let model = FusionStageModel::new(
            fusion,
            image_encoder.cfg.hidden_dim,
            tabular_encoder.cfg.output_dim,
        );
        let outcome = train_fusion_stage(
            &model,
            &z_image.view(),
            &z_tabular.view(),
            &labels,
            &self.stage_config(Stage::Fusion, fold),
        )?;

        // The encoders never enter the trainable store; prove it.
        if frozen.checksum_prefix(&format!("{IMAGE_NAME}.")) != image_sum {
            return Err(PipelineError::FrozenEncoderChanged { which: "image-encoder".into(), fold });
        }
        if frozen.checksum_prefix(&format!("{TABULAR_NAME}.")) != tabular_sum {
            return Err(PipelineError::FrozenEncoderChanged {
                which: "tabular-encoder".into(),
                fold,
            });
        }

        model.to_checkpoint(&outcome.store, &data.schema.hash()).save(&self.paths.fusion(fold))?;
        Ok(outcome.history)
    }

    // -- checkpoint loading -------------------------------------------------

    fn load_image_encoder(
        &self,
        data: &Dataset,
        fold: usize,
    ) -> Result<(ImageEncoder, ParamStore), PipelineError> {
        let ckpt = self.load_checkpoint(
            &self.paths.image_encoder(fold),
            "image-encoder checkpoint",
            &format!("run `train --stage image --fold {fold}` first"),
            &data.schema,
        )?;
        Ok(ImageEncoder::from_checkpoint(&ckpt)?)
    }

    fn load_tabular_encoder(
        &self,
        data: &Dataset,
        fold: usize,
    ) -> Result<(TabularEncoder, ParamStore), PipelineError> {
        let ckpt = self.load_checkpoint(
            &self.paths.tabular_encoder(fold),
            "tabular-encoder checkpoint",
            &format!("run `train --stage tabular --fold {fold}` first"),
            &data.schema,
        )?;
        Ok(TabularEncoder::from_checkpoint(&ckpt)?)
    }

    fn load_head(
        &self,
        path: &Path,
        data: &Dataset,
        stage: Stage,
        fold: usize,
    ) -> Result<(ClassifierHead, ParamStore), PipelineError> {
        let ckpt = self.load_checkpoint(
            path,
            "classification-head checkpoint",
            &format!("run `train --stage {stage} --fold {fold}` first"),
            &data.schema,
        )?;
        ckpt.expect_kind(HEAD_CHECKPOINT_KIND)?;
        let head: ClassifierHead = ckpt.config_as()?;
        let mut expected = ParamStore::new();
        let mut rng = crate::util::derive_rng(0, "checkpoint-shape-check");
        head.register(&mut expected, &mut rng);
        ckpt.validate_shapes(&expected)?;
        Ok((head, ckpt.store.clone()))
    }

    fn load_fusion(
        &self,
        data: &Dataset,
        fold: usize,
    ) -> Result<(FusionStageModel, ParamStore), PipelineError> {
        let ckpt = self.load_checkpoint(
            &self.paths.fusion(fold),
            "fusion checkpoint",
            &format!("run `train --stage fusion --fold {fold}` first"),
            &data.schema,
        )?;
        Ok(FusionStageModel::from_checkpoint(&ckpt)?)
    }

    fn load_checkpoint(
        &self,
        path: &Path,
        what: &str,
        hint: &str,
        schema: &TabularSchema,
    ) -> Result<ModelCheckpoint, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingArtifact {
                what: what.to_string(),
                path: path.to_path_buf(),
                hint: hint.to_string(),
            });
        }
        let ckpt = ModelCheckpoint::load(path)?;
        let expected = schema.hash();
        if ckpt.schema_hash != expected {
            return Err(PipelineError::SchemaMismatch {
                what: what.to_string(),
                found: ckpt.schema_hash,
                expected,
            });
        }
        Ok(ckpt)
    }

    // -- evaluation ---------------------------------------------------------

    /// Builds the per-fold scorer for one modality.
    fn build_scorer(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        fold: usize,
        modality: Modality,
    ) -> Result<Box<dyn PatientScorer>, PipelineError> {
        match modality {
            Modality::Image => {
                let (encoder, mut store) = self.load_image_encoder(data, fold)?;
                let (head, head_store) =
                    self.load_head(&self.paths.image_head(fold), data, Stage::Image, fold)?;
                store.absorb(head_store)?;
                Ok(Box::new(ImageOnlyScorer { encoder, head, store }))
            }
            Modality::Tabular => {
                let (encoder, mut store) = self.load_tabular_encoder(data, fold)?;
                let (head, head_store) =
                    self.load_head(&self.paths.tabular_head(fold), data, Stage::Tabular, fold)?;
                store.absorb(head_store)?;
                let bundle = self.load_or_fit_bundle(data, plan, fold)?;
                Ok(Box::new(TabularOnlyScorer {
                    encoder,
                    head,
                    store,
                    bundle,
                    schema: data.schema.clone(),
                }))
            }
            Modality::Multimodal => {
                let (image_encoder, image_store) = self.load_image_encoder(data, fold)?;
                let (tabular_encoder, tabular_store) = self.load_tabular_encoder(data, fold)?;
                let (stage, fusion_store) = self.load_fusion(data, fold)?;
                if stage.proj_image.in_dim != image_encoder.cfg.hidden_dim
                    || stage.proj_tabular.in_dim != tabular_encoder.cfg.output_dim
                {
                    return Err(PipelineError::IncompatibleArtifacts(format!(
                        "fusion projections expect widths ({}, {}), encoders produce ({}, {})",
                        stage.proj_image.in_dim,
                        stage.proj_tabular.in_dim,
                        image_encoder.cfg.hidden_dim,
                        tabular_encoder.cfg.output_dim,
                    )));
                }
                let mut encoder_store = image_store;
                encoder_store.absorb(tabular_store)?;
                let bundle = self.load_or_fit_bundle(data, plan, fold)?;
                Ok(Box::new(MultimodalScorer {
                    image_encoder,
                    tabular_encoder,
                    stage,
                    encoder_store,
                    fusion_store,
                    bundle,
                    schema: data.schema.clone(),
                }))
            }
        }
    }

    /// Evaluates one modality across all folds and writes the JSON + CSV
    /// reports into the run directory.
    pub fn evaluate(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        modality: Modality,
    ) -> Result<MetricsReport, PipelineError> {
        self.ensure_run_dir()?;
        let mut scorers: Vec<Box<dyn PatientScorer>> = Vec::with_capacity(plan.k);
        for fold in 0..plan.k {
            scorers.push(self.build_scorer(data, plan, fold, modality)?);
        }
        let refs: Vec<&dyn PatientScorer> = scorers.iter().map(|b| b.as_ref()).collect();
        let report = evaluate_cv(&refs, data, plan, &self.cfg.eval)?;
        report.write_json(&self.paths.report_json(modality.as_str()))?;
        report.write_csv(&self.paths.report_csv(modality.as_str()))?;
        Ok(report)
    }

    // -- embedding export ---------------------------------------------------

    /// Exports per-patient embeddings for one tap. Each patient is embedded
    /// by the fold model that never saw it during training.
    pub fn export_embeddings(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        tap: EmbeddingTap,
    ) -> Result<usize, PipelineError> {
        self.ensure_run_dir()?;
        let mut folds = Vec::with_capacity(plan.k);
        for fold in 0..plan.k {
            folds.push(self.load_fold_models(data, plan, fold, tap)?);
        }
        let embedder = CvEmbedder { plan, folds };
        Ok(export_embeddings(&embedder, data, tap, &self.paths.embeddings(tap))?)
    }

    fn load_fold_models(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        fold: usize,
        tap: EmbeddingTap,
    ) -> Result<FoldEmbeddingModels, PipelineError> {
        let (image_encoder, image_store) = self.load_image_encoder(data, fold)?;
        let (tabular_encoder, tabular_store) = self.load_tabular_encoder(data, fold)?;
        let mut store = image_store;
        store.absorb(tabular_store)?;
        let stage = match tap {
            EmbeddingTap::Fused => {
                let (stage, fusion_store) = self.load_fusion(data, fold)?;
                store.absorb(fusion_store)?;
                Some(stage)
            }
            _ => None,
        };
        let bundle = self.load_or_fit_bundle(data, plan, fold)?;
        Ok(FoldEmbeddingModels {
            image_encoder,
            tabular_encoder,
            stage,
            store,
            bundle,
            schema: data.schema.clone(),
        })
    }

    // -- ablations ----------------------------------------------------------

    /// Runs one ablation protocol and writes its comparison table.
    pub fn ablate(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        ablation: &Ablation,
    ) -> Result<AblationTable, PipelineError> {
        self.ensure_run_dir()?;
        let table = match ablation {
            Ablation::FusionVariants(variants) => self.ablate_fusion(data, plan, variants)?,
            Ablation::NoSampler => {
                let baseline = self.evaluate(data, plan, Modality::Multimodal)?;
                let variant = self.derived_run("no-sampler", |cfg| {
                    cfg.train.image.sampler = SamplerMode::None;
                    cfg.train.tabular.sampler = SamplerMode::None;
                    cfg.train.fusion.sampler = SamplerMode::None;
                })?;
                variant.train_all(data, plan)?;
                let report = variant.evaluate(data, plan, Modality::Multimodal)?;
                AblationTable {
                    ablation: "sampler".to_string(),
                    rows: vec![
                        AblationRow::new("weighted-sampler", &baseline),
                        AblationRow::new("no-sampler", &report),
                    ],
                }
            }
            Ablation::PosFactor(factor) => {
                let baseline = self.evaluate(data, plan, Modality::Multimodal)?;
                let name = format!("pos-factor-{factor}");
                let variant = self.derived_run(&name, |cfg| {
                    cfg.train.image.pos_loss_factor = *factor;
                    cfg.train.tabular.pos_loss_factor = *factor;
                    cfg.train.fusion.pos_loss_factor = *factor;
                })?;
                variant.train_all(data, plan)?;
                let report = variant.evaluate(data, plan, Modality::Multimodal)?;
                AblationTable {
                    ablation: "pos-factor".to_string(),
                    rows: vec![
                        AblationRow::new(
                            &format!("pos-factor-{}", self.cfg.train.fusion.pos_loss_factor),
                            &baseline,
                        ),
                        AblationRow::new(&name, &report),
                    ],
                }
            }
            Ablation::HalfData => {
                let baseline = self.evaluate(data, plan, Modality::Multimodal)?;
                let mut variant = self.derived_run("half-data", |_| {})?;
                variant.half_data = true;
                variant.train_all(data, plan)?;
                let report = variant.evaluate(data, plan, Modality::Multimodal)?;
                AblationTable {
                    ablation: "half-data".to_string(),
                    rows: vec![
                        AblationRow::new("full-data", &baseline),
                        AblationRow::new("half-data", &report),
                    ],
                }
            }
        };
        write_text(&self.paths.ablation_table(&table.ablation), &table.to_json())?;
        Ok(table)
    }

    fn ablate_fusion(
        &self,
        data: &Dataset,
        plan: &FoldPlan,
        variants: &[FusionVariant],
    ) -> Result<AblationTable, PipelineError> {
        let mut rows = Vec::with_capacity(variants.len());
        for &variant in variants {
            let name = format!("fusion-{variant}");
            let sub = self.derived_run(&name, |cfg| cfg.fusion.variant = variant)?;
            // The frozen encoders are variant-independent: reuse this run's
            // stage-one artifacts and retrain only the fusion stage.
            sub.adopt_encoder_artifacts(self, plan)?;
            for fold in 0..plan.k {
                sub.train_stage(data, plan, Stage::Fusion, fold)?;
            }
            let report = sub.evaluate(data, plan, Modality::Multimodal)?;
            rows.push(AblationRow::new(&name, &report));
        }
        Ok(AblationTable { ablation: "fusion-variant".to_string(), rows })
    }

    /// A sub-pipeline under `run_dir/ablations/<name>` with a mutated config.
    fn derived_run(
        &self,
        name: &str,
        mutate: impl FnOnce(&mut RunConfig),
    ) -> Result<Pipeline, PipelineError> {
        let mut cfg = self.cfg.clone();
        cfg.run_dir = self.paths.ablation_run_dir(name);
        mutate(&mut cfg);
        let mut pipeline = Pipeline::new(cfg)?;
        pipeline.half_data = self.half_data;
        Ok(pipeline)
    }

    /// Copies the frozen stage-one artifacts (encoders, heads, preprocessor)
    /// from `source` into this run, fold by fold, where absent.
    fn adopt_encoder_artifacts(
        &self,
        source: &Pipeline,
        plan: &FoldPlan,
    ) -> Result<(), PipelineError> {
        self.ensure_run_dir()?;
        for fold in 0..plan.k {
            self.ensure_fold_dir(fold)?;
            for (from, to) in [
                (source.paths.image_encoder(fold), self.paths.image_encoder(fold)),
                (source.paths.image_head(fold), self.paths.image_head(fold)),
                (source.paths.tabular_encoder(fold), self.paths.tabular_encoder(fold)),
                (source.paths.tabular_head(fold), self.paths.tabular_head(fold)),
                (source.paths.bundle(fold), self.paths.bundle(fold)),
            ] {
                if !from.exists() {
                    return Err(PipelineError::MissingArtifact {
                        what: "stage-one artifact".to_string(),
                        path: from,
                        hint: "train the image and tabular stages of the main run first"
                            .to_string(),
                    });
                }
                fs::copy(&from, &to).map_err(|e| io_err(&to, e))?;
            }
        }
        Ok(())
    }
}

/// An ablation protocol: what to vary against the trained baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum Ablation {
    /// Retrain only the fusion stage per variant, on the same frozen
    /// encoders; one table row per variant.
    FusionVariants(Vec<FusionVariant>),
    /// Full retrain with the weighted sampler disabled in every stage.
    NoSampler,
    /// Full retrain with this positive-class loss factor in every stage.
    PosFactor(f64),
    /// Full retrain on half the training patients per fold (stratified);
    /// test splits untouched.
    HalfData,
}

/// One row of an ablation table: a configuration name plus its
/// cross-validated aggregate metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub aggregate: AggregateBlock,
}

impl AblationRow {
    fn new(name: &str, report: &MetricsReport) -> Self {
        Self { name: name.to_string(), aggregate: report.aggregate.clone() }
    }
}

/// An ablation comparison table, serialized next to the reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ablation: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Fixed-width text rendering for terminal output.
    pub fn render_text(&self) -> String {
        fn cell(stat: &Option<crate::eval::AggregateStat>) -> String {
            match stat {
                Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std),
                None => "—".to_string(),
            }
        }
        let mut out = format!("ablation: {}\n", self.ablation);
        out.push_str(&format!(
            "{:<24} {:>17} {:>17} {:>17} {:>17}\n",
            "configuration", "f1", "precision", "recall", "auc"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>17} {:>17} {:>17} {:>17}\n",
                row.name,
                cell(&row.aggregate.f1),
                cell(&row.aggregate.precision),
                cell(&row.aggregate.recall),
                cell(&row.aggregate.auc),
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Frozen-encoder inference helpers
// ---------------------------------------------------------------------------

/// All images of the given records in record order, each labeled with its
/// patient's label.
fn per_image_set<'a>(
    data: &'a Dataset,
    records: &[&PatientRecord],
) -> Result<(Vec<&'a ImageTensor>, Vec<u8>), PipelineError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for record in records {
        for image_ref in &record.image_refs {
            let image = data.images.get(&record.patient_id, &image_ref.image_id).ok_or_else(
                || DataError::MissingImageFile {
                    patient_id: record.patient_id.clone(),
                    image_id: image_ref.image_id.clone(),
                },
            )?;
            images.push(image);
            labels.push(record.label);
        }
    }
    Ok((images, labels))
}

/// Images scored per chunk in eval mode; chunking cannot change results
/// because the image encoder attends only within one image.
const EVAL_CHUNK: usize = 32;

fn image_embeddings(
    encoder: &ImageEncoder,
    store: &ParamStore,
    images: &[&ImageTensor],
) -> Result<Array2<f64>, EncoderError> {
    let mut out = Array2::zeros((images.len(), encoder.cfg.hidden_dim));
    let mut row = 0usize;
    for chunk in images.chunks(EVAL_CHUNK) {
        let batch = stack_images(chunk)?;
        let mut g = Graph::new();
        let node = encoder.forward(&mut g, store, &batch, &mut ForwardMode::Eval)?;
        let values = g.value(node).view().into_dimensionality::<Ix2>().expect("(B, D) output");
        for r in values.rows() {
            out.row_mut(row).assign(&r);
            row += 1;
        }
    }
    Ok(out)
}

fn tabular_embeddings(
    encoder: &TabularEncoder,
    store: &ParamStore,
    rows: &Array2<f64>,
) -> Result<Array2<f64>, EncoderError> {
    let mut out = Array2::zeros((rows.dim().0, encoder.cfg.output_dim));
    let mut row = 0usize;
    for start in (0..rows.dim().0).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(rows.dim().0);
        let batch = rows.slice(ndarray::s![start..end, ..]).to_owned();
        let mut g = Graph::new();
        let node = encoder.forward(&mut g, store, &batch, &mut ForwardMode::Eval)?;
        let values = g.value(node).view().into_dimensionality::<Ix2>().expect("(B, D) output");
        for r in values.rows() {
            out.row_mut(row).assign(&r);
            row += 1;
        }
    }
    Ok(out)
}

fn inference_err(e: impl std::fmt::Display) -> EvalError {
    EvalError::Inference(e.to_string())
}

// ---------------------------------------------------------------------------
// Scorers
// ---------------------------------------------------------------------------

/// Scores each image independently with the image encoder + head.
struct ImageOnlyScorer {
    encoder: ImageEncoder,
    head: ClassifierHead,
    store: ParamStore,
}

impl PatientScorer for ImageOnlyScorer {
    fn modality(&self) -> &str {
        "image"
    }

    fn score_patients(
        &self,
        patients: &[&PatientRecord],
        images: &ImageStore,
    ) -> Result<Vec<Vec<ScoredUnit>>, EvalError> {
        let (tensors, owner, trimesters) = gather_images(patients, images)?;
        let mut probs = Vec::with_capacity(tensors.len());
        for chunk in tensors.chunks(EVAL_CHUNK) {
            let batch = stack_images(chunk).map_err(inference_err)?;
            let mut g = Graph::new();
            let z = self
                .encoder
                .forward(&mut g, &self.store, &batch, &mut ForwardMode::Eval)
                .map_err(inference_err)?;
            let logits = self.head.forward(&mut g, &self.store, z, &mut ForwardMode::Eval);
            for &v in g.value(logits).iter() {
                probs.push(sigmoid(v));
            }
        }
        Ok(group_units(patients.len(), &owner, &trimesters, &probs))
    }
}

/// Scores each patient once from the encoded tabular row.
struct TabularOnlyScorer {
    encoder: TabularEncoder,
    head: ClassifierHead,
    store: ParamStore,
    bundle: PreprocessorBundle,
    schema: TabularSchema,
}

impl PatientScorer for TabularOnlyScorer {
    fn modality(&self) -> &str {
        "tabular"
    }

    fn score_patients(
        &self,
        patients: &[&PatientRecord],
        _images: &ImageStore,
    ) -> Result<Vec<Vec<ScoredUnit>>, EvalError> {
        let rows = infer_rows(&self.bundle, patients, &self.schema)?;
        let mut units = Vec::with_capacity(patients.len());
        for start in (0..patients.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(patients.len());
            let batch = rows.slice(ndarray::s![start..end, ..]).to_owned();
            let mut g = Graph::new();
            let z = self
                .encoder
                .forward(&mut g, &self.store, &batch, &mut ForwardMode::Eval)
                .map_err(inference_err)?;
            let logits = self.head.forward(&mut g, &self.store, z, &mut ForwardMode::Eval);
            for &v in g.value(logits).iter() {
                units.push(vec![ScoredUnit { trimester: None, prob: sigmoid(v) }]);
            }
        }
        Ok(units)
    }
}

/// Scores every image of the patient batch through the frozen encoders and
/// the fusion model. Fusion attends across the whole unit batch, so the
/// deterministic patient chunking upstream is part of the scoring contract
/// (and exactly what the batch-sensitivity diagnostic perturbs).
struct MultimodalScorer {
    image_encoder: ImageEncoder,
    tabular_encoder: TabularEncoder,
    stage: FusionStageModel,
    encoder_store: ParamStore,
    fusion_store: ParamStore,
    bundle: PreprocessorBundle,
    schema: TabularSchema,
}

impl PatientScorer for MultimodalScorer {
    fn modality(&self) -> &str {
        "multimodal"
    }

    fn score_patients(
        &self,
        patients: &[&PatientRecord],
        images: &ImageStore,
    ) -> Result<Vec<Vec<ScoredUnit>>, EvalError> {
        if patients.is_empty() {
            return Ok(Vec::new());
        }
        let rows = infer_rows(&self.bundle, patients, &self.schema)?;
        let z_patient = tabular_embeddings(&self.tabular_encoder, &self.encoder_store, &rows)
            .map_err(inference_err)?;

        let (tensors, owner, trimesters) = gather_images(patients, images)?;
        let z_image = image_embeddings(&self.image_encoder, &self.encoder_store, &tensors)
            .map_err(inference_err)?;
        let mut z_tabular = Array2::zeros((tensors.len(), z_patient.dim().1));
        for (row, &o) in owner.iter().enumerate() {
            z_tabular.row_mut(row).assign(&z_patient.row(o));
        }

        let mut g = Graph::new();
        let out = self
            .stage
            .forward(
                &mut g,
                &self.fusion_store,
                &z_image.view(),
                &z_tabular.view(),
                &mut ForwardMode::Eval,
            )
            .map_err(inference_err)?;
        let probs: Vec<f64> = g.value(out.logits).iter().map(|&v| sigmoid(v)).collect();
        Ok(group_units(patients.len(), &owner, &trimesters, &probs))
    }
}

/// Every image of a patient batch: the tensors, each tensor's owner index
/// into the batch, and each tensor's trimester tag.
type GatheredImages<'a> = (Vec<&'a ImageTensor>, Vec<usize>, Vec<u8>);

/// Every image of the patient batch, with its owner index and trimester tag.
fn gather_images<'a>(
    patients: &[&PatientRecord],
    images: &'a ImageStore,
) -> Result<GatheredImages<'a>, EvalError> {
    let mut tensors = Vec::new();
    let mut owner = Vec::new();
    let mut trimesters = Vec::new();
    for (i, patient) in patients.iter().enumerate() {
        for image_ref in &patient.image_refs {
            let tensor = images.get(&patient.patient_id, &image_ref.image_id).ok_or_else(|| {
                EvalError::Inference(format!(
                    "image `{}` of patient `{}` is not in the store",
                    image_ref.image_id, patient.patient_id
                ))
            })?;
            tensors.push(tensor);
            owner.push(i);
            trimesters.push(image_ref.trimester);
        }
    }
    Ok((tensors, owner, trimesters))
}

fn group_units(
    n_patients: usize,
    owner: &[usize],
    trimesters: &[u8],
    probs: &[f64],
) -> Vec<Vec<ScoredUnit>> {
    let mut units = vec![Vec::new(); n_patients];
    for ((&o, &t), &p) in owner.iter().zip(trimesters).zip(probs) {
        units[o].push(ScoredUnit { trimester: Some(t), prob: p });
    }
    units
}

fn infer_rows(
    bundle: &PreprocessorBundle,
    patients: &[&PatientRecord],
    schema: &TabularSchema,
) -> Result<Array2<f64>, EvalError> {
    let mut rows = Array2::zeros((patients.len(), schema.encoded_width()));
    for (i, patient) in patients.iter().enumerate() {
        let encoded = bundle.encode_infer(patient, schema).map_err(inference_err)?;
        rows.row_mut(i).assign(&Array1::from(encoded));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Embedding extraction
// ---------------------------------------------------------------------------

struct FoldEmbeddingModels {
    image_encoder: ImageEncoder,
    tabular_encoder: TabularEncoder,
    stage: Option<FusionStageModel>,
    store: ParamStore,
    bundle: PreprocessorBundle,
    schema: TabularSchema,
}

/// Embeds each patient with the models of the fold that held it out.
struct CvEmbedder<'a> {
    plan: &'a FoldPlan,
    folds: Vec<FoldEmbeddingModels>,
}

impl EmbeddingExtractor for CvEmbedder<'_> {
    fn patient_embedding(
        &self,
        patient: &PatientRecord,
        images: &ImageStore,
        tap: EmbeddingTap,
    ) -> Result<Vec<f64>, EvalError> {
        let fold = self
            .plan
            .fold_of(&patient.patient_id)
            .ok_or_else(|| EvalError::UnknownPatient(patient.patient_id.clone()))?;
        let models = &self.folds[fold];

        let patients = [patient];
        let rows = infer_rows(&models.bundle, &patients, &models.schema)?;
        if tap == EmbeddingTap::TabularEncoder {
            let z = tabular_embeddings(&models.tabular_encoder, &models.store, &rows)
                .map_err(inference_err)?;
            return Ok(z.row(0).to_vec());
        }

        let (tensors, owner, _) = gather_images(&patients, images)?;
        let z_image = image_embeddings(&models.image_encoder, &models.store, &tensors)
            .map_err(inference_err)?;
        match tap {
            EmbeddingTap::ImageEncoder => Ok(mean_rows(&z_image)),
            EmbeddingTap::Fused => {
                let stage = models.stage.as_ref().expect("fused tap loads the fusion model");
                let z_patient = tabular_embeddings(&models.tabular_encoder, &models.store, &rows)
                    .map_err(inference_err)?;
                let mut z_tabular = Array2::zeros((tensors.len(), z_patient.dim().1));
                for (row, &o) in owner.iter().enumerate() {
                    z_tabular.row_mut(row).assign(&z_patient.row(o));
                }
                let mut g = Graph::new();
                let out = stage
                    .forward(
                        &mut g,
                        &models.store,
                        &z_image.view(),
                        &z_tabular.view(),
                        &mut ForwardMode::Eval,
                    )
                    .map_err(inference_err)?;
                let fused = out.fused_mean.ok_or_else(|| {
                    EvalError::Inference(format!(
                        "the fused tap is only defined for the dual-decoder variant, \
                         this run uses `{}`",
                        stage.fusion.cfg.variant
                    ))
                })?;
                let values = g
                    .value(fused)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("(B, D) fused output")
                    .to_owned();
                Ok(mean_rows(&values))
            }
            EmbeddingTap::TabularEncoder => unreachable!("handled above"),
        }
    }
}

/// Column means: one `(D,)` embedding from `(n, D)` per-image embeddings.
/// Rows are averaged in index order; patients' image lists are fixed, so the
/// result is deterministic.
fn mean_rows(rows: &Array2<f64>) -> Vec<f64> {
    let n = rows.dim().0 as f64;
    (0..rows.dim().1)
        .map(|c| crate::util::stable_sum(&rows.column(c).to_vec()) / n)
        .collect()
}

// ---------------------------------------------------------------------------
// Small file helpers
// ---------------------------------------------------------------------------

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), source }
}

fn io_err_str(path: &Path, source: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(source.to_string()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_text(path: &Path, what: &str, hint: &str) -> Result<String, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            what: what.to_string(),
            path: path.to_path_buf(),
            hint: hint.to_string(),
        });
    }
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn save_head_checkpoint(
    head: &ClassifierHead,
    store: &ParamStore,
    schema_hash: &str,
    path: &Path,
) -> Result<(), PipelineError> {
    let own = store.subset_prefix(&format!("{}.", head.name));
    ModelCheckpoint::new(HEAD_CHECKPOINT_KIND, head, schema_hash, own).save(path)?;
    Ok(())
}
