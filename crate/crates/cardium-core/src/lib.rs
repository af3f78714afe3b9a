//! Multimodal congenital-heart-defect (CHD) detection pipeline.
//!
//! The crate implements the full desk-scale CARDIUM workflow:
//!
//! * [`schema`] / [`data`] — the clinical data model: feature schemas, per-visit
//!   clinical events, consolidated patient records, grayscale ultrasound-like
//!   images, and the on-disk dataset layout (CSV + PNG + manifest).
//! * [`synth`] — a seeded synthetic-dataset generator with planted unimodal and
//!   cross-modal signals, used for end-to-end testing of the whole pipeline.
//! * [`preprocess`] — event consolidation, category refinement (aliases + rare
//!   merge), numeric normalization, and leakage-safe weight-of-evidence (WoE)
//!   encoding of categorical features.
//! * [`nn`] — a compact reverse-mode autodiff substrate over `ndarray` (f64),
//!   with the layers, initializers and the AdamW optimizer the models need.
//! * [`encoders`] — the patch-transformer image encoder and the
//!   feature-tokenizer tabular encoder, plus classification heads and
//!   shared-space projections.
//! * [`fusion`] — the dual cross-attention decoder and its four ablation
//!   variants, all operating on the batch-as-sequence attention layout.
//! * [`train`] — weighted sampling, weighted binary cross-entropy, hard
//!   positive mining, and the staged training loop with encoder freezing.
//! * [`eval`] — stratified patient-level cross-validation, per-patient
//!   aggregation, classification metrics, trimester slices, the half-data
//!   protocol, and machine-readable metric reports.
//! * [`pipeline`] / [`config`] — run configuration and end-to-end orchestration
//!   shared by the CLI and the test suites.

pub mod config;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod schema;
pub mod synth;
pub mod train;
pub mod util;

pub use data::{ClinicalEvent, Dataset, ImageStore, ImageTensor, PatientRecord, RawValue};
pub use schema::{FeatureKind, FeatureSpec, TabularSchema};
