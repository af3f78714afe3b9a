//! Cross-validated evaluation: patient-level stratified folds, per-patient
//! probability aggregation, positive-class metrics with rank-based AUC,
//! per-trimester slices, half-data subsampling, and a batch-sensitivity
//! diagnostic. Reports serialize to stable JSON plus a flat CSV mirror.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, ImageStore, PatientRecord};
use crate::util::{derive_rng, stable_mean};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot aggregate an empty probability list")]
    EmptyAggregation,
    #[error("expected {expected} {what}, got {got}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("stratified folding needs at least {need} patients of class {class}, got {have}")]
    TooFewPatients { class: u8, need: usize, have: usize },
    #[error("fold plan has {folds} folds but {models} models were supplied")]
    FoldModelMismatch { folds: usize, models: usize },
    #[error("patient `{0}` is in the fold plan but not in the dataset")]
    UnknownPatient(String),
    #[error("unknown embedding tap `{0}` (expected tabular-encoder, image-encoder or fused)")]
    UnknownTap(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("inference failed: {0}")]
    Inference(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Fold plan
// ---------------------------------------------------------------------------

/// A deterministic patient-level partition into `k` folds. Because the
/// assignment is keyed by patient, every image of a patient lands in the
/// patient's fold by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.assignment.get(patient_id).copied()
    }

    /// Patients of the given fold, sorted by id.
    pub fn test_patients(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Patients of every fold except the given one, sorted by id.
    pub fn train_patients(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Stratified patient-level folding: each class is shuffled deterministically
/// and dealt round-robin, so per-fold class counts deviate from proportional
/// by at most one patient.
pub fn make_folds(records: &[PatientRecord], k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for record in records {
        by_class[usize::from(record.label)].push(&record.patient_id);
    }
    for (class, ids) in by_class.iter().enumerate() {
        if ids.len() < k {
            return Err(EvalError::TooFewPatients { class: class as u8, need: k, have: ids.len() });
        }
    }

    let mut rng = derive_rng(seed, "folds");
    let mut assignment = BTreeMap::new();
    for ids in &mut by_class {
        // Record order must not matter: fix the shuffle's input order first.
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            assignment.insert(id.to_string(), i % k);
        }
    }
    Ok(FoldPlan { k, assignment, seed })
}

// ---------------------------------------------------------------------------
// Patient-level aggregation
// ---------------------------------------------------------------------------

/// How a patient's per-image probabilities collapse into one probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Arithmetic mean of the probabilities (the default).
    MeanProb,
    /// Mean in logit space, mapped back through the sigmoid.
    MeanLogit,
}

/// Arithmetic mean of a patient's image probabilities; the decision is
/// `mean >= threshold` downstream.
pub fn aggregate_patient(image_probs: &[f64]) -> Result<f64, EvalError> {
    aggregate_patient_with(image_probs, Aggregation::MeanProb)
}

pub fn aggregate_patient_with(image_probs: &[f64], agg: Aggregation) -> Result<f64, EvalError> {
    if image_probs.is_empty() {
        return Err(EvalError::EmptyAggregation);
    }
    // Sort before summing so the result is identical for any image order.
    let mut sorted = image_probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    match agg {
        Aggregation::MeanProb => Ok(stable_mean(&sorted)),
        Aggregation::MeanLogit => {
            let logits: Vec<f64> = sorted
                .iter()
                .map(|&p| {
                    let p = p.clamp(1e-12, 1.0 - 1e-12);
                    (p / (1.0 - p)).ln()
                })
                .collect();
            Ok(crate::util::sigmoid(stable_mean(&logits)))
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Positive-class metrics for one set of patient-level predictions.
/// `None` marks an undefined metric (empty denominator or single-class
/// ground truth for AUC).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub n_patients: usize,
    pub n_positive: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

/// Precision/recall/F1 for the positive class at the given threshold, plus
/// the rank-statistic AUC (probability a random positive outranks a random
/// negative, ties counted one half).
pub fn compute_metrics(
    patient_probs: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<MetricEntry, EvalError> {
    if patient_probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            what: "labels",
            expected: patient_probs.len(),
            got: labels.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in patient_probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, denom: usize| (denom > 0).then(|| num as f64 / denom as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(MetricEntry {
        n_patients: labels.len(),
        n_positive: tp + fn_,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
        precision,
        recall,
        f1,
        auc: midrank_auc(patient_probs, labels),
    })
}

/// AUC via midranks: ties within the score ranking contribute one half.
/// `None` when either class is absent.
fn midrank_auc(probs: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        // The tie group [i, j) shares the average of its 1-based ranks.
        let mut j = i + 1;
        while j < order.len() && probs[order[j]] == probs[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let n_pos_f = n_pos as f64;
    Some((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

// ---------------------------------------------------------------------------
// Cross-validated evaluation
// ---------------------------------------------------------------------------

/// One scored unit for a patient: the trimester the score came from (`None`
/// for modalities that score the patient as a whole) and the positive-class
/// probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUnit {
    pub trimester: Option<u8>,
    pub prob: f64,
}

/// A trained model able to score test patients. Implementations must be
/// deterministic and independent of how patients are batched together.
pub trait PatientScorer {
    /// Report label for the modality: "multimodal", "image" or "tabular".
    fn modality(&self) -> &str;

    /// Scores one batch of patients, returning the scored units of each
    /// patient in batch order.
    fn score_patients(
        &self,
        patients: &[&PatientRecord],
        images: &ImageStore,
    ) -> Result<Vec<Vec<ScoredUnit>>, EvalError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Patients per inference batch.
    pub eval_batch: usize,
    /// Decision threshold on the aggregated patient probability.
    pub threshold: f64,
    pub aggregation: Aggregation,
    /// Number of seeded batch shufflings for the sensitivity diagnostic.
    pub sensitivity_shuffles: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_batch: 8,
            threshold: 0.5,
            aggregation: Aggregation::MeanProb,
            sensitivity_shuffles: 5,
            seed: 42,
        }
    }
}

/// Mean and population standard deviation of the per-fold values that were
/// defined, with the contributing fold count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
}

/// `None` when no fold had the metric defined.
pub fn aggregate_stat(values: &[f64]) -> Option<AggregateStat> {
    if values.is_empty() {
        return None;
    }
    let mean = stable_mean(values);
    let variance =
        stable_mean(&values.iter().map(|v| (v - mean) * (v - mean)).collect::<Vec<_>>());
    Some(AggregateStat { mean, std: variance.sqrt(), folds: values.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateBlock {
    pub f1: Option<AggregateStat>,
    pub precision: Option<AggregateStat>,
    pub recall: Option<AggregateStat>,
    pub auc: Option<AggregateStat>,
}

fn aggregate_block(entries: &[&MetricEntry]) -> AggregateBlock {
    let collect = |pick: fn(&MetricEntry) -> Option<f64>| {
        aggregate_stat(&entries.iter().filter_map(|e| pick(e)).collect::<Vec<_>>())
    };
    AggregateBlock {
        f1: collect(|e| e.f1),
        precision: collect(|e| e.precision),
        recall: collect(|e| e.recall),
        auc: collect(|e| e.auc),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub metrics: MetricEntry,
    /// Per-trimester sub-reports keyed "t1"/"t2"/"t3"; a trimester with no
    /// scoreable patients in this fold is absent.
    pub slices: BTreeMap<String, MetricEntry>,
    /// Max |Δ patient probability| across the seeded batch shufflings.
    pub batch_sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Worst batch-sensitivity drift over all folds.
    pub batch_sensitivity_max_drift: f64,
    pub sensitivity_shuffles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// Free-form run label (ablation tag, etc.); defaults to the modality.
    pub label: String,
    pub modality: String,
    pub threshold: f64,
    pub folds: Vec<FoldReport>,
    pub aggregate: AggregateBlock,
    /// Per-trimester aggregates across folds, keyed "t1"/"t2"/"t3".
    pub slices: BTreeMap<String, AggregateBlock>,
    pub diagnostics: Diagnostics,
}

impl MetricsReport {
    pub const SCHEMA_VERSION: u32 = 1;

    /// Stable, pretty-printed JSON bytes (newline-terminated). Identical
    /// inputs produce identical bytes.
    pub fn to_json_bytes(&self) -> Result<Vec<u8>, EvalError> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json_bytes()?)
            .map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
    }

    /// Flat CSV mirror: one row per (scope, slice) for tabulation.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "label",
            "modality",
            "scope",
            "slice",
            "n_patients",
            "f1",
            "precision",
            "recall",
            "auc",
            "f1_std",
            "precision_std",
            "recall_std",
            "auc_std",
            "batch_sensitivity",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let stat_mean = |s: &Option<AggregateStat>| opt(s.as_ref().map(|s| s.mean));
        let stat_std = |s: &Option<AggregateStat>| opt(s.as_ref().map(|s| s.std));

        for fold in &self.folds {
            let scope = format!("fold-{}", fold.fold);
            let mut rows: Vec<(&str, &MetricEntry)> = vec![("all", &fold.metrics)];
            rows.extend(fold.slices.iter().map(|(k, v)| (k.as_str(), v)));
            for (slice, entry) in rows {
                w.write_record([
                    self.label.as_str(),
                    self.modality.as_str(),
                    &scope,
                    slice,
                    &entry.n_patients.to_string(),
                    &opt(entry.f1),
                    &opt(entry.precision),
                    &opt(entry.recall),
                    &opt(entry.auc),
                    "",
                    "",
                    "",
                    "",
                    &if slice == "all" { fold.batch_sensitivity.to_string() } else { String::new() },
                ])?;
            }
        }
        let mut blocks: Vec<(&str, &AggregateBlock)> = vec![("all", &self.aggregate)];
        blocks.extend(self.slices.iter().map(|(k, v)| (k.as_str(), v)));
        for (slice, block) in blocks {
            w.write_record([
                self.label.as_str(),
                self.modality.as_str(),
                "aggregate",
                slice,
                "",
                &stat_mean(&block.f1),
                &stat_mean(&block.precision),
                &stat_mean(&block.recall),
                &stat_mean(&block.auc),
                &stat_std(&block.f1),
                &stat_std(&block.precision),
                &stat_std(&block.recall),
                &stat_std(&block.auc),
                &if slice == "all" {
                    self.diagnostics.batch_sensitivity_max_drift.to_string()
                } else {
                    String::new()
                },
            ])?;
        }
        w.flush().map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
        Ok(())
    }
}

/// Scores patients in deterministic chunks of `eval_batch`.
fn score_in_batches(
    scorer: &dyn PatientScorer,
    patients: &[&PatientRecord],
    images: &ImageStore,
    eval_batch: usize,
) -> Result<Vec<Vec<ScoredUnit>>, EvalError> {
    let mut all = Vec::with_capacity(patients.len());
    for chunk in patients.chunks(eval_batch) {
        let units = scorer.score_patients(chunk, images)?;
        if units.len() != chunk.len() {
            return Err(EvalError::LengthMismatch {
                what: "scored patients",
                expected: chunk.len(),
                got: units.len(),
            });
        }
        all.extend(units);
    }
    Ok(all)
}

/// The scored units backing one patient's probability in trimester slice
/// `t`: units from that trimester, or — for whole-patient scorers with no
/// per-trimester units — every unit, when the patient has images in `t`.
fn slice_probs(patient: &PatientRecord, units: &[ScoredUnit], t: u8) -> Option<Vec<f64>> {
    let from_t: Vec<f64> =
        units.iter().filter(|u| u.trimester == Some(t)).map(|u| u.prob).collect();
    if !from_t.is_empty() {
        return Some(from_t);
    }
    if units.iter().all(|u| u.trimester.is_none()) && patient.trimesters.contains(&t) {
        return Some(units.iter().map(|u| u.prob).collect());
    }
    None
}

/// Evaluates one trained scorer per fold on that fold's test patients.
///
/// Per fold: patients are sorted by id and scored in fixed batches, image
/// probabilities are aggregated per patient, and metrics are computed
/// overall and per trimester. Aggregates are the mean ± population std over
/// the folds where each metric was defined. The batch-sensitivity diagnostic
/// rescores each fold under seeded patient shufflings and reports the worst
/// probability drift (it is reported, never asserted).
pub fn evaluate_cv(
    scorers: &[&dyn PatientScorer],
    data: &Dataset,
    plan: &FoldPlan,
    cfg: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    if scorers.len() != plan.k {
        return Err(EvalError::FoldModelMismatch { folds: plan.k, models: scorers.len() });
    }
    if cfg.eval_batch == 0 {
        return Err(EvalError::InvalidConfig("eval_batch must be >= 1".to_string()));
    }
    if cfg.sensitivity_shuffles == 0 {
        return Err(EvalError::InvalidConfig("sensitivity_shuffles must be >= 1".to_string()));
    }
    let by_id: BTreeMap<&str, &PatientRecord> =
        data.records.iter().map(|r| (r.patient_id.as_str(), r)).collect();

    let mut folds = Vec::with_capacity(plan.k);
    for (fold, &scorer) in scorers.iter().enumerate() {
        let patients: Vec<&PatientRecord> = plan
            .test_patients(fold)
            .into_iter()
            .map(|id| by_id.get(id).copied().ok_or_else(|| EvalError::UnknownPatient(id.into())))
            .collect::<Result<_, _>>()?;
        let labels: Vec<u8> = patients.iter().map(|p| p.label).collect();

        let units = score_in_batches(scorer, &patients, &data.images, cfg.eval_batch)?;
        let probs: Vec<f64> = units
            .iter()
            .map(|u| {
                let values: Vec<f64> = u.iter().map(|s| s.prob).collect();
                aggregate_patient_with(&values, cfg.aggregation)
            })
            .collect::<Result<_, _>>()?;
        let metrics = compute_metrics(&probs, &labels, cfg.threshold)?;

        let mut slices = BTreeMap::new();
        for t in 1u8..=3 {
            let mut slice_p = Vec::new();
            let mut slice_y = Vec::new();
            for (patient, punits) in patients.iter().zip(&units) {
                if let Some(values) = slice_probs(patient, punits, t) {
                    slice_p.push(aggregate_patient_with(&values, cfg.aggregation)?);
                    slice_y.push(patient.label);
                }
            }
            if !slice_p.is_empty() {
                slices.insert(format!("t{t}"), compute_metrics(&slice_p, &slice_y, cfg.threshold)?);
            }
        }

        let mut drift: f64 = 0.0;
        for s in 0..cfg.sensitivity_shuffles {
            let mut shuffled: Vec<usize> = (0..patients.len()).collect();
            shuffled.shuffle(&mut derive_rng(cfg.seed, &format!("eval-shuffle-f{fold}-s{s}")));
            let reordered: Vec<&PatientRecord> = shuffled.iter().map(|&i| patients[i]).collect();
            let reunits = score_in_batches(scorer, &reordered, &data.images, cfg.eval_batch)?;
            for (&orig_pos, reunit) in shuffled.iter().zip(&reunits) {
                let values: Vec<f64> = reunit.iter().map(|s| s.prob).collect();
                let p = aggregate_patient_with(&values, cfg.aggregation)?;
                drift = drift.max((p - probs[orig_pos]).abs());
            }
        }

        folds.push(FoldReport { fold, metrics, slices, batch_sensitivity: drift });
    }

    let aggregate = aggregate_block(&folds.iter().map(|f| &f.metrics).collect::<Vec<_>>());
    let mut slice_blocks = BTreeMap::new();
    for t in 1u8..=3 {
        let key = format!("t{t}");
        let entries: Vec<&MetricEntry> = folds.iter().filter_map(|f| f.slices.get(&key)).collect();
        if !entries.is_empty() {
            slice_blocks.insert(key, aggregate_block(&entries));
        }
    }
    let max_drift =
        folds.iter().map(|f| f.batch_sensitivity).fold(0.0, f64::max);

    let modality = scorers[0].modality().to_string();
    Ok(MetricsReport {
        schema_version: MetricsReport::SCHEMA_VERSION,
        label: modality.clone(),
        modality,
        threshold: cfg.threshold,
        folds,
        aggregate,
        slices: slice_blocks,
        diagnostics: Diagnostics {
            batch_sensitivity_max_drift: max_drift,
            sensitivity_shuffles: cfg.sensitivity_shuffles,
        },
    })
}

// ---------------------------------------------------------------------------
// Half-data subsampling
// ---------------------------------------------------------------------------

/// Keeps 50% of the training patients per (class, trimester-profile) stratum,
/// rounded half-up, so singleton strata keep their patient. The selection is
/// deterministic per seed. Test splits are never touched: this function only
/// sees the training side.
pub fn half_data_subsample<'a>(
    train_split: &[&'a PatientRecord],
    seed: u64,
) -> Vec<&'a PatientRecord> {
    let mut strata: BTreeMap<(u8, Vec<u8>), Vec<&PatientRecord>> = BTreeMap::new();
    for &record in train_split {
        let profile: Vec<u8> = record.trimesters.iter().copied().collect();
        strata.entry((record.label, profile)).or_default().push(record);
    }
    let mut rng = derive_rng(seed, "half-data");
    let mut kept: Vec<&PatientRecord> = Vec::new();
    for members in strata.values_mut() {
        members.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        members.shuffle(&mut rng);
        let keep = members.len().div_ceil(2);
        kept.extend(members[..keep].iter().copied());
    }
    kept.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    kept
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

/// Which representation to export per patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingTap {
    TabularEncoder,
    ImageEncoder,
    Fused,
}

impl EmbeddingTap {
    pub const ALL: [EmbeddingTap; 3] =
        [EmbeddingTap::TabularEncoder, EmbeddingTap::ImageEncoder, EmbeddingTap::Fused];

    pub fn as_str(&self) -> &'static str {
        match self {
            EmbeddingTap::TabularEncoder => "tabular-encoder",
            EmbeddingTap::ImageEncoder => "image-encoder",
            EmbeddingTap::Fused => "fused",
        }
    }
}

impl std::fmt::Display for EmbeddingTap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EmbeddingTap {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EmbeddingTap::ALL
            .iter()
            .find(|t| t.as_str() == s)
            .copied()
            .ok_or_else(|| EvalError::UnknownTap(s.to_string()))
    }
}

/// A trained model able to produce one embedding vector per patient at each
/// tap (for image-borne taps, the per-image vectors averaged per patient).
pub trait EmbeddingExtractor {
    fn patient_embedding(
        &self,
        patient: &PatientRecord,
        images: &ImageStore,
        tap: EmbeddingTap,
    ) -> Result<Vec<f64>, EvalError>;
}

/// Writes a CSV of `patient_id, label, e0..e{D-1}` — one row per patient,
/// sorted by patient id. Returns the number of data rows written.
pub fn export_embeddings(
    extractor: &dyn EmbeddingExtractor,
    data: &Dataset,
    tap: EmbeddingTap,
    path: &Path,
) -> Result<usize, EvalError> {
    let mut records: Vec<&PatientRecord> = data.records.iter().collect();
    records.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));

    let mut w = csv::Writer::from_path(path)?;
    let mut dim: Option<usize> = None;
    let mut rows = 0usize;
    for record in records {
        let embedding = extractor.patient_embedding(record, &data.images, tap)?;
        let d = match dim {
            Some(d) => d,
            None => {
                let mut header = vec!["patient_id".to_string(), "label".to_string()];
                header.extend((0..embedding.len()).map(|i| format!("e{i}")));
                w.write_record(&header)?;
                dim = Some(embedding.len());
                embedding.len()
            }
        };
        if embedding.len() != d {
            return Err(EvalError::Inference(format!(
                "embedding width changed from {d} to {} at patient {}",
                embedding.len(),
                record.patient_id
            )));
        }
        let mut row = vec![record.patient_id.clone(), record.label.to_string()];
        row.extend(embedding.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
        rows += 1;
    }
    w.flush().map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{FeatureSpec, TabularSchema};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn record(id: &str, label: u8, trimesters: &[u8]) -> PatientRecord {
        PatientRecord {
            patient_id: id.to_string(),
            label,
            chd_type: (label == 1).then(|| "vsd".to_string()),
            trimesters: trimesters.iter().copied().collect::<BTreeSet<u8>>(),
            row: BTreeMap::new(),
            image_refs: Vec::new(),
        }
    }

    fn cohort(n_pos: usize, n_neg: usize) -> Vec<PatientRecord> {
        let mut records = Vec::new();
        for i in 0..n_pos {
            records.push(record(&format!("p{i:04}"), 1, &[1 + (i % 3) as u8]));
        }
        for i in 0..n_neg {
            records.push(record(&format!("n{i:04}"), 0, &[1 + (i % 3) as u8]));
        }
        records
    }

    fn class_counts(plan: &FoldPlan, records: &[PatientRecord]) -> Vec<[usize; 2]> {
        let mut counts = vec![[0usize; 2]; plan.k];
        for r in records {
            counts[plan.fold_of(&r.patient_id).unwrap()][usize::from(r.label)] += 1;
        }
        counts
    }

    #[test]
    fn folds_split_divisible_classes_exactly() {
        let records = cohort(9, 90);
        let plan = make_folds(&records, 3, 7).unwrap();
        for counts in class_counts(&plan, &records) {
            assert_eq!(counts, [30, 3]);
        }
        assert_eq!(plan.assignment.len(), 99);
        // Every patient sits in exactly one fold, and train/test partition.
        for fold in 0..3 {
            let test = plan.test_patients(fold);
            let train = plan.train_patients(fold);
            assert_eq!(test.len() + train.len(), 99);
            assert!(test.iter().all(|id| !train.contains(id)));
        }
    }

    #[test]
    fn folds_spread_remainders_within_one_patient() {
        let records = cohort(10, 13);
        let plan = make_folds(&records, 3, 1).unwrap();
        let counts = class_counts(&plan, &records);
        let mut pos: Vec<usize> = counts.iter().map(|c| c[1]).collect();
        let mut neg: Vec<usize> = counts.iter().map(|c| c[0]).collect();
        pos.sort_unstable();
        neg.sort_unstable();
        assert_eq!(pos, vec![3, 3, 4]);
        assert_eq!(neg, vec![4, 4, 5]);
    }

    #[test]
    fn folds_are_seeded_and_order_independent() {
        let mut records = cohort(6, 21);
        let a = make_folds(&records, 3, 42).unwrap();
        let b = make_folds(&records, 3, 42).unwrap();
        assert_eq!(a, b);
        let c = make_folds(&records, 3, 43).unwrap();
        assert_ne!(a.assignment, c.assignment);
        // Shuffling the record order must not change the plan.
        records.reverse();
        let d = make_folds(&records, 3, 42).unwrap();
        assert_eq!(a.assignment, d.assignment);
    }

    #[test]
    fn folds_reject_classes_thinner_than_k() {
        let records = cohort(2, 10);
        match make_folds(&records, 3, 0).unwrap_err() {
            EvalError::TooFewPatients { class, need, have } => {
                assert_eq!((class, need, have), (1, 3, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn fold_invariants_hold_for_random_cohorts(
            n_pos in 3usize..40,
            n_neg in 3usize..40,
            seed in 0u64..500,
        ) {
            let records = cohort(n_pos, n_neg);
            let plan = make_folds(&records, 3, seed).unwrap();
            prop_assert_eq!(plan.assignment.len(), n_pos + n_neg);
            let counts = class_counts(&plan, &records);
            for class in 0..2 {
                let per_fold: Vec<usize> = counts.iter().map(|c| c[class]).collect();
                let max = per_fold.iter().max().unwrap();
                let min = per_fold.iter().min().unwrap();
                prop_assert!(max - min <= 1, "class {class} counts {per_fold:?}");
            }
        }
    }

    #[test]
    fn patient_probability_is_the_image_mean() {
        assert!((aggregate_patient(&[0.9, 0.7, 0.8]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(aggregate_patient(&[0.4]).unwrap(), 0.4);
        let forward = aggregate_patient(&[0.1, 0.5, 0.9, 0.3]).unwrap();
        let permuted = aggregate_patient(&[0.9, 0.3, 0.1, 0.5]).unwrap();
        assert_eq!(forward.to_bits(), permuted.to_bits());
        assert!(matches!(aggregate_patient(&[]), Err(EvalError::EmptyAggregation)));
    }

    #[test]
    fn logit_mean_aggregation_differs_from_probability_mean() {
        let probs = [0.9, 0.5];
        let prob_mean = aggregate_patient_with(&probs, Aggregation::MeanProb).unwrap();
        let logit_mean = aggregate_patient_with(&probs, Aggregation::MeanLogit).unwrap();
        assert!((prob_mean - 0.7).abs() < 1e-15);
        let expected = crate::util::sigmoid((9.0f64.ln() + 0.0) / 2.0);
        assert!((logit_mean - expected).abs() < 1e-12);
        assert!(logit_mean != prob_mean);
        // Saturated probabilities stay finite through the logit path.
        let saturated = aggregate_patient_with(&[0.0, 1.0], Aggregation::MeanLogit).unwrap();
        assert!(saturated.is_finite());
    }

    #[test]
    fn metric_definitions_match_hand_counts() {
        // TP=3, FP=1, FN=1, TN=2 at threshold 0.5.
        let probs = [0.9, 0.8, 0.7, 0.6, 0.2, 0.1, 0.3];
        let labels = [1u8, 1, 1, 0, 1, 0, 0];
        let m = compute_metrics(&probs, &labels, 0.5).unwrap();
        assert_eq!(
            (m.true_positives, m.false_positives, m.false_negatives, m.true_negatives),
            (3, 1, 1, 2)
        );
        assert_eq!(m.precision, Some(0.75));
        assert_eq!(m.recall, Some(0.75));
        assert!((m.f1.unwrap() - 0.75).abs() < 1e-12);
        assert_eq!((m.n_patients, m.n_positive), (7, 4));
    }

    #[test]
    fn auc_matches_hand_counted_pairs_and_ties_count_half() {
        let m = compute_metrics(&[0.9, 0.8, 0.4, 0.3], &[1, 0, 1, 0], 0.5).unwrap();
        assert!((m.auc.unwrap() - 0.75).abs() < 1e-12);

        // Perfect separation.
        let m = compute_metrics(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!(m.auc, Some(1.0));

        // A tied positive/negative pair contributes one half.
        let m = compute_metrics(&[0.5, 0.5], &[1, 0], 0.5).unwrap();
        assert!((m.auc.unwrap() - 0.5).abs() < 1e-12);

        // Single-class ground truth: AUC undefined, F1 family intact.
        let m = compute_metrics(&[0.9, 0.4], &[1, 1], 0.5).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.recall, Some(0.5));
        assert!(m.f1.is_some());

        // Misaligned inputs are rejected.
        assert!(matches!(
            compute_metrics(&[0.5], &[1, 0], 0.5),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    /// Brute-force pairwise AUC: 1 per positive>negative pair, ½ per tie.
    fn brute_force_auc(probs: &[f64], labels: &[u8]) -> Option<f64> {
        let pos: Vec<f64> =
            probs.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&p, _)| p).collect();
        let neg: Vec<f64> =
            probs.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(&p, _)| p).collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut score = 0.0;
        for &p in &pos {
            for &n in &neg {
                score += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(score / (pos.len() * neg.len()) as f64)
    }

    proptest! {
        /// The midrank AUC equals brute-force pairwise counting, including
        /// heavy ties (scores live on a coarse grid).
        #[test]
        fn auc_equals_the_pairwise_oracle(
            data in proptest::collection::vec((0u8..=1, 0u32..=10), 2..120)
                .prop_filter("both classes", |v| {
                    v.iter().any(|(y, _)| *y == 1) && v.iter().any(|(y, _)| *y == 0)
                })
        ) {
            let labels: Vec<u8> = data.iter().map(|(y, _)| *y).collect();
            let probs: Vec<f64> = data.iter().map(|(_, q)| *q as f64 / 10.0).collect();
            let fast = compute_metrics(&probs, &labels, 0.5).unwrap().auc.unwrap();
            let slow = brute_force_auc(&probs, &labels).unwrap();
            prop_assert!((fast - slow).abs() < 1e-12, "midrank {fast} vs brute {slow}");
        }

        /// F1 equals the harmonic mean of its own precision and recall
        /// whenever all three are defined.
        #[test]
        fn f1_is_the_harmonic_mean_of_its_own_parts(
            data in proptest::collection::vec((0u8..=1, 0.0f64..1.0), 1..80)
        ) {
            let labels: Vec<u8> = data.iter().map(|(y, _)| *y).collect();
            let probs: Vec<f64> = data.iter().map(|(_, p)| *p).collect();
            let m = compute_metrics(&probs, &labels, 0.5).unwrap();
            match (m.precision, m.recall, m.f1) {
                (Some(p), Some(r), Some(f1)) => {
                    let expected = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
                    prop_assert!((f1 - expected).abs() < 1e-12);
                }
                (Some(_), Some(_), None) => {
                    prop_assert!(false, "f1 must be defined when precision and recall are");
                }
                (None, _, f1) | (_, None, f1) => prop_assert_eq!(f1, None),
            }
        }
    }

    #[test]
    fn aggregate_stat_uses_the_population_std() {
        let stat = aggregate_stat(&[0.7, 0.8, 0.9]).unwrap();
        assert!((stat.mean - 0.8).abs() < 1e-12);
        assert!((stat.std - 0.081_649_658_092_772_6).abs() < 1e-12);
        assert_eq!(stat.folds, 3);
        assert_eq!(aggregate_stat(&[]), None);
    }

    // -- evaluate_cv fixtures ------------------------------------------------

    fn mini_dataset(records: Vec<PatientRecord>) -> Dataset {
        Dataset {
            schema: TabularSchema::new(vec![FeatureSpec::binary("x")]).unwrap(),
            records,
            events: Vec::new(),
            images: ImageStore::new(),
        }
    }

    /// Deterministic, batch-independent scorer: probability encodes the
    /// label with a per-patient wobble, one unit per trimester.
    struct LabelScorer;

    fn id_wobble(id: &str) -> f64 {
        let h = id.bytes().fold(0u64, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u64));
        (h % 100) as f64 / 1000.0 // 0.000..0.099
    }

    impl PatientScorer for LabelScorer {
        fn modality(&self) -> &str {
            "multimodal"
        }

        fn score_patients(
            &self,
            patients: &[&PatientRecord],
            _images: &ImageStore,
        ) -> Result<Vec<Vec<ScoredUnit>>, EvalError> {
            Ok(patients
                .iter()
                .map(|p| {
                    let base = if p.label == 1 { 0.8 } else { 0.2 };
                    p.trimesters
                        .iter()
                        .map(|&t| ScoredUnit {
                            trimester: Some(t),
                            prob: base + id_wobble(&p.patient_id),
                        })
                        .collect()
                })
                .collect())
        }
    }

    #[test]
    fn cross_validation_reports_folds_aggregates_and_slices() {
        let records = cohort(6, 18);
        let plan = make_folds(&records, 3, 5).unwrap();
        let data = mini_dataset(records);
        let cfg = EvalConfig { eval_batch: 4, ..EvalConfig::default() };
        let scorers: Vec<&dyn PatientScorer> = vec![&LabelScorer, &LabelScorer, &LabelScorer];
        let report = evaluate_cv(&scorers, &data, &plan, &cfg).unwrap();

        assert_eq!(report.schema_version, 1);
        assert_eq!(report.modality, "multimodal");
        assert_eq!(report.folds.len(), 3);
        for fold in &report.folds {
            assert_eq!(fold.metrics.n_patients, 8);
            assert_eq!(fold.metrics.n_positive, 2);
            // The scorer is perfectly separable, so every fold is perfect.
            assert_eq!(fold.metrics.f1, Some(1.0));
            assert_eq!(fold.metrics.auc, Some(1.0));
            // Batch composition cannot matter for this scorer.
            assert_eq!(fold.batch_sensitivity, 0.0);
        }
        let f1 = report.aggregate.f1.as_ref().unwrap();
        assert_eq!((f1.mean, f1.std, f1.folds), (1.0, 0.0, 3));
        assert_eq!(report.diagnostics.batch_sensitivity_max_drift, 0.0);
        // Every patient has exactly one trimester, so all three slices exist.
        assert_eq!(report.slices.len(), 3);

        // The aggregate F1 is exactly the fold-level statistic.
        let fold_f1: Vec<f64> = report.folds.iter().filter_map(|f| f.metrics.f1).collect();
        assert_eq!(report.aggregate.f1, aggregate_stat(&fold_f1));
    }

    #[test]
    fn identical_runs_produce_identical_report_bytes() {
        let records = cohort(5, 13);
        let plan = make_folds(&records, 3, 9).unwrap();
        let data = mini_dataset(records);
        let cfg = EvalConfig { eval_batch: 3, ..EvalConfig::default() };
        let scorers: Vec<&dyn PatientScorer> = vec![&LabelScorer, &LabelScorer, &LabelScorer];
        let a = evaluate_cv(&scorers, &data, &plan, &cfg).unwrap();
        let b = evaluate_cv(&scorers, &data, &plan, &cfg).unwrap();
        assert_eq!(a.to_json_bytes().unwrap(), b.to_json_bytes().unwrap());
    }

    /// Scores trimester 1 exactly wrong and trimester 2 exactly right.
    struct SplitPersonalityScorer;

    impl PatientScorer for SplitPersonalityScorer {
        fn modality(&self) -> &str {
            "multimodal"
        }

        fn score_patients(
            &self,
            patients: &[&PatientRecord],
            _images: &ImageStore,
        ) -> Result<Vec<Vec<ScoredUnit>>, EvalError> {
            Ok(patients
                .iter()
                .map(|p| {
                    vec![
                        ScoredUnit {
                            trimester: Some(1),
                            prob: if p.label == 1 { 0.1 } else { 0.9 },
                        },
                        ScoredUnit {
                            trimester: Some(2),
                            prob: if p.label == 1 { 0.9 } else { 0.1 },
                        },
                    ]
                })
                .collect())
        }
    }

    #[test]
    fn trimester_slices_use_only_their_own_scores() {
        let mut records = Vec::new();
        for i in 0..4 {
            records.push(record(&format!("p{i}"), 1, &[1, 2]));
        }
        for i in 0..8 {
            records.push(record(&format!("n{i}"), 0, &[1, 2]));
        }
        let plan = make_folds(&records, 3, 2).unwrap();
        let data = mini_dataset(records);
        let scorers: Vec<&dyn PatientScorer> =
            vec![&SplitPersonalityScorer, &SplitPersonalityScorer, &SplitPersonalityScorer];
        let report = evaluate_cv(&scorers, &data, &plan, &EvalConfig::default()).unwrap();

        for fold in &report.folds {
            let t1 = &fold.slices["t1"];
            let t2 = &fold.slices["t2"];
            assert_eq!(t1.f1, Some(0.0), "inverted scores give zero F1");
            assert_eq!(t2.f1, Some(1.0), "clean scores give perfect F1");
            assert!(!fold.slices.contains_key("t3"));
        }
        assert!(report.slices.contains_key("t1") && !report.slices.contains_key("t3"));
    }

    /// Whole-patient scorer (no per-trimester units), like a tabular model.
    struct WholePatientScorer;

    impl PatientScorer for WholePatientScorer {
        fn modality(&self) -> &str {
            "tabular"
        }

        fn score_patients(
            &self,
            patients: &[&PatientRecord],
            _images: &ImageStore,
        ) -> Result<Vec<Vec<ScoredUnit>>, EvalError> {
            Ok(patients
                .iter()
                .map(|p| {
                    vec![ScoredUnit {
                        trimester: None,
                        prob: if p.label == 1 { 0.9 } else { 0.1 },
                    }]
                })
                .collect())
        }
    }

    #[test]
    fn whole_patient_scores_slice_by_the_patients_trimesters() {
        let mut records = Vec::new();
        for i in 0..3 {
            records.push(record(&format!("p{i}"), 1, &[1]));
        }
        for i in 0..6 {
            records.push(record(&format!("n{i}"), 0, if i < 3 { &[1] } else { &[2] }));
        }
        let plan = make_folds(&records, 3, 3).unwrap();
        let data = mini_dataset(records);
        let scorers: Vec<&dyn PatientScorer> =
            vec![&WholePatientScorer, &WholePatientScorer, &WholePatientScorer];
        let report = evaluate_cv(&scorers, &data, &plan, &EvalConfig::default()).unwrap();

        assert_eq!(report.modality, "tabular");
        let t1_patients: usize = report.folds.iter().map(|f| f.slices["t1"].n_patients).sum();
        let t2_patients: usize =
            report.folds.iter().filter_map(|f| f.slices.get("t2")).map(|e| e.n_patients).sum();
        assert_eq!(t1_patients, 6, "three positives + three negatives have trimester 1");
        assert_eq!(t2_patients, 3, "three negatives have trimester 2");
    }

    /// A deliberately batch-dependent scorer: the whole batch inherits a
    /// wobble from the first patient in it.
    struct BatchLeakyScorer;

    impl PatientScorer for BatchLeakyScorer {
        fn modality(&self) -> &str {
            "multimodal"
        }

        fn score_patients(
            &self,
            patients: &[&PatientRecord],
            _images: &ImageStore,
        ) -> Result<Vec<Vec<ScoredUnit>>, EvalError> {
            let leak = id_wobble(&patients[0].patient_id);
            Ok(patients
                .iter()
                .map(|p| {
                    let base = if p.label == 1 { 0.6 } else { 0.4 };
                    vec![ScoredUnit { trimester: Some(1), prob: base + leak }]
                })
                .collect())
        }
    }

    #[test]
    fn batch_sensitivity_diagnostic_detects_leaky_batching() {
        let records = cohort(4, 12);
        let plan = make_folds(&records, 3, 11).unwrap();
        let data = mini_dataset(records);
        let cfg = EvalConfig { eval_batch: 2, ..EvalConfig::default() };
        let scorers: Vec<&dyn PatientScorer> =
            vec![&BatchLeakyScorer, &BatchLeakyScorer, &BatchLeakyScorer];
        let report = evaluate_cv(&scorers, &data, &plan, &cfg).unwrap();
        assert!(
            report.diagnostics.batch_sensitivity_max_drift > 0.0,
            "shuffled batches change this scorer's outputs"
        );
    }

    #[test]
    fn fold_and_model_counts_must_match() {
        let records = cohort(3, 6);
        let plan = make_folds(&records, 3, 0).unwrap();
        let data = mini_dataset(records);
        let scorers: Vec<&dyn PatientScorer> = vec![&LabelScorer, &LabelScorer];
        match evaluate_cv(&scorers, &data, &plan, &EvalConfig::default()).unwrap_err() {
            EvalError::FoldModelMismatch { folds, models } => {
                assert_eq!((folds, models), (3, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn report_csv_mirror_has_one_row_per_scope_and_slice() {
        let records = cohort(3, 9);
        let plan = make_folds(&records, 3, 4).unwrap();
        let data = mini_dataset(records);
        let scorers: Vec<&dyn PatientScorer> = vec![&LabelScorer, &LabelScorer, &LabelScorer];
        let report = evaluate_cv(&scorers, &data, &plan, &EvalConfig::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let expected_rows = report
            .folds
            .iter()
            .map(|f| 1 + f.slices.len())
            .sum::<usize>()
            + 1
            + report.slices.len();
        assert_eq!(lines.len(), 1 + expected_rows, "header plus one row per scope/slice");
        assert!(lines[0].starts_with("label,modality,scope,slice"));
        assert!(lines.iter().skip(1).all(|l| l.starts_with("multimodal,multimodal,")));
    }

    // -- half-data subsampling ------------------------------------------------

    #[test]
    fn half_data_halves_every_stratum() {
        // One trimester profile per class, so the strata divide exactly.
        let mut records = Vec::new();
        for i in 0..40 {
            records.push(record(&format!("p{i:04}"), 1, &[2]));
        }
        for i in 0..400 {
            records.push(record(&format!("n{i:04}"), 0, &[2]));
        }
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let kept = half_data_subsample(&refs, 17);
        let n_pos = kept.iter().filter(|r| r.label == 1).count();
        assert_eq!(kept.len(), 220);
        assert_eq!(n_pos, 20);

        // Same seed reproduces the identical subset; a different seed varies.
        let again = half_data_subsample(&refs, 17);
        let ids = |v: &[&PatientRecord]| {
            v.iter().map(|r| r.patient_id.clone()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&kept), ids(&again));
        assert_ne!(ids(&kept), ids(&half_data_subsample(&refs, 18)));
    }

    #[test]
    fn half_data_rounds_half_up_and_keeps_singletons() {
        let mut records = Vec::new();
        // Stratum (1, [1]): five members -> keeps three (round half-up).
        for i in 0..5 {
            records.push(record(&format!("a{i}"), 1, &[1]));
        }
        // Stratum (1, [1,2]): singleton -> kept.
        records.push(record("solo", 1, &[1, 2]));
        // Stratum (0, [2]): four members -> keeps two.
        for i in 0..4 {
            records.push(record(&format!("b{i}"), 0, &[2]));
        }
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let kept = half_data_subsample(&refs, 1);
        let count = |label: u8, profile: &[u8]| {
            kept.iter()
                .filter(|r| {
                    r.label == label
                        && r.trimesters.iter().copied().collect::<Vec<u8>>() == profile
                })
                .count()
        };
        assert_eq!(count(1, &[1]), 3);
        assert_eq!(count(1, &[1, 2]), 1);
        assert_eq!(count(0, &[2]), 2);
        // Output is a sorted subset of the input.
        let kept_ids: Vec<&str> = kept.iter().map(|r| r.patient_id.as_str()).collect();
        let mut sorted = kept_ids.clone();
        sorted.sort_unstable();
        assert_eq!(kept_ids, sorted);
    }

    // -- embedding export -----------------------------------------------------

    struct MockExtractor {
        dim: usize,
    }

    impl EmbeddingExtractor for MockExtractor {
        fn patient_embedding(
            &self,
            patient: &PatientRecord,
            _images: &ImageStore,
            tap: EmbeddingTap,
        ) -> Result<Vec<f64>, EvalError> {
            let offset = match tap {
                EmbeddingTap::TabularEncoder => 0.0,
                EmbeddingTap::ImageEncoder => 100.0,
                EmbeddingTap::Fused => 200.0,
            };
            Ok((0..self.dim).map(|i| offset + id_wobble(&patient.patient_id) + i as f64).collect())
        }
    }

    #[test]
    fn embedding_export_writes_one_row_per_patient() {
        let data = mini_dataset(cohort(3, 7));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fused.csv");
        let extractor = MockExtractor { dim: 4 };
        let rows = export_embeddings(&extractor, &data, EmbeddingTap::Fused, &path).unwrap();
        assert_eq!(rows, 10);

        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[0], "patient_id,label,e0,e1,e2,e3");
        // Sorted by patient id, labels faithful to ground truth.
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[0], "n0000");
        assert_eq!(first[1], "0");
        let last: Vec<&str> = lines[10].split(',').collect();
        assert_eq!(last[0], "p0002");
        assert_eq!(last[1], "1");

        // Re-export is byte-identical.
        let path2 = dir.path().join("fused2.csv");
        export_embeddings(&extractor, &data, EmbeddingTap::Fused, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn embedding_tap_names_round_trip() {
        for tap in EmbeddingTap::ALL {
            assert_eq!(tap.as_str().parse::<EmbeddingTap>().unwrap(), tap);
            let json = serde_json::to_string(&tap).unwrap();
            assert_eq!(serde_json::from_str::<EmbeddingTap>(&json).unwrap(), tap);
        }
        assert!(matches!("nope".parse::<EmbeddingTap>(), Err(EvalError::UnknownTap(_))));
    }
}
