//! Tabular preprocessing: consolidation, category refinement, normalization,
//! leakage-safe WoE encoding, and the fitted-preprocessor bundle.
//!
//! The stages compose in a fixed order:
//!
//! 1. [`consolidate`] — collapse a patient's dated events into one row.
//! 2. [`CategoryRefiner`] — canonicalize category spellings via an alias map
//!    and merge rare categories into `"Others"`.
//! 3. [`NumericNormalizer`] — clip numericals to their valid range and
//!    z-score them (ordinals optionally too, on their level indices).
//! 4. [`woe::WoeEncoder`] — cross-fold weight-of-evidence encoding of
//!    categorical features; see the module docs for the leakage guarantees.
//!
//! Everything the stages learn is learned on the *fitting split only* and is
//! captured in a [`PreprocessorBundle`] that serializes to JSON bit-exactly.

pub mod woe;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CellValue, ClinicalEvent, PatientRecord, RawValue};
use crate::schema::{FeatureKind, TabularSchema};
use crate::util::{population_std, stable_mean};

pub use woe::{WoeConfig, WoeEncoder, WoeError};

/// Catch-all category that rare categories are merged into.
pub const OTHERS_CATEGORY: &str = "Others";

/// How multiple numeric observations of the same feature are summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NumericPolicy {
    #[default]
    Mean,
    Median,
    /// Value of the latest event; ties on date resolve to the later row.
    LastByDate,
}

/// Consolidation policy; binary/ordinal/categorical rules are fixed
/// (any-positive / max level / union), only the numeric summary varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConsolidationPolicy {
    pub numeric: NumericPolicy,
}

/// Errors raised during consolidation.
#[derive(Debug, Error, PartialEq)]
pub enum ConsolidateError {
    #[error("event references unknown feature `{feature}`")]
    UnknownFeature { feature: String },
    #[error("feature `{feature}`: unknown ordinal level `{level}`")]
    UnknownOrdinalLevel { feature: String, level: String },
    #[error("feature `{feature}`: {detail}")]
    TypeConflict { feature: String, detail: String },
}

fn parse_flag(feature: &str, value: &RawValue) -> Result<bool, ConsolidateError> {
    match value {
        RawValue::Number(x) if *x == 0.0 => Ok(false),
        RawValue::Number(x) if *x == 1.0 => Ok(true),
        RawValue::Number(x) => Err(ConsolidateError::TypeConflict {
            feature: feature.to_string(),
            detail: format!("binary value must be 0 or 1, got {x}"),
        }),
        RawValue::Text(s) => match s.trim() {
            "0" | "false" => Ok(false),
            "1" | "true" => Ok(true),
            other => Err(ConsolidateError::TypeConflict {
                feature: feature.to_string(),
                detail: format!("binary value must be 0/1/true/false, got `{other}`"),
            }),
        },
    }
}

fn parse_number(feature: &str, value: &RawValue) -> Result<f64, ConsolidateError> {
    match value {
        RawValue::Number(x) if x.is_finite() => Ok(*x),
        RawValue::Number(x) => Err(ConsolidateError::TypeConflict {
            feature: feature.to_string(),
            detail: format!("numeric value must be finite, got {x}"),
        }),
        RawValue::Text(s) => s.trim().parse::<f64>().map_err(|_| ConsolidateError::TypeConflict {
            feature: feature.to_string(),
            detail: format!("numeric value expected, got `{s}`"),
        }),
    }
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Collapses a patient's events into one row, feature by feature:
/// binaries with any-positive, ordinals with the maximum level, categoricals
/// with set union (cells may carry several categories joined by `;`), and
/// numericals with the policy's summary. Features never observed are
/// [`CellValue::Missing`].
pub fn consolidate(
    events: &[ClinicalEvent],
    schema: &TabularSchema,
    policy: &ConsolidationPolicy,
) -> Result<BTreeMap<String, CellValue>, ConsolidateError> {
    for event in events {
        for feature in event.values.keys() {
            if schema.get(feature).is_none() {
                return Err(ConsolidateError::UnknownFeature { feature: feature.clone() });
            }
        }
    }

    let mut row = BTreeMap::new();
    for spec in schema.features() {
        let observed: Vec<(usize, i64, &RawValue)> = events
            .iter()
            .enumerate()
            .filter_map(|(idx, e)| e.values.get(&spec.name).map(|v| (idx, e.event_date, v)))
            .collect();
        if observed.is_empty() {
            row.insert(spec.name.clone(), CellValue::Missing);
            continue;
        }
        let cell = match spec.kind {
            FeatureKind::Binary => {
                let mut any = false;
                for (_, _, value) in &observed {
                    any |= parse_flag(&spec.name, value)?;
                }
                CellValue::Flag(any)
            }
            FeatureKind::Ordinal => {
                let levels = spec.ordinal_levels.as_ref().expect("validated ordinal");
                let mut max_index: Option<usize> = None;
                for (_, _, value) in &observed {
                    let text = match value {
                        RawValue::Text(s) => s.trim().to_string(),
                        RawValue::Number(x) => {
                            return Err(ConsolidateError::TypeConflict {
                                feature: spec.name.clone(),
                                detail: format!("ordinal expects a level name, got number {x}"),
                            })
                        }
                    };
                    let index = levels.iter().position(|l| *l == text).ok_or_else(|| {
                        ConsolidateError::UnknownOrdinalLevel { feature: spec.name.clone(), level: text.clone() }
                    })?;
                    max_index = Some(max_index.map_or(index, |m| m.max(index)));
                }
                CellValue::Level(levels[max_index.expect("non-empty observations")].clone())
            }
            FeatureKind::Categorical => {
                let mut union = BTreeSet::new();
                for (_, _, value) in &observed {
                    let text = match value {
                        RawValue::Text(s) => s.clone(),
                        RawValue::Number(x) => {
                            return Err(ConsolidateError::TypeConflict {
                                feature: spec.name.clone(),
                                detail: format!("categorical expects text, got number {x}"),
                            })
                        }
                    };
                    for part in text.split(';') {
                        let part = part.trim();
                        if !part.is_empty() {
                            union.insert(part.to_string());
                        }
                    }
                }
                CellValue::Categories(union)
            }
            FeatureKind::Numerical => {
                let mut values = Vec::with_capacity(observed.len());
                for (_, _, value) in &observed {
                    values.push(parse_number(&spec.name, value)?);
                }
                let summary = match policy.numeric {
                    NumericPolicy::Mean => stable_mean(&values),
                    NumericPolicy::Median => median(&mut values.clone()),
                    NumericPolicy::LastByDate => {
                        // Latest date wins; among equal dates the later row wins.
                        let (_, _, value) = observed
                            .iter()
                            .max_by_key(|(idx, date, _)| (*date, *idx))
                            .expect("non-empty observations");
                        parse_number(&spec.name, value)?
                    }
                };
                CellValue::Number(summary)
            }
        };
        row.insert(spec.name.clone(), cell);
    }
    Ok(row)
}

/// Alias map: per feature, raw spelling → canonical category.
pub type CategoryAliasMap = BTreeMap<String, BTreeMap<String, String>>;

/// Canonicalizes and rare-merges categorical cells. The set of categories to
/// keep is decided on the fitting split only; everything else maps to
/// [`OTHERS_CATEGORY`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRefiner {
    pub alias_map: CategoryAliasMap,
    pub min_count: usize,
    /// Per categorical feature: categories seen at least `min_count` times in
    /// the fitting split (post-aliasing).
    pub keep: BTreeMap<String, BTreeSet<String>>,
}

impl CategoryRefiner {
    fn canonical(alias_map: &CategoryAliasMap, feature: &str, raw: &str) -> String {
        alias_map
            .get(feature)
            .and_then(|m| m.get(raw))
            .cloned()
            .unwrap_or_else(|| raw.to_string())
    }

    /// Counts post-alias category occurrences over the fitting rows (one
    /// count per row containing the category) and keeps those with
    /// `count >= min_count`.
    pub fn fit(
        rows: &[&BTreeMap<String, CellValue>],
        schema: &TabularSchema,
        alias_map: CategoryAliasMap,
        min_count: usize,
    ) -> Self {
        let mut keep: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for spec in schema.features() {
            if spec.kind != FeatureKind::Categorical {
                continue;
            }
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for row in rows {
                if let Some(CellValue::Categories(set)) = row.get(&spec.name) {
                    let canonicals: BTreeSet<String> =
                        set.iter().map(|c| Self::canonical(&alias_map, &spec.name, c)).collect();
                    for c in canonicals {
                        *counts.entry(c).or_insert(0) += 1;
                    }
                }
            }
            let mut kept: BTreeSet<String> =
                counts.into_iter().filter(|(_, n)| *n >= min_count).map(|(c, _)| c).collect();
            // "Others" is always a legal output category, so refinement is
            // idempotent even when the merged bucket itself is rare.
            kept.insert(OTHERS_CATEGORY.to_string());
            keep.insert(spec.name.clone(), kept);
        }
        Self { alias_map, min_count, keep }
    }

    /// Applies aliasing + rare merge to one row (non-categorical cells pass
    /// through untouched).
    pub fn apply(&self, row: &BTreeMap<String, CellValue>) -> BTreeMap<String, CellValue> {
        let mut out = row.clone();
        for (feature, kept) in &self.keep {
            if let Some(CellValue::Categories(set)) = row.get(feature) {
                let refined: BTreeSet<String> = set
                    .iter()
                    .map(|c| {
                        let canonical = Self::canonical(&self.alias_map, feature, c);
                        if kept.contains(&canonical) {
                            canonical
                        } else {
                            OTHERS_CATEGORY.to_string()
                        }
                    })
                    .collect();
                out.insert(feature.clone(), CellValue::Categories(refined));
            }
        }
        out
    }
}

/// Per-feature z-scoring statistics, fit on the fitting split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericNormalizer {
    /// Feature name → (mean, population std) of clipped non-missing values.
    pub stats: BTreeMap<String, (f64, f64)>,
    /// Whether ordinal level indices are z-scored too.
    pub zscore_ordinals: bool,
}

impl NumericNormalizer {
    fn clipped(spec_range: Option<(f64, f64)>, value: f64) -> f64 {
        match spec_range {
            Some((lo, hi)) => value.clamp(lo, hi),
            None => value,
        }
    }

    /// Collects clipped non-missing values per numerical feature (and level
    /// indices per ordinal when `zscore_ordinals`), storing mean and
    /// population std.
    pub fn fit(
        rows: &[&BTreeMap<String, CellValue>],
        schema: &TabularSchema,
        zscore_ordinals: bool,
    ) -> Self {
        let mut stats = BTreeMap::new();
        for spec in schema.features() {
            let values: Vec<f64> = match spec.kind {
                FeatureKind::Numerical => rows
                    .iter()
                    .filter_map(|row| match row.get(&spec.name) {
                        Some(CellValue::Number(x)) => Some(Self::clipped(spec.valid_range, *x)),
                        _ => None,
                    })
                    .collect(),
                FeatureKind::Ordinal if zscore_ordinals => rows
                    .iter()
                    .filter_map(|row| match row.get(&spec.name) {
                        Some(CellValue::Level(level)) => {
                            schema.ordinal_index(&spec.name, level).map(|i| i as f64)
                        }
                        _ => None,
                    })
                    .collect(),
                _ => continue,
            };
            if values.is_empty() {
                // Nothing observed on the fitting split: encode everything to 0.
                stats.insert(spec.name.clone(), (0.0, 0.0));
            } else {
                stats.insert(spec.name.clone(), (stable_mean(&values), population_std(&values)));
            }
        }
        Self { stats, zscore_ordinals }
    }

    /// Z-scores one value. Constant features (std = 0) map to 0.
    pub fn apply(&self, feature: &str, value: f64, valid_range: Option<(f64, f64)>) -> f64 {
        let (mean, std) = self.stats.get(feature).copied().unwrap_or((0.0, 0.0));
        if std == 0.0 {
            return 0.0;
        }
        (Self::clipped(valid_range, value) - mean) / std
    }
}

/// Which WoE table a row should be encoded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Training row in the given inner fold: use that fold's table.
    TrainFold(usize),
    /// Unseen row: use the average of the per-fold tables.
    Infer,
}

/// Encodes one refined row into the fixed-width feature vector
/// (schema order, one column per feature):
/// binaries → {0,1}, ordinals → (optionally z-scored) level index,
/// numericals → z-score, categoricals → sum of WoE values.
/// Missing values encode to 0 everywhere.
pub fn encode_row(
    row: &BTreeMap<String, CellValue>,
    schema: &TabularSchema,
    normalizer: &NumericNormalizer,
    woe: &WoeEncoder,
    mode: EncodeMode,
) -> Result<Vec<f64>, PreprocessError> {
    let mut out = Vec::with_capacity(schema.encoded_width());
    for spec in schema.features() {
        let cell = row.get(&spec.name).unwrap_or(&CellValue::Missing);
        let value = match (spec.kind, cell) {
            (_, CellValue::Missing) => 0.0,
            (FeatureKind::Binary, CellValue::Flag(b)) => {
                if *b {
                    1.0
                } else {
                    0.0
                }
            }
            (FeatureKind::Ordinal, CellValue::Level(level)) => {
                let index = schema.ordinal_index(&spec.name, level).ok_or_else(|| {
                    PreprocessError::Consolidate(ConsolidateError::UnknownOrdinalLevel {
                        feature: spec.name.clone(),
                        level: level.clone(),
                    })
                })? as f64;
                if normalizer.zscore_ordinals {
                    normalizer.apply(&spec.name, index, None)
                } else {
                    index
                }
            }
            (FeatureKind::Numerical, CellValue::Number(x)) => {
                normalizer.apply(&spec.name, *x, spec.valid_range)
            }
            (FeatureKind::Categorical, CellValue::Categories(set)) => {
                if set.is_empty() {
                    0.0
                } else {
                    woe.encode(&spec.name, set, mode)?
                }
            }
            (kind, cell) => {
                return Err(PreprocessError::CellKindMismatch {
                    feature: spec.name.clone(),
                    kind,
                    cell: format!("{cell:?}"),
                })
            }
        };
        out.push(value);
    }
    Ok(out)
}

/// Errors from fitting or applying the preprocessor.
#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error(transparent)]
    Consolidate(#[from] ConsolidateError),
    #[error(transparent)]
    Woe(#[from] WoeError),
    #[error("feature `{feature}` ({kind:?}) holds incompatible cell {cell}")]
    CellKindMismatch { feature: String, kind: FeatureKind, cell: String },
    #[error("patient `{0}` was not part of the fitting split")]
    UnknownTrainPatient(String),
    #[error("schema hash mismatch: bundle was fitted under {found}, current schema is {expected}")]
    SchemaHashMismatch { found: String, expected: String },
    #[error("bundle deserialization failed: {0}")]
    Deserialize(String),
}

/// Tunables for fitting a [`PreprocessorBundle`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub policy: ConsolidationPolicy,
    pub alias_map: CategoryAliasMap,
    /// Categories observed fewer than this many times in the fitting split
    /// merge into `"Others"`.
    pub rare_min_count: usize,
    pub zscore_ordinals: bool,
    pub woe: WoeConfig,
    pub seed: u64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            policy: ConsolidationPolicy::default(),
            alias_map: CategoryAliasMap::new(),
            rare_min_count: 4,
            zscore_ordinals: true,
            woe: WoeConfig::default(),
            seed: 0,
        }
    }
}

/// Everything learned from the fitting split, serializable to JSON with
/// bit-exact round-tripping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorBundle {
    pub format_version: u32,
    pub schema_hash: String,
    pub options: PreprocessOptionsRecord,
    pub refiner: CategoryRefiner,
    pub normalizer: NumericNormalizer,
    pub woe: WoeEncoder,
    /// Inner-fold index per fitting-split patient.
    pub fold_assignment: BTreeMap<String, usize>,
}

/// The options echo stored inside the bundle (alias map lives in the refiner).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptionsRecord {
    pub policy: ConsolidationPolicy,
    pub rare_min_count: usize,
    pub zscore_ordinals: bool,
    pub woe: WoeConfig,
    pub seed: u64,
}

pub const BUNDLE_VERSION: u32 = 1;

impl PreprocessorBundle {
    /// Fits refinement, normalization and WoE on the fitting split.
    pub fn fit(
        records: &[&PatientRecord],
        schema: &TabularSchema,
        options: &PreprocessOptions,
    ) -> Result<Self, PreprocessError> {
        let raw_rows: Vec<&BTreeMap<String, CellValue>> = records.iter().map(|r| &r.row).collect();
        let refiner =
            CategoryRefiner::fit(&raw_rows, schema, options.alias_map.clone(), options.rare_min_count);
        let refined: Vec<BTreeMap<String, CellValue>> =
            raw_rows.iter().map(|row| refiner.apply(row)).collect();
        let refined_refs: Vec<&BTreeMap<String, CellValue>> = refined.iter().collect();
        let normalizer = NumericNormalizer::fit(&refined_refs, schema, options.zscore_ordinals);
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
        let assignment = woe::assign_folds(&labels, options.woe.folds, options.seed);
        let woe = WoeEncoder::fit_with_assignment(&refined_refs, &labels, schema, &options.woe, &assignment)?;
        let fold_assignment = records
            .iter()
            .zip(assignment.iter())
            .map(|(r, fold)| (r.patient_id.clone(), *fold))
            .collect();
        Ok(Self {
            format_version: BUNDLE_VERSION,
            schema_hash: schema.hash(),
            options: PreprocessOptionsRecord {
                policy: options.policy,
                rare_min_count: options.rare_min_count,
                zscore_ordinals: options.zscore_ordinals,
                woe: options.woe.clone(),
                seed: options.seed,
            },
            refiner,
            normalizer,
            woe,
            fold_assignment,
        })
    }

    /// Encodes a fitting-split record using its inner-fold WoE table.
    pub fn encode_train(
        &self,
        record: &PatientRecord,
        schema: &TabularSchema,
    ) -> Result<Vec<f64>, PreprocessError> {
        let fold = *self
            .fold_assignment
            .get(&record.patient_id)
            .ok_or_else(|| PreprocessError::UnknownTrainPatient(record.patient_id.clone()))?;
        let refined = self.refiner.apply(&record.row);
        encode_row(&refined, schema, &self.normalizer, &self.woe, EncodeMode::TrainFold(fold))
    }

    /// Encodes an unseen record with the fold-averaged WoE tables.
    pub fn encode_infer(
        &self,
        record: &PatientRecord,
        schema: &TabularSchema,
    ) -> Result<Vec<f64>, PreprocessError> {
        let refined = self.refiner.apply(&record.row);
        encode_row(&refined, schema, &self.normalizer, &self.woe, EncodeMode::Infer)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn from_json(json: &str, schema: &TabularSchema) -> Result<Self, PreprocessError> {
        let bundle: PreprocessorBundle =
            serde_json::from_str(json).map_err(|e| PreprocessError::Deserialize(e.to_string()))?;
        let expected = schema.hash();
        if bundle.schema_hash != expected {
            return Err(PreprocessError::SchemaHashMismatch { found: bundle.schema_hash, expected });
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests;
