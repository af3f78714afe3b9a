//! Tabular feature schema: the typed description of every clinical variable.
//!
//! A [`TabularSchema`] is an ordered list of [`FeatureSpec`]s. The order is
//! contractual: encoded feature vectors, fitted preprocessor bundles and
//! trained checkpoints all refer to columns by schema position, and carry the
//! schema hash so that mismatched artifacts are rejected instead of silently
//! misaligned.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// How a clinical variable is typed, which fixes both its consolidation rule
/// and its numeric encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Present/absent flag; consolidated with any-positive, encoded as {0,1}.
    Binary,
    /// Ordered severity levels; consolidated with max, encoded by level index.
    Ordinal,
    /// Free-form category set; consolidated with set union, encoded via WoE.
    Categorical,
    /// Real-valued measurement; consolidated with a numeric policy, z-scored.
    Numerical,
}

/// Declaration of one clinical variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Ordered levels, lowest first. Required for (and only for) ordinals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal_levels: Option<Vec<String>>,
    /// Inclusive plausibility range; values outside are clipped before
    /// normalization. Only meaningful for numericals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_range: Option<(f64, f64)>,
}

impl FeatureSpec {
    pub fn binary(name: &str) -> Self {
        Self { name: name.to_string(), kind: FeatureKind::Binary, ordinal_levels: None, valid_range: None }
    }

    pub fn ordinal(name: &str, levels: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Ordinal,
            ordinal_levels: Some(levels.iter().map(|l| l.to_string()).collect()),
            valid_range: None,
        }
    }

    pub fn categorical(name: &str) -> Self {
        Self { name: name.to_string(), kind: FeatureKind::Categorical, ordinal_levels: None, valid_range: None }
    }

    pub fn numerical(name: &str, valid_range: Option<(f64, f64)>) -> Self {
        Self { name: name.to_string(), kind: FeatureKind::Numerical, ordinal_levels: None, valid_range }
    }
}

/// Errors raised while validating a schema.
#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("duplicate feature name `{0}`")]
    DuplicateName(String),
    #[error("ordinal feature `{0}` must declare at least two ordinal_levels")]
    MissingOrdinalLevels(String),
    #[error("ordinal feature `{0}` has duplicate level `{1}`")]
    DuplicateOrdinalLevel(String, String),
    #[error("feature `{0}` of kind {1:?} must not declare ordinal_levels")]
    UnexpectedOrdinalLevels(String, FeatureKind),
    #[error("feature `{0}` of kind {1:?} must not declare valid_range")]
    UnexpectedValidRange(String, FeatureKind),
    #[error("numerical feature `{0}` has invalid range: lo {1} must be < hi {2}")]
    InvalidRange(String, f64, f64),
    #[error("schema must declare at least one feature")]
    Empty,
}

/// Ordered collection of feature declarations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    features: Vec<FeatureSpec>,
}

impl TabularSchema {
    /// Builds and validates a schema. Rejects duplicate names, ordinals
    /// without levels, spurious level/range declarations, and empty ranges.
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self, SchemaError> {
        if features.is_empty() {
            return Err(SchemaError::Empty);
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &features {
            if !seen.insert(f.name.clone()) {
                return Err(SchemaError::DuplicateName(f.name.clone()));
            }
            match f.kind {
                FeatureKind::Ordinal => {
                    let levels = f
                        .ordinal_levels
                        .as_ref()
                        .ok_or_else(|| SchemaError::MissingOrdinalLevels(f.name.clone()))?;
                    if levels.len() < 2 {
                        return Err(SchemaError::MissingOrdinalLevels(f.name.clone()));
                    }
                    let mut level_seen = std::collections::BTreeSet::new();
                    for l in levels {
                        if !level_seen.insert(l.clone()) {
                            return Err(SchemaError::DuplicateOrdinalLevel(f.name.clone(), l.clone()));
                        }
                    }
                    if f.valid_range.is_some() {
                        return Err(SchemaError::UnexpectedValidRange(f.name.clone(), f.kind));
                    }
                }
                FeatureKind::Numerical => {
                    if f.ordinal_levels.is_some() {
                        return Err(SchemaError::UnexpectedOrdinalLevels(f.name.clone(), f.kind));
                    }
                    if let Some((lo, hi)) = f.valid_range {
                        // NaN bounds must fail too, so don't rewrite as `lo >= hi`.
                        #[allow(clippy::neg_cmp_op_on_partial_ord)]
                        if !(lo < hi) {
                            return Err(SchemaError::InvalidRange(f.name.clone(), lo, hi));
                        }
                    }
                }
                FeatureKind::Binary | FeatureKind::Categorical => {
                    if f.ordinal_levels.is_some() {
                        return Err(SchemaError::UnexpectedOrdinalLevels(f.name.clone(), f.kind));
                    }
                    if f.valid_range.is_some() {
                        return Err(SchemaError::UnexpectedValidRange(f.name.clone(), f.kind));
                    }
                }
            }
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Width of the encoded feature vector. Every feature — binary, ordinal,
    /// numerical, or WoE-encoded categorical — contributes exactly one column.
    pub fn encoded_width(&self) -> usize {
        self.features.len()
    }

    /// Position of a feature by name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Level index of an ordinal value, if the feature is ordinal and the
    /// level is declared.
    pub fn ordinal_index(&self, feature: &str, level: &str) -> Option<usize> {
        self.get(feature)?.ordinal_levels.as_ref()?.iter().position(|l| l == level)
    }

    /// Hex SHA-256 of the canonical JSON serialization. Stored in every
    /// derived artifact (preprocessor bundles, checkpoints, manifests) so
    /// artifacts fitted under a different schema are refused at load time.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        let parsed: TabularSchema = serde_json::from_str(json)?;
        // Re-validate: hand-written JSON may violate the invariants.
        TabularSchema::new(parsed.features).map_err(serde::de::Error::custom)
    }

    /// The default 26-variable obstetric schema used by the synthetic
    /// generator and the CLI presets: 10 numericals, 10 binaries, 3 ordinals,
    /// 3 multi-valued categorical histories.
    pub fn clinical_default() -> Self {
        let features = vec![
            FeatureSpec::numerical("maternal_age", Some((14.0, 55.0))),
            FeatureSpec::numerical("bmi", Some((13.0, 60.0))),
            FeatureSpec::numerical("systolic_bp", Some((70.0, 220.0))),
            FeatureSpec::numerical("diastolic_bp", Some((40.0, 140.0))),
            FeatureSpec::numerical("fetal_heart_rate", Some((80.0, 220.0))),
            FeatureSpec::numerical("nuchal_translucency_mm", Some((0.0, 12.0))),
            FeatureSpec::numerical("gestational_age_weeks", Some((4.0, 42.0))),
            FeatureSpec::numerical("gravidity", Some((0.0, 15.0))),
            FeatureSpec::numerical("parity", Some((0.0, 12.0))),
            FeatureSpec::numerical("hemoglobin_g_dl", Some((5.0, 20.0))),
            FeatureSpec::binary("smoking"),
            FeatureSpec::binary("alcohol_use"),
            FeatureSpec::binary("chromosomal_abnormality"),
            FeatureSpec::binary("pregestational_diabetes"),
            FeatureSpec::binary("chronic_hypertension"),
            FeatureSpec::binary("ivf_conception"),
            FeatureSpec::binary("consanguinity"),
            FeatureSpec::binary("teratogen_exposure"),
            FeatureSpec::binary("first_trimester_infection"),
            FeatureSpec::binary("folic_acid_supplementation"),
            FeatureSpec::ordinal("risk_level", &["low", "intermediate", "high"]),
            FeatureSpec::ordinal("obesity_grade", &["none", "grade_1", "grade_2", "grade_3"]),
            FeatureSpec::ordinal("prenatal_care_adequacy", &["inadequate", "intermediate", "adequate"]),
            FeatureSpec::categorical("pathological_history"),
            FeatureSpec::categorical("hereditary_history"),
            FeatureSpec::categorical("pharmacological_history"),
        ];
        Self::new(features).expect("default schema is valid")
    }
}
