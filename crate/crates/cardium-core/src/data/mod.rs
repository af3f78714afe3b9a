//! Clinical data model: events, consolidated patient records, and images.
//!
//! The unit of prediction is the *patient*. Each patient carries
//! 1. a consolidated tabular row (built from one or more raw
//!    [`ClinicalEvent`]s by the consolidation rules in [`crate::preprocess`]),
//! 2. one or more grayscale ultrasound-style images, each tagged with the
//!    trimester it was acquired in, and
//! 3. a binary CHD label, plus the defect type for positives.

mod io;

pub use io::{load_dataset, save_dataset, DatasetManifest};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::TabularSchema;

/// A raw value as it appears in one clinical event: free text or a number.
/// Typed interpretation (binary / ordinal / categorical / numerical) happens
/// at consolidation time against the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Number(f64),
    Text(String),
}

impl RawValue {
    pub fn text(s: &str) -> Self {
        RawValue::Text(s.to_string())
    }
}

/// One dated visit/observation for a patient. `values` is partial: features
/// not mentioned by the event are simply absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub patient_id: String,
    /// Days since an arbitrary epoch; only the order matters.
    pub event_date: i64,
    pub values: BTreeMap<String, RawValue>,
}

/// A consolidated per-patient cell value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellValue {
    Missing,
    /// Binary flag (any-positive across events).
    Flag(bool),
    /// Ordinal level name (the maximum level observed).
    Level(String),
    /// Numeric summary (mean/median/last-by-date per policy).
    Number(f64),
    /// Union of observed categories.
    Categories(BTreeSet<String>),
}

impl CellValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, CellValue::Missing)
            | matches!(self, CellValue::Categories(set) if set.is_empty())
    }
}

/// Reference to one stored image, tagged with its acquisition trimester.
/// The trimester is encoded in the image id itself (`t<1|2|3>_<seq>`), so the
/// on-disk store stays a plain `<patient_id>/<image_id>.png` tree.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub trimester: u8,
}

impl ImageRef {
    /// Builds a reference with the canonical `t<k>_<seq>` id.
    pub fn new(trimester: u8, seq: usize) -> Self {
        Self { image_id: format!("t{trimester}_{seq:03}"), trimester }
    }

    /// Parses the trimester tag out of an image id.
    pub fn parse(image_id: &str) -> Result<Self, DataError> {
        let bytes = image_id.as_bytes();
        if bytes.len() >= 3 && bytes[0] == b't' && bytes[2] == b'_' {
            let trimester = (bytes[1] as char).to_digit(10).unwrap_or(0) as u8;
            if (1..=3).contains(&trimester) {
                return Ok(Self { image_id: image_id.to_string(), trimester });
            }
        }
        Err(DataError::UntaggedImageId { image_id: image_id.to_string() })
    }
}

/// One grayscale image as a `(channels, height, width)` tensor with values
/// in `[0, 1]`. Values are kept on the 8-bit grid (`k/255`) so an image is
/// bit-identical whether used in memory or round-tripped through PNG.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self, DataError> {
        let (c, h, w) = data.dim();
        if c != 1 {
            return Err(DataError::UnsupportedChannels { channels: c });
        }
        if h == 0 || w == 0 {
            return Err(DataError::EmptyImage);
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(DataError::PixelOutOfRange);
        }
        Ok(Self { data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Snaps every pixel to the nearest 8-bit grid point `k/255`.
    pub fn quantize_u8(mut self) -> Self {
        self.data.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        self
    }
}

/// In-memory image store keyed by `(patient_id, image_id)`; iteration order
/// is sorted, which keeps every traversal deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageStore {
    images: BTreeMap<(String, String), ImageTensor>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, patient_id: &str, image_id: &str, image: ImageTensor) -> Result<(), DataError> {
        let key = (patient_id.to_string(), image_id.to_string());
        if self.images.contains_key(&key) {
            return Err(DataError::DuplicateImage {
                patient_id: patient_id.to_string(),
                image_id: image_id.to_string(),
            });
        }
        self.images.insert(key, image);
        Ok(())
    }

    pub fn get(&self, patient_id: &str, image_id: &str) -> Option<&ImageTensor> {
        self.images.get(&(patient_id.to_string(), image_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &ImageTensor)> {
        self.images.iter()
    }

    /// Number of images stored per patient, sorted by patient id.
    pub fn counts_by_patient(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for (patient, _) in self.images.keys() {
            *counts.entry(patient.clone()).or_insert(0) += 1;
        }
        counts
    }
}

/// Fully consolidated record for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    /// 0 = no CHD, 1 = CHD.
    pub label: u8,
    /// Defect type; present exactly when `label == 1`.
    pub chd_type: Option<String>,
    /// Trimesters the patient has images in; non-empty subset of {1,2,3}.
    pub trimesters: BTreeSet<u8>,
    /// Consolidated tabular row keyed by feature name.
    pub row: BTreeMap<String, CellValue>,
    /// Images belonging to this patient; non-empty.
    pub image_refs: Vec<ImageRef>,
}

impl PatientRecord {
    /// Checks the record's structural invariants against a schema.
    pub fn validate(&self, schema: &TabularSchema) -> Result<(), DataError> {
        let pid = &self.patient_id;
        if pid.is_empty() {
            return Err(DataError::InvalidRecord { patient_id: pid.clone(), reason: "empty patient_id".into() });
        }
        if self.label > 1 {
            return Err(DataError::InvalidRecord {
                patient_id: pid.clone(),
                reason: format!("label must be 0 or 1, got {}", self.label),
            });
        }
        match (self.label, &self.chd_type) {
            (1, None) => {
                return Err(DataError::InvalidRecord {
                    patient_id: pid.clone(),
                    reason: "positive record is missing chd_type".into(),
                })
            }
            (0, Some(t)) => {
                return Err(DataError::InvalidRecord {
                    patient_id: pid.clone(),
                    reason: format!("negative record must not carry chd_type (got `{t}`)"),
                })
            }
            _ => {}
        }
        if self.trimesters.is_empty() || self.trimesters.iter().any(|t| !(1..=3).contains(t)) {
            return Err(DataError::InvalidRecord {
                patient_id: pid.clone(),
                reason: format!("trimesters must be a non-empty subset of {{1,2,3}}, got {:?}", self.trimesters),
            });
        }
        if self.image_refs.is_empty() {
            return Err(DataError::InvalidRecord { patient_id: pid.clone(), reason: "no images".into() });
        }
        let image_trimesters: BTreeSet<u8> = self.image_refs.iter().map(|r| r.trimester).collect();
        if image_trimesters != self.trimesters {
            return Err(DataError::InvalidRecord {
                patient_id: pid.clone(),
                reason: format!(
                    "trimesters {:?} must equal the set of image trimesters {:?}",
                    self.trimesters, image_trimesters
                ),
            });
        }
        let mut seen = BTreeSet::new();
        for r in &self.image_refs {
            if !seen.insert(&r.image_id) {
                return Err(DataError::DuplicateImage {
                    patient_id: pid.clone(),
                    image_id: r.image_id.clone(),
                });
            }
        }
        for name in self.row.keys() {
            if schema.index_of(name).is_none() {
                return Err(DataError::UnknownFeature { name: name.clone(), line: None });
            }
        }
        Ok(())
    }

    /// Image refs the patient has in the given trimester.
    pub fn images_in_trimester(&self, trimester: u8) -> Vec<&ImageRef> {
        self.image_refs.iter().filter(|r| r.trimester == trimester).collect()
    }
}

/// A complete dataset: schema, consolidated records, the raw events they were
/// consolidated from, and the image store.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: TabularSchema,
    pub records: Vec<PatientRecord>,
    pub events: Vec<ClinicalEvent>,
    pub images: ImageStore,
}

impl Dataset {
    /// Validates every record plus cross-references between records, events
    /// and the image store. Returns all violations at once.
    pub fn validate(&self) -> Result<(), Vec<DataError>> {
        let mut errors = Vec::new();
        let mut ids = BTreeSet::new();
        for record in &self.records {
            if !ids.insert(record.patient_id.clone()) {
                errors.push(DataError::InvalidRecord {
                    patient_id: record.patient_id.clone(),
                    reason: "duplicate patient_id".into(),
                });
            }
            if let Err(e) = record.validate(&self.schema) {
                errors.push(e);
            }
            for image_ref in &record.image_refs {
                if self.images.get(&record.patient_id, &image_ref.image_id).is_none() {
                    errors.push(DataError::MissingImageFile {
                        patient_id: record.patient_id.clone(),
                        image_id: image_ref.image_id.clone(),
                    });
                }
            }
        }
        for event in &self.events {
            if !ids.contains(&event.patient_id) {
                errors.push(DataError::InvalidRecord {
                    patient_id: event.patient_id.clone(),
                    reason: "event references unknown patient".into(),
                });
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.label == 1).count()
    }
}

/// Errors for record validation and dataset IO.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("unknown feature `{name}`{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    UnknownFeature { name: String, line: Option<u64> },
    #[error("missing image file for patient `{patient_id}`, image `{image_id}`")]
    MissingImageFile { patient_id: String, image_id: String },
    #[error("duplicate image `{image_id}` for patient `{patient_id}`")]
    DuplicateImage { patient_id: String, image_id: String },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("invalid record for patient `{patient_id}`: {reason}")]
    InvalidRecord { patient_id: String, reason: String },
    #[error("image id `{image_id}` lacks a trimester tag (expected `t<1|2|3>_<seq>`)")]
    UntaggedImageId { image_id: String },
    #[error("image must have exactly 1 channel, got {channels}")]
    UnsupportedChannels { channels: usize },
    #[error("image has zero height or width")]
    EmptyImage,
    #[error("image pixels must be finite and within [0, 1]")]
    PixelOutOfRange,
    #[error("failed to decode image {path}: {reason}")]
    ImageDecode { path: String, reason: String },
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("schema hash mismatch: manifest has {found}, current schema is {expected}")]
    SchemaHashMismatch { found: String, expected: String },
    #[error("consolidation failed: {0}")]
    Consolidation(#[from] crate::preprocess::ConsolidateError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_schema() -> TabularSchema {
        TabularSchema::new(vec![
            crate::schema::FeatureSpec::numerical("age", None),
            crate::schema::FeatureSpec::binary("smoker"),
        ])
        .unwrap()
    }

    fn valid_record() -> PatientRecord {
        PatientRecord {
            patient_id: "p001".into(),
            label: 1,
            chd_type: Some("ventricular_septal_defect".into()),
            trimesters: BTreeSet::from([2]),
            row: BTreeMap::from([
                ("age".to_string(), CellValue::Number(31.0)),
                ("smoker".to_string(), CellValue::Flag(false)),
            ]),
            image_refs: vec![ImageRef::new(2, 0)],
        }
    }

    #[test]
    fn valid_record_passes_validation() {
        valid_record().validate(&tiny_schema()).unwrap();
    }

    #[test]
    fn positive_without_chd_type_rejected() {
        let mut record = valid_record();
        record.chd_type = None;
        let err = record.validate(&tiny_schema()).unwrap_err();
        assert!(err.to_string().contains("missing chd_type"), "got: {err}");
    }

    #[test]
    fn negative_with_chd_type_rejected() {
        let mut record = valid_record();
        record.label = 0;
        let err = record.validate(&tiny_schema()).unwrap_err();
        assert!(err.to_string().contains("must not carry chd_type"), "got: {err}");
    }

    #[test]
    fn empty_image_list_rejected() {
        let mut record = valid_record();
        record.image_refs.clear();
        record.trimesters = BTreeSet::from([2]);
        let err = record.validate(&tiny_schema()).unwrap_err();
        assert!(err.to_string().contains("no images"), "got: {err}");
    }

    #[test]
    fn trimester_set_must_match_image_tags() {
        let mut record = valid_record();
        record.trimesters = BTreeSet::from([1, 2]);
        let err = record.validate(&tiny_schema()).unwrap_err();
        assert!(err.to_string().contains("must equal the set of image trimesters"), "got: {err}");
    }

    #[test]
    fn unknown_feature_in_row_rejected() {
        let mut record = valid_record();
        record.row.insert("mystery".into(), CellValue::Number(1.0));
        let err = record.validate(&tiny_schema()).unwrap_err();
        assert!(matches!(err, DataError::UnknownFeature { .. }), "got: {err}");
    }

    #[test]
    fn image_ref_parses_trimester_tag() {
        let r = ImageRef::parse("t3_017").unwrap();
        assert_eq!(r.trimester, 3);
        assert!(ImageRef::parse("img_017").is_err());
        assert!(ImageRef::parse("t9_001").is_err());
    }

    #[test]
    fn image_tensor_rejects_out_of_range_pixels() {
        let bad = Array3::from_elem((1, 2, 2), 1.5);
        assert!(ImageTensor::new(bad).is_err());
        let good = Array3::from_elem((1, 2, 2), 0.25);
        assert!(ImageTensor::new(good).is_ok());
    }

    #[test]
    fn quantize_snaps_to_8bit_grid() {
        let raw = Array3::from_elem((1, 1, 1), 0.5);
        let q = ImageTensor::new(raw).unwrap().quantize_u8();
        let v = q.data[[0, 0, 0]];
        assert_eq!(v, 128.0 / 255.0, "0.5 rounds to 128/255, got {v}");
    }

    #[test]
    fn duplicate_images_rejected_by_store() {
        let mut store = ImageStore::new();
        let img = ImageTensor::new(Array3::zeros((1, 4, 4))).unwrap();
        store.insert("p1", "t1_000", img.clone()).unwrap();
        let err = store.insert("p1", "t1_000", img).unwrap_err();
        assert!(matches!(err, DataError::DuplicateImage { .. }));
    }
}
