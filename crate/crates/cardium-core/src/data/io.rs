//! On-disk dataset layout.
//!
//! ```text
//! <dir>/
//!   manifest.json          format version, schema hash, per-patient image counts
//!   tabular.csv            header: patient_id,event_date,<feature names...>
//!   labels.csv             header: patient_id,label,chd_type,trimesters
//!   images/<pid>/<image_id>.png   8-bit grayscale
//! ```
//!
//! `tabular.csv` holds raw events (one row per event, empty cell = missing);
//! consolidation into per-patient rows happens at load time, so a dataset
//! written from already-consolidated records (one event per patient) loads
//! back identically — consolidation is idempotent.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    ClinicalEvent, DataError, Dataset, ImageRef, ImageStore, ImageTensor, PatientRecord, RawValue,
};
use crate::preprocess::{consolidate, ConsolidationPolicy};
use crate::schema::{FeatureKind, TabularSchema};

pub const MANIFEST_VERSION: u32 = 1;

/// Summary stored next to the data files; checked on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub schema_hash: String,
    pub patient_count: usize,
    /// Number of stored images per patient, keyed by patient id.
    pub image_counts: BTreeMap<String, usize>,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn format_raw(value: &RawValue) -> String {
    match value {
        RawValue::Number(x) => format!("{x}"),
        RawValue::Text(s) => s.clone(),
    }
}

/// Writes the dataset into `dir` (created if needed).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    // --- tabular.csv: one row per event, schema column order ---
    let tabular_path = dir.join("tabular.csv");
    let mut wtr = csv::Writer::from_path(&tabular_path)
        .map_err(|e| DataError::Csv { path: tabular_path.display().to_string(), source: e })?;
    let mut header = vec!["patient_id".to_string(), "event_date".to_string()];
    header.extend(dataset.schema.features().iter().map(|f| f.name.clone()));
    wtr.write_record(&header)
        .map_err(|e| DataError::Csv { path: tabular_path.display().to_string(), source: e })?;
    for event in &dataset.events {
        let mut row = vec![event.patient_id.clone(), event.event_date.to_string()];
        for feature in dataset.schema.features() {
            row.push(event.values.get(&feature.name).map(format_raw).unwrap_or_default());
        }
        wtr.write_record(&row)
            .map_err(|e| DataError::Csv { path: tabular_path.display().to_string(), source: e })?;
    }
    wtr.flush().map_err(|e| io_err(&tabular_path, e))?;

    // --- labels.csv ---
    let labels_path = dir.join("labels.csv");
    let mut wtr = csv::Writer::from_path(&labels_path)
        .map_err(|e| DataError::Csv { path: labels_path.display().to_string(), source: e })?;
    wtr.write_record(["patient_id", "label", "chd_type", "trimesters"])
        .map_err(|e| DataError::Csv { path: labels_path.display().to_string(), source: e })?;
    for record in &dataset.records {
        let trimesters = record.trimesters.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";");
        wtr.write_record([
            record.patient_id.as_str(),
            &record.label.to_string(),
            record.chd_type.as_deref().unwrap_or(""),
            &trimesters,
        ])
        .map_err(|e| DataError::Csv { path: labels_path.display().to_string(), source: e })?;
    }
    wtr.flush().map_err(|e| io_err(&labels_path, e))?;

    // --- images ---
    let images_dir = dir.join("images");
    for ((patient_id, image_id), tensor) in dataset.images.iter() {
        let patient_dir = images_dir.join(patient_id);
        fs::create_dir_all(&patient_dir).map_err(|e| io_err(&patient_dir, e))?;
        let (_, h, w) = tensor.shape();
        let mut bytes = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                bytes.push((tensor.data[[0, y, x]] * 255.0).round() as u8);
            }
        }
        let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer length matches dimensions");
        let path = patient_dir.join(format!("{image_id}.png"));
        img.save(&path)
            .map_err(|e| DataError::ImageDecode { path: path.display().to_string(), reason: e.to_string() })?;
    }

    // --- manifest ---
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        schema_hash: dataset.schema.hash(),
        patient_count: dataset.records.len(),
        image_counts: dataset.images.counts_by_patient(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(|e| io_err(&manifest_path, e))?;
    Ok(())
}

fn parse_cell(
    raw: &str,
    kind: FeatureKind,
    feature: &str,
    line: u64,
) -> Result<Option<RawValue>, DataError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Ok(None);
    }
    match kind {
        FeatureKind::Numerical => trimmed
            .parse::<f64>()
            .map(|x| Some(RawValue::Number(x)))
            .map_err(|_| DataError::MalformedRow {
                line,
                reason: format!("feature `{feature}` expects a number, got `{trimmed}`"),
            }),
        _ => Ok(Some(RawValue::Text(trimmed.to_string()))),
    }
}

/// Reads a dataset from `dir`, consolidating events with `policy` and
/// validating against `schema` and the stored manifest.
pub fn load_dataset(
    dir: &Path,
    schema: &TabularSchema,
    policy: &ConsolidationPolicy,
) -> Result<Dataset, DataError> {
    // --- manifest ---
    let manifest_path = dir.join("manifest.json");
    let manifest_json = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_json)
        .map_err(|e| DataError::ManifestMismatch(format!("unparseable manifest: {e}")))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(DataError::ManifestMismatch(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let expected_hash = schema.hash();
    if manifest.schema_hash != expected_hash {
        return Err(DataError::SchemaHashMismatch { found: manifest.schema_hash, expected: expected_hash });
    }

    // --- labels.csv ---
    let labels_path = dir.join("labels.csv");
    let mut rdr = csv::Reader::from_path(&labels_path)
        .map_err(|e| DataError::Csv { path: labels_path.display().to_string(), source: e })?;
    struct LabelRow {
        label: u8,
        chd_type: Option<String>,
    }
    let mut labels: BTreeMap<String, LabelRow> = BTreeMap::new();
    let mut label_order: Vec<String> = Vec::new();
    for (idx, result) in rdr.records().enumerate() {
        let line = idx as u64 + 2;
        let row = result.map_err(|e| DataError::Csv { path: labels_path.display().to_string(), source: e })?;
        if row.len() != 4 {
            return Err(DataError::MalformedRow { line, reason: format!("labels row needs 4 cells, got {}", row.len()) });
        }
        let patient_id = row[0].trim().to_string();
        let label: u8 = row[1]
            .trim()
            .parse()
            .map_err(|_| DataError::MalformedRow { line, reason: format!("bad label `{}`", &row[1]) })?;
        let chd_type = if row[2].trim().is_empty() { None } else { Some(row[2].trim().to_string()) };
        if labels.contains_key(&patient_id) {
            return Err(DataError::MalformedRow { line, reason: format!("duplicate patient `{patient_id}` in labels") });
        }
        // Trimesters in labels.csv are written for human consumption; the
        // authoritative per-image trimester comes from the image id tags.
        labels.insert(patient_id.clone(), LabelRow { label, chd_type });
        label_order.push(patient_id);
    }

    // --- tabular.csv (events) ---
    let tabular_path = dir.join("tabular.csv");
    let mut rdr = csv::Reader::from_path(&tabular_path)
        .map_err(|e| DataError::Csv { path: tabular_path.display().to_string(), source: e })?;
    let header = rdr
        .headers()
        .map_err(|e| DataError::Csv { path: tabular_path.display().to_string(), source: e })?
        .clone();
    if header.len() < 2 || &header[0] != "patient_id" || &header[1] != "event_date" {
        return Err(DataError::MalformedRow {
            line: 1,
            reason: "header must start with patient_id,event_date".into(),
        });
    }
    let mut columns: Vec<(String, FeatureKind)> = Vec::new();
    for name in header.iter().skip(2) {
        let spec = schema
            .get(name)
            .ok_or_else(|| DataError::UnknownFeature { name: name.to_string(), line: Some(1) })?;
        columns.push((spec.name.clone(), spec.kind));
    }
    let mut events: Vec<ClinicalEvent> = Vec::new();
    for (idx, result) in rdr.records().enumerate() {
        let line = idx as u64 + 2;
        let row = result.map_err(|e| DataError::Csv { path: tabular_path.display().to_string(), source: e })?;
        if row.len() != 2 + columns.len() {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("expected {} cells, got {}", 2 + columns.len(), row.len()),
            });
        }
        let patient_id = row[0].trim().to_string();
        if patient_id.is_empty() {
            return Err(DataError::MalformedRow { line, reason: "empty patient_id".into() });
        }
        let event_date: i64 = row[1]
            .trim()
            .parse()
            .map_err(|_| DataError::MalformedRow { line, reason: format!("bad event_date `{}`", &row[1]) })?;
        let mut values = BTreeMap::new();
        for (col, (name, kind)) in columns.iter().enumerate() {
            if let Some(value) = parse_cell(&row[2 + col], *kind, name, line)? {
                values.insert(name.clone(), value);
            }
        }
        events.push(ClinicalEvent { patient_id, event_date, values });
    }

    // --- images ---
    let images_dir = dir.join("images");
    let mut images = ImageStore::new();
    let mut refs_by_patient: BTreeMap<String, Vec<ImageRef>> = BTreeMap::new();
    if images_dir.is_dir() {
        let mut patient_dirs: Vec<_> = fs::read_dir(&images_dir)
            .map_err(|e| io_err(&images_dir, e))?
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| io_err(&images_dir, e))?;
        patient_dirs.sort_by_key(|d| d.file_name());
        for patient_dir in patient_dirs {
            let patient_id = patient_dir.file_name().to_string_lossy().to_string();
            let mut files: Vec<_> = fs::read_dir(patient_dir.path())
                .map_err(|e| io_err(&patient_dir.path(), e))?
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| io_err(&patient_dir.path(), e))?;
            files.sort_by_key(|f| f.file_name());
            for file in files {
                let path = file.path();
                if path.extension().and_then(|e| e.to_str()) != Some("png") {
                    continue;
                }
                let image_id = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
                let image_ref = ImageRef::parse(&image_id)?;
                let decoded = image::open(&path)
                    .map_err(|e| DataError::ImageDecode { path: path.display().to_string(), reason: e.to_string() })?
                    .into_luma8();
                let (w, h) = decoded.dimensions();
                let mut data = ndarray::Array3::<f64>::zeros((1, h as usize, w as usize));
                for y in 0..h {
                    for x in 0..w {
                        data[[0, y as usize, x as usize]] = decoded.get_pixel(x, y).0[0] as f64 / 255.0;
                    }
                }
                images.insert(&patient_id, &image_id, ImageTensor::new(data)?)?;
                refs_by_patient.entry(patient_id.clone()).or_default().push(image_ref);
            }
        }
    }

    // --- consolidate events into records ---
    let mut events_by_patient: BTreeMap<String, Vec<ClinicalEvent>> = BTreeMap::new();
    for event in &events {
        events_by_patient.entry(event.patient_id.clone()).or_default().push(event.clone());
    }
    let mut records = Vec::with_capacity(label_order.len());
    for patient_id in &label_order {
        let info = &labels[patient_id];
        let patient_events = events_by_patient.get(patient_id).cloned().unwrap_or_default();
        let row = consolidate(&patient_events, schema, policy)?;
        let mut image_refs = refs_by_patient.get(patient_id).cloned().unwrap_or_default();
        image_refs.sort();
        let trimesters = image_refs.iter().map(|r| r.trimester).collect();
        records.push(PatientRecord {
            patient_id: patient_id.clone(),
            label: info.label,
            chd_type: info.chd_type.clone(),
            trimesters,
            row,
            image_refs,
        });
    }

    // --- cross-check against manifest ---
    if records.len() != manifest.patient_count {
        return Err(DataError::ManifestMismatch(format!(
            "manifest claims {} patients, labels list {}",
            manifest.patient_count,
            records.len()
        )));
    }
    let counts = images.counts_by_patient();
    if counts != manifest.image_counts {
        return Err(DataError::ManifestMismatch("per-patient image counts differ from manifest".into()));
    }

    let dataset = Dataset { schema: schema.clone(), records, events, images };
    dataset.validate().map_err(|mut errs| errs.remove(0))?;
    Ok(dataset)
}
