//! Seeded synthetic-dataset generator with planted, tunable signals.
//!
//! Three independent signal channels connect the data to the label:
//!
//! * **image** — every patient's scan carries one dominant intensity blob;
//!   its *eccentricity* is drawn from a label-shifted Gaussian scaled by
//!   `signal.image`.
//! * **tabular** — designated clinical variables (nuchal translucency, fetal
//!   heart rate, a few flags and history categories) shift with the label,
//!   scaled by `signal.tabular`.
//! * **interaction** — an XOR channel scaled by `signal.interaction`: the
//!   blob's *orientation* bit `u` and the `consanguinity` flag `b` satisfy
//!   `u XOR b == label` with probability `(1 + interaction) / 2`, while each
//!   bit alone is statistically independent of the label. Neither modality
//!   can recover this channel by itself.
//!
//! Each patient gets 1–4 dated clinical events with per-event noise, raw
//! alias spellings for drug names, and random missingness — so the generator
//! exercises the full consolidation/refinement path. Identical configs
//! produce bit-identical datasets; images are quantized to the 8-bit grid at
//! creation so in-memory and PNG-round-tripped pixels agree exactly.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClinicalEvent, Dataset, ImageRef, ImageStore, ImageTensor, PatientRecord, RawValue};
use crate::preprocess::{consolidate, CategoryAliasMap, ConsolidationPolicy};
use crate::schema::TabularSchema;
use crate::util::derive_rng;

/// Strength of each planted signal channel, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalitySignal {
    pub image: f64,
    pub tabular: f64,
    pub interaction: f64,
}

impl Default for ModalitySignal {
    fn default() -> Self {
        Self { image: 0.55, tabular: 0.4, interaction: 0.9 }
    }
}

/// Generator configuration. The same config always produces the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    /// Probability of a positive label (or the target fraction in exact mode).
    pub positive_rate: f64,
    /// When set, exactly `round(n_patients * positive_rate)` patients are
    /// positive; otherwise labels are independent Bernoulli draws.
    pub exact_positive_count: bool,
    /// Inclusive range of images per patient.
    pub images_per_patient: (usize, usize),
    /// `(channels, height, width)`; channels must be 1.
    pub image_size: (usize, usize, usize),
    pub signal: ModalitySignal,
    /// Mixture weights for trimesters 1/2/3 when tagging images.
    pub trimester_weights: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_patients: 600,
            positive_rate: 0.072,
            exact_positive_count: false,
            images_per_patient: (1, 3),
            image_size: (1, 64, 64),
            signal: ModalitySignal::default(),
            trimester_weights: [0.2, 0.5, 0.3],
            seed: 42,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("n_patients must be positive")]
    NoPatients,
    #[error("positive_rate must lie in (0, 1), got {0}")]
    BadRate(f64),
    #[error("images_per_patient range ({0}, {1}) is invalid")]
    BadImageRange(usize, usize),
    #[error("image_size must be (1, h, w) with h, w >= 16, got {0:?}")]
    BadImageSize((usize, usize, usize)),
    #[error("signal strengths must lie in [0, 1]")]
    BadSignal,
    #[error("trimester weights must be non-negative and sum to a positive value")]
    BadTrimesterWeights,
}

/// The generator's label-conditional distribution over its three planted
/// channels, expressed analytically so tests can compute Bayes-optimal
/// accuracies for each modality without sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedRule {
    pub positive_rate: f64,
    /// Blob eccentricity mean for [negative, positive] patients.
    pub ecc_mean: [f64; 2],
    pub ecc_std: f64,
    /// Nuchal translucency mean (mm) for [negative, positive] patients.
    pub nt_mean: [f64; 2],
    pub nt_std: f64,
    /// `P(u XOR b == label)` for the orientation bit `u` and tabular bit `b`.
    pub xor_agreement: f64,
}

impl PlantedRule {
    pub fn from_config(cfg: &SyntheticConfig) -> Self {
        let s = cfg.signal;
        Self {
            positive_rate: cfg.positive_rate,
            ecc_mean: [ECC_BASE, ECC_BASE + ECC_SHIFT * s.image],
            ecc_std: ECC_STD,
            nt_mean: [NT_BASE, NT_BASE + NT_SHIFT * s.tabular],
            nt_std: NT_STD,
            xor_agreement: 0.5 + 0.5 * s.interaction,
        }
    }
}

// Planted-channel constants (shared by the generator and `PlantedRule`).
const ECC_BASE: f64 = 0.18;
const ECC_SHIFT: f64 = 0.85;
const ECC_STD: f64 = 0.25;
const NT_BASE: f64 = 1.7;
const NT_SHIFT: f64 = 1.3;
const NT_STD: f64 = 0.5;
const FHR_BASE: f64 = 148.0;
const FHR_SHIFT: f64 = 7.0;
const FHR_STD: f64 = 8.0;

const CHD_TYPES: &[(&str, f64)] = &[
    ("ventricular_septal_defect", 0.30),
    ("atrial_septal_defect", 0.15),
    ("other_chd", 0.09),
    ("tetralogy_of_fallot", 0.08),
    ("atrioventricular_septal_defect", 0.07),
    ("pulmonary_stenosis", 0.07),
    ("transposition_great_arteries", 0.06),
    ("coarctation_of_aorta", 0.06),
    ("aortic_stenosis", 0.04),
    ("hypoplastic_left_heart", 0.04),
    ("ebstein_anomaly", 0.02),
    ("truncus_arteriosus", 0.02),
];

/// Drug spellings the events use, grouped by canonical name. The default
/// alias map inverts these groups.
const DRUG_ALIASES: &[(&str, &[&str])] = &[
    ("progesterone", &["progesterone", "Progendo", "progesterone intravaginal"]),
    ("insulin", &["insulin", "Insulatard", "insulin NPH"]),
    ("aspirin", &["aspirin", "ASA low dose"]),
    ("levothyroxine", &["levothyroxine", "Euthyrox"]),
    ("folic_acid", &["folic_acid", "folate 5mg"]),
];

const PATHOLOGY_POOL: &[&str] = &[
    "gestational_diabetes",
    "preeclampsia_prior",
    "thyroid_disorder",
    "asthma",
    "anemia",
    "urinary_infection",
];
/// Pathology category whose prevalence rises for positives.
const PATHOLOGY_MARKER: &str = "fetal_arrhythmia_noted";

const HEREDITY_POOL: &[&str] =
    &["none_significant", "diabetes_family", "hypertension_family", "twin_pregnancy_family"];
/// Hereditary category whose prevalence rises for positives.
const HEREDITY_MARKER: &str = "chd_family_history";

/// Alias map matching the raw spellings the generator emits.
pub fn default_alias_map() -> CategoryAliasMap {
    let mut pharma = BTreeMap::new();
    for (canonical, spellings) in DRUG_ALIASES {
        for spelling in *spellings {
            if spelling != canonical {
                pharma.insert(spelling.to_string(), canonical.to_string());
            }
        }
    }
    BTreeMap::from([("pharmacological_history".to_string(), pharma)])
}

fn validate(cfg: &SyntheticConfig) -> Result<(), SynthError> {
    if cfg.n_patients == 0 {
        return Err(SynthError::NoPatients);
    }
    if !(cfg.positive_rate > 0.0 && cfg.positive_rate < 1.0) {
        return Err(SynthError::BadRate(cfg.positive_rate));
    }
    let (lo, hi) = cfg.images_per_patient;
    if lo == 0 || lo > hi {
        return Err(SynthError::BadImageRange(lo, hi));
    }
    let (c, h, w) = cfg.image_size;
    if c != 1 || h < 16 || w < 16 {
        return Err(SynthError::BadImageSize(cfg.image_size));
    }
    let s = cfg.signal;
    for v in [s.image, s.tabular, s.interaction] {
        if !(0.0..=1.0).contains(&v) {
            return Err(SynthError::BadSignal);
        }
    }
    if cfg.trimester_weights.iter().any(|w| *w < 0.0)
        || cfg.trimester_weights.iter().sum::<f64>() <= 0.0
    {
        return Err(SynthError::BadTrimesterWeights);
    }
    Ok(())
}

fn weighted_pick<'a>(rng: &mut ChaCha8Rng, items: &[(&'a str, f64)]) -> &'a str {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut x = rng.gen_range(0.0..total);
    for (item, w) in items {
        if x < *w {
            return item;
        }
        x -= w;
    }
    items.last().expect("non-empty").0
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    rng.sample(Normal::new(mean, std).expect("valid normal"))
}

/// Per-patient planted latent state.
struct Latents {
    label: u8,
    orientation_bit: u8,
    tabular_bit: u8,
    eccentricity: f64,
    nuchal_translucency: f64,
}

fn draw_latents(rng: &mut ChaCha8Rng, label: u8, rule: &PlantedRule) -> Latents {
    let orientation_bit = u8::from(rng.gen_bool(0.5));
    // u XOR b agrees with the label with probability `xor_agreement`.
    let agrees = rng.gen_bool(rule.xor_agreement);
    let target = if agrees { label } else { 1 - label };
    let tabular_bit = orientation_bit ^ target;
    let eccentricity =
        normal(rng, rule.ecc_mean[usize::from(label)], rule.ecc_std).max(0.0);
    let nuchal_translucency =
        normal(rng, rule.nt_mean[usize::from(label)], rule.nt_std).max(0.05);
    Latents { label, orientation_bit, tabular_bit, eccentricity, nuchal_translucency }
}

/// Renders one scan: background texture, two faint distractor blobs, and the
/// main blob whose eccentricity/orientation carry the planted image channels.
fn render_image(rng: &mut ChaCha8Rng, latents: &Latents, h: usize, w: usize) -> ImageTensor {
    let mut data = Array3::<f64>::zeros((1, h, w));
    let hf = h as f64;
    let wf = w as f64;

    // Background: soft vertical gradient plus pixel noise.
    let base = 0.28 + rng.gen_range(-0.02..0.02);
    for y in 0..h {
        for x in 0..w {
            data[[0, y, x]] = base + 0.10 * (y as f64 / hf) + normal(rng, 0.0, 0.035);
        }
    }

    let splat = |data: &mut Array3<f64>, cx: f64, cy: f64, a: f64, b: f64, theta: f64, gain: f64| {
        let (sin_t, cos_t) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let xr = dx * cos_t + dy * sin_t;
                let yr = -dx * sin_t + dy * cos_t;
                let v = (-0.5 * (xr * xr / (a * a) + yr * yr / (b * b))).exp();
                data[[0, y, x]] += gain * v;
            }
        }
    };

    // Faint distractors.
    for _ in 0..2 {
        let cx = rng.gen_range(0.15 * wf..0.85 * wf);
        let cy = rng.gen_range(0.15 * hf..0.85 * hf);
        let r = rng.gen_range(0.04 * wf..0.08 * wf);
        splat(&mut data, cx, cy, r, r, 0.0, rng.gen_range(0.08..0.16));
    }

    // Main blob: axis ratio from eccentricity, angle from the orientation bit.
    let cx = wf / 2.0 + normal(rng, 0.0, 0.09 * wf);
    let cy = hf / 2.0 + normal(rng, 0.0, 0.09 * hf);
    let radius = 0.14 * wf + normal(rng, 0.0, 0.015 * wf);
    let k = 1.0 + latents.eccentricity;
    let angle = if latents.orientation_bit == 0 { 0.0 } else { std::f64::consts::FRAC_PI_2 }
        + normal(rng, 0.0, 0.10);
    splat(&mut data, cx, cy, radius * k, radius / k, angle, 0.45 + normal(rng, 0.0, 0.04));

    data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    ImageTensor::new(data).expect("rendered image is valid").quantize_u8()
}

/// Spreads the patient's planted tabular profile over 1–4 noisy events.
fn build_events(
    rng: &mut ChaCha8Rng,
    patient_id: &str,
    latents: &Latents,
    signal: &ModalitySignal,
) -> Vec<ClinicalEvent> {
    let label = f64::from(latents.label);
    let s_tab = signal.tabular;

    // Planted per-patient true values.
    let maternal_age = normal(rng, 32.0, 5.0).clamp(16.0, 48.0);
    let bmi = normal(rng, 26.0, 4.5).clamp(15.0, 52.0);
    let systolic = normal(rng, 118.0, 12.0).clamp(85.0, 190.0);
    let diastolic = normal(rng, 76.0, 9.0).clamp(48.0, 125.0);
    let fhr = normal(rng, FHR_BASE + label * s_tab * FHR_SHIFT, FHR_STD).clamp(95.0, 205.0);
    let gest_age = normal(rng, 22.0, 6.0).clamp(6.0, 40.0);
    let gravidity = rng.gen_range(0..6) as f64;
    let parity = (gravidity - rng.gen_range(0..3) as f64).max(0.0);
    let hemoglobin = normal(rng, 11.8, 1.1).clamp(6.0, 17.0);

    let flag = |rng: &mut ChaCha8Rng, p: f64| u8::from(rng.gen_bool(p.clamp(0.0, 1.0)));
    let smoking = flag(rng, 0.12);
    let alcohol = flag(rng, 0.05);
    let chromosomal = flag(rng, 0.02 + label * s_tab * 0.25);
    let diabetes = flag(rng, 0.06 + label * s_tab * 0.10);
    let hypertension = flag(rng, 0.08);
    let ivf = flag(rng, 0.07);
    let consanguinity = latents.tabular_bit;
    let teratogen = flag(rng, 0.04);
    let infection = flag(rng, 0.06);
    let folic = flag(rng, 0.70);

    let risk_high_p = 0.08 + label * s_tab * 0.30;
    let risk_mid_p = 0.22;
    let risk_draw: f64 = rng.gen();
    let risk_level = if risk_draw < risk_high_p {
        "high"
    } else if risk_draw < risk_high_p + risk_mid_p {
        "intermediate"
    } else {
        "low"
    };
    let obesity_grade = if bmi >= 40.0 {
        "grade_3"
    } else if bmi >= 35.0 {
        "grade_2"
    } else if bmi >= 30.0 {
        "grade_1"
    } else {
        "none"
    };
    let care = ["inadequate", "intermediate", "adequate"][weighted_index(rng, &[0.15, 0.35, 0.5])];

    // Category sets.
    let mut pathology: Vec<&str> = Vec::new();
    if rng.gen_bool((0.05 + label * s_tab * 0.45).clamp(0.0, 1.0)) {
        pathology.push(PATHOLOGY_MARKER);
    }
    for item in PATHOLOGY_POOL {
        if rng.gen_bool(0.10) {
            pathology.push(item);
        }
    }
    let mut heredity: Vec<&str> = Vec::new();
    if rng.gen_bool((0.08 + label * s_tab * 0.30).clamp(0.0, 1.0)) {
        heredity.push(HEREDITY_MARKER);
    }
    for item in HEREDITY_POOL {
        if rng.gen_bool(0.12) {
            heredity.push(item);
        }
    }
    let mut pharma: Vec<String> = Vec::new();
    for (_, spellings) in DRUG_ALIASES {
        if rng.gen_bool(0.18) {
            pharma.push(spellings[rng.gen_range(0..spellings.len())].to_string());
        }
    }
    if rng.gen_bool(0.03) {
        // One-off rare drug names exercise the rare-category merge.
        pharma.push(format!("misc_compound_{}", rng.gen_range(0..5000)));
    }

    // Missingness: drop a feature from all events with small probability.
    // The two headline signal carriers stay fully observed.
    let keep = |rng: &mut ChaCha8Rng| rng.gen_bool(0.94);

    let n_events = rng.gen_range(1..=4usize);
    let mut dates: Vec<i64> = (0..n_events).map(|_| rng.gen_range(0..200i64)).collect();
    dates.sort_unstable();
    let mut events: Vec<ClinicalEvent> = dates
        .into_iter()
        .map(|event_date| ClinicalEvent {
            patient_id: patient_id.to_string(),
            event_date,
            values: BTreeMap::new(),
        })
        .collect();

    // Helper: scatter a numeric reading (with per-event noise) over a random
    // non-empty subset of events.
    let put_numeric = |events: &mut Vec<ClinicalEvent>,
                           rng: &mut ChaCha8Rng,
                           name: &str,
                           value: f64,
                           noise: f64,
                           floor: f64,
                           always: bool| {
        if !always && !keep(rng) {
            return;
        }
        let first = rng.gen_range(0..events.len());
        for (idx, event) in events.iter_mut().enumerate() {
            if idx == first || rng.gen_bool(0.4) {
                let reading = (value + normal(rng, 0.0, noise)).max(floor);
                event.values.insert(name.to_string(), RawValue::Number(reading));
            }
        }
    };
    const NO_FLOOR: f64 = f64::NEG_INFINITY;
    put_numeric(&mut events, rng, "maternal_age", maternal_age, 0.0, NO_FLOOR, false);
    put_numeric(&mut events, rng, "bmi", bmi, 0.15, 13.0, false);
    put_numeric(&mut events, rng, "systolic_bp", systolic, 2.0, 70.0, false);
    put_numeric(&mut events, rng, "diastolic_bp", diastolic, 1.5, 40.0, false);
    put_numeric(&mut events, rng, "fetal_heart_rate", fhr, 1.5, 80.0, false);
    put_numeric(&mut events, rng, "nuchal_translucency_mm", latents.nuchal_translucency, 0.05, 0.02, true);
    put_numeric(&mut events, rng, "gestational_age_weeks", gest_age, 0.3, 4.0, false);
    put_numeric(&mut events, rng, "gravidity", gravidity, 0.0, 0.0, false);
    put_numeric(&mut events, rng, "parity", parity, 0.0, 0.0, false);
    put_numeric(&mut events, rng, "hemoglobin_g_dl", hemoglobin, 0.2, 5.0, false);

    // Binary flags: a true flag appears as 1 in at least one event; other
    // events may record 0 or stay silent.
    let put_flag =
        |events: &mut Vec<ClinicalEvent>, rng: &mut ChaCha8Rng, name: &str, value: u8, always: bool| {
            if !always && !keep(rng) {
                return;
            }
            let hot = rng.gen_range(0..events.len());
            for (idx, event) in events.iter_mut().enumerate() {
                if idx == hot {
                    event.values.insert(name.to_string(), RawValue::text(if value == 1 { "1" } else { "0" }));
                } else if rng.gen_bool(0.3) {
                    let noise_value = value == 1 && rng.gen_bool(0.5);
                    event.values.insert(name.to_string(), RawValue::text(if noise_value { "1" } else { "0" }));
                }
            }
        };
    put_flag(&mut events, rng, "smoking", smoking, false);
    put_flag(&mut events, rng, "alcohol_use", alcohol, false);
    put_flag(&mut events, rng, "chromosomal_abnormality", chromosomal, false);
    put_flag(&mut events, rng, "pregestational_diabetes", diabetes, false);
    put_flag(&mut events, rng, "chronic_hypertension", hypertension, false);
    put_flag(&mut events, rng, "ivf_conception", ivf, false);
    put_flag(&mut events, rng, "consanguinity", consanguinity, true);
    put_flag(&mut events, rng, "teratogen_exposure", teratogen, false);
    put_flag(&mut events, rng, "first_trimester_infection", infection, false);
    put_flag(&mut events, rng, "folic_acid_supplementation", folic, false);

    // Ordinals: the planted maximum appears once; other events may report
    // strictly lower levels.
    let put_ordinal = |events: &mut Vec<ClinicalEvent>,
                           rng: &mut ChaCha8Rng,
                           name: &str,
                           levels: &[&str],
                           planted: &str| {
        if !keep(rng) {
            return;
        }
        let planted_idx = levels.iter().position(|l| *l == planted).expect("level exists");
        let hot = rng.gen_range(0..events.len());
        for (idx, event) in events.iter_mut().enumerate() {
            if idx == hot {
                event.values.insert(name.to_string(), RawValue::text(planted));
            } else if rng.gen_bool(0.25) {
                let lower = levels[rng.gen_range(0..=planted_idx)];
                event.values.insert(name.to_string(), RawValue::text(lower));
            }
        }
    };
    put_ordinal(&mut events, rng, "risk_level", &["low", "intermediate", "high"], risk_level);
    put_ordinal(&mut events, rng, "obesity_grade", &["none", "grade_1", "grade_2", "grade_3"], obesity_grade);
    put_ordinal(&mut events, rng, "prenatal_care_adequacy", &["inadequate", "intermediate", "adequate"], care);

    // Categories: scatter each item into some event (joined cells possible).
    let put_categories = |events: &mut Vec<ClinicalEvent>,
                              rng: &mut ChaCha8Rng,
                              name: &str,
                              items: &[String]| {
        for item in items {
            let target = rng.gen_range(0..events.len());
            let entry = events[target].values.entry(name.to_string());
            match entry {
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(RawValue::Text(item.clone()));
                }
                std::collections::btree_map::Entry::Occupied(mut o) => {
                    if let RawValue::Text(existing) = o.get_mut() {
                        existing.push(';');
                        existing.push_str(item);
                    }
                }
            }
        }
    };
    put_categories(&mut events, rng, "pathological_history", &pathology.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    put_categories(&mut events, rng, "hereditary_history", &heredity.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    put_categories(&mut events, rng, "pharmacological_history", &pharma);

    events
}

fn weighted_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (idx, w) in weights.iter().enumerate() {
        if x < *w {
            return idx;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Generates the full dataset (records, events, images) for `cfg`.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset, SynthError> {
    validate(cfg)?;
    let schema = TabularSchema::clinical_default();
    let rule = PlantedRule::from_config(cfg);
    let policy = ConsolidationPolicy::default();
    let (_, h, w) = cfg.image_size;

    // Labels first, from their own stream.
    let mut label_rng = derive_rng(cfg.seed, "synth-labels");
    let labels: Vec<u8> = if cfg.exact_positive_count {
        let n_pos = (cfg.n_patients as f64 * cfg.positive_rate).round() as usize;
        let mut indices: Vec<usize> = (0..cfg.n_patients).collect();
        indices.shuffle(&mut label_rng);
        let mut labels = vec![0u8; cfg.n_patients];
        for idx in indices.into_iter().take(n_pos) {
            labels[idx] = 1;
        }
        labels
    } else {
        (0..cfg.n_patients).map(|_| u8::from(label_rng.gen_bool(cfg.positive_rate))).collect()
    };

    let mut records = Vec::with_capacity(cfg.n_patients);
    let mut all_events = Vec::new();
    let mut images = ImageStore::new();

    for (i, label) in labels.iter().enumerate() {
        let patient_id = format!("p{i:04}");
        let mut rng = derive_rng(cfg.seed, &format!("synth-patient-{i}"));
        let latents = draw_latents(&mut rng, *label, &rule);

        let chd_type = (*label == 1).then(|| weighted_pick(&mut rng, CHD_TYPES).to_string());

        let events = build_events(&mut rng, &patient_id, &latents, &cfg.signal);
        let row = consolidate(&events, &schema, &policy).expect("generated events are schema-clean");

        let n_images = rng.gen_range(cfg.images_per_patient.0..=cfg.images_per_patient.1);
        let mut image_refs = Vec::with_capacity(n_images);
        for seq in 0..n_images {
            let trimester = 1 + weighted_index(&mut rng, &cfg.trimester_weights) as u8;
            let image_ref = ImageRef::new(trimester, seq);
            let tensor = render_image(&mut rng, &latents, h, w);
            images
                .insert(&patient_id, &image_ref.image_id, tensor)
                .expect("generated image ids are unique");
            image_refs.push(image_ref);
        }
        image_refs.sort();
        let trimesters = image_refs.iter().map(|r| r.trimester).collect();

        all_events.extend(events);
        records.push(PatientRecord {
            patient_id,
            label: *label,
            chd_type,
            trimesters,
            row,
            image_refs,
        });
    }

    let dataset = Dataset { schema, records, events: all_events, images };
    debug_assert!(dataset.validate().is_ok());
    Ok(dataset)
}
