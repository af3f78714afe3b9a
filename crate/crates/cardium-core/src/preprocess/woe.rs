//! Leakage-safe weight-of-evidence (WoE) encoding of categorical features.
//!
//! Fitting-split rows are assigned to `k` inner folds (stratified by label,
//! deterministic per seed). For every fold `k` a WoE table is computed from
//! the rows *outside* fold `k` only:
//!
//! ```text
//! woe_k(X) = ln[(c1(X) + eps) / (N1 + eps * V)]
//!          - ln[(c0(X) + eps) / (N0 + eps * V)]
//! ```
//!
//! where `c1(X)` / `c0(X)` count positive / negative rows containing
//! category `X`, `N1` / `N0` are the class row totals, and `V` is the number
//! of distinct categories of the feature — all restricted to the rows outside
//! fold `k`. A fitting row in fold `k` is encoded with fold `k`'s table, so
//! its own label never influences its encoding; unseen rows use the mean of
//! the per-fold tables. Categories absent from a table encode to 0, and a
//! multi-category cell encodes to the sum of its categories' values.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::CellValue;
use crate::schema::{FeatureKind, TabularSchema};
use crate::util::{derive_rng, stable_sum};

use super::EncodeMode;

/// WoE hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WoeConfig {
    /// Number of inner folds.
    pub folds: usize,
    /// Additive smoothing strength.
    pub epsilon: f64,
}

impl Default for WoeConfig {
    fn default() -> Self {
        Self { folds: 5, epsilon: 0.5 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WoeError {
    #[error("woe requires at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("woe epsilon must be a finite positive number, got {0}")]
    BadEpsilon(f64),
    #[error("fold assignment length {assignment} does not match row count {rows}")]
    AssignmentMismatch { assignment: usize, rows: usize },
    #[error("fold {fold}: class {class} has no rows outside the fold; the fitting split is too small or too imbalanced")]
    DegenerateFold { fold: usize, class: u8 },
    #[error("fold index {got} out of range for {folds} folds")]
    FoldOutOfRange { got: usize, folds: usize },
}

/// Assigns fitting rows to `folds` inner folds: each class is shuffled with a
/// seed-derived RNG and dealt round-robin, so per-fold class counts differ by
/// at most one.
pub fn assign_folds(labels: &[u8], folds: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = derive_rng(seed, "woe-inner-folds");
    let mut assignment = vec![0usize; labels.len()];
    for class in [1u8, 0u8] {
        let mut indices: Vec<usize> =
            (0..labels.len()).filter(|i| labels[*i] == class).collect();
        indices.shuffle(&mut rng);
        for (pos, row) in indices.into_iter().enumerate() {
            assignment[row] = pos % folds;
        }
    }
    assignment
}

/// Per-feature WoE tables: one per fold plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTables {
    pub per_fold: Vec<BTreeMap<String, f64>>,
    pub average: BTreeMap<String, f64>,
}

/// Fitted WoE encoder over all categorical features of a schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WoeEncoder {
    pub config: WoeConfig,
    pub tables: BTreeMap<String, FeatureTables>,
}

impl WoeEncoder {
    /// Fits per-fold tables given an explicit fold assignment. Counting is
    /// incremental (totals minus fold-local counts), so fold `k`'s table is a
    /// pure function of the rows outside fold `k`.
    pub fn fit_with_assignment(
        rows: &[&BTreeMap<String, CellValue>],
        labels: &[u8],
        schema: &TabularSchema,
        config: &WoeConfig,
        assignment: &[usize],
    ) -> Result<Self, WoeError> {
        if config.folds < 2 {
            return Err(WoeError::TooFewFolds(config.folds));
        }
        if !config.epsilon.is_finite() || config.epsilon <= 0.0 {
            return Err(WoeError::BadEpsilon(config.epsilon));
        }
        if assignment.len() != rows.len() || labels.len() != rows.len() {
            return Err(WoeError::AssignmentMismatch { assignment: assignment.len(), rows: rows.len() });
        }
        if let Some(bad) = assignment.iter().find(|f| **f >= config.folds) {
            return Err(WoeError::FoldOutOfRange { got: *bad, folds: config.folds });
        }

        // Class row totals, overall and per fold.
        let mut n_total = [0usize; 2];
        let mut n_fold = vec![[0usize; 2]; config.folds];
        for (row_idx, label) in labels.iter().enumerate() {
            let class = usize::from(*label);
            n_total[class] += 1;
            n_fold[assignment[row_idx]][class] += 1;
        }
        for (fold, counts) in n_fold.iter().enumerate() {
            for class in [1u8, 0u8] {
                if n_total[usize::from(class)] == counts[usize::from(class)] {
                    return Err(WoeError::DegenerateFold { fold, class });
                }
            }
        }

        let eps = config.epsilon;
        let mut tables = BTreeMap::new();
        for spec in schema.features() {
            if spec.kind != FeatureKind::Categorical {
                continue;
            }
            // Per category: [positive rows, negative rows] containing it,
            // overall and per fold.
            let mut total: BTreeMap<String, [usize; 2]> = BTreeMap::new();
            let mut per_fold_counts: Vec<BTreeMap<String, [usize; 2]>> =
                vec![BTreeMap::new(); config.folds];
            for (row_idx, row) in rows.iter().enumerate() {
                if let Some(CellValue::Categories(set)) = row.get(&spec.name) {
                    let class = usize::from(labels[row_idx]);
                    for category in set {
                        total.entry(category.clone()).or_insert([0, 0])[class] += 1;
                        per_fold_counts[assignment[row_idx]].entry(category.clone()).or_insert([0, 0])
                            [class] += 1;
                    }
                }
            }

            let mut per_fold: Vec<BTreeMap<String, f64>> = Vec::with_capacity(config.folds);
            for fold in 0..config.folds {
                let n1 = (n_total[1] - n_fold[fold][1]) as f64;
                let n0 = (n_total[0] - n_fold[fold][0]) as f64;
                // Categories present outside the fold.
                let mut outside: BTreeMap<String, [usize; 2]> = BTreeMap::new();
                for (category, counts) in &total {
                    let in_fold = per_fold_counts[fold].get(category).copied().unwrap_or([0, 0]);
                    let out = [counts[0] - in_fold[0], counts[1] - in_fold[1]];
                    if out[0] + out[1] > 0 {
                        outside.insert(category.clone(), out);
                    }
                }
                let v = outside.len() as f64;
                let table: BTreeMap<String, f64> = outside
                    .into_iter()
                    .map(|(category, counts)| {
                        let c1 = counts[1] as f64;
                        let c0 = counts[0] as f64;
                        let woe = ((c1 + eps) / (n1 + eps * v)).ln() - ((c0 + eps) / (n0 + eps * v)).ln();
                        (category, woe)
                    })
                    .collect();
                per_fold.push(table);
            }

            // Fold-average table over the union of categories; a category
            // missing from a fold's table contributes 0 to the mean.
            let union: BTreeSet<String> =
                per_fold.iter().flat_map(|t| t.keys().cloned()).collect();
            let average: BTreeMap<String, f64> = union
                .into_iter()
                .map(|category| {
                    let values: Vec<f64> = per_fold
                        .iter()
                        .map(|t| t.get(&category).copied().unwrap_or(0.0))
                        .collect();
                    let mean = stable_sum(&values) / config.folds as f64;
                    (category, mean)
                })
                .collect();

            tables.insert(spec.name.clone(), FeatureTables { per_fold, average });
        }

        Ok(Self { config: config.clone(), tables })
    }

    /// Convenience fit that derives the fold assignment from the seed.
    pub fn fit(
        rows: &[&BTreeMap<String, CellValue>],
        labels: &[u8],
        schema: &TabularSchema,
        config: &WoeConfig,
        seed: u64,
    ) -> Result<(Self, Vec<usize>), WoeError> {
        let assignment = assign_folds(labels, config.folds, seed);
        let encoder = Self::fit_with_assignment(rows, labels, schema, config, &assignment)?;
        Ok((encoder, assignment))
    }

    /// Encodes one categorical cell: the sum of the categories' table values
    /// under the requested mode. Categories absent from the table add 0.
    pub fn encode(
        &self,
        feature: &str,
        categories: &BTreeSet<String>,
        mode: EncodeMode,
    ) -> Result<f64, WoeError> {
        let Some(tables) = self.tables.get(feature) else {
            return Ok(0.0);
        };
        let table: &BTreeMap<String, f64> = match mode {
            EncodeMode::TrainFold(fold) => tables
                .per_fold
                .get(fold)
                .ok_or(WoeError::FoldOutOfRange { got: fold, folds: self.config.folds })?,
            EncodeMode::Infer => &tables.average,
        };
        let values: Vec<f64> =
            categories.iter().map(|c| table.get(c).copied().unwrap_or(0.0)).collect();
        Ok(stable_sum(&values))
    }
}
