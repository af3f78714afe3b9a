//! Central-difference verification of analytic gradients.
//!
//! Given a deterministic loss function over a [`ParamStore`] and the analytic
//! gradients from one backward pass, [`check_gradients`] perturbs sampled
//! coordinates of every parameter by ±h and compares the symmetric finite
//! difference against the analytic entry using the scale-aware relative
//! error `|a - n| / max(|a| + |n|, floor)`.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation step.
    pub h: f64,
    /// Coordinates sampled per parameter tensor (all coordinates when the
    /// tensor is smaller).
    pub samples_per_param: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        // The floor absorbs central-difference noise (~ulp(loss)/h ≈ 2e-11
        // for O(1) losses) on coordinates whose true gradient is exactly
        // zero, e.g. key-projection biases, which softmax cancels.
        Self { h: 1e-5, samples_per_param: 6, floor: 1e-6 }
    }
}

/// Worst offender found by a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Compares `analytic` gradients against central differences of `loss_fn`.
///
/// `loss_fn` must be a pure function of the store (rebuild the graph inside
/// it; run dropout-free). Parameters are restored to their original values
/// before returning.
pub fn check_gradients(
    store: &mut ParamStore,
    analytic: &BTreeMap<String, ArrayD<f64>>,
    mut loss_fn: impl FnMut(&ParamStore) -> f64,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    for name in names {
        let len = store.get(&name).expect("listed param exists").value.len();
        let coords: Vec<usize> = if len <= cfg.samples_per_param {
            (0..len).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < cfg.samples_per_param {
                picked.insert(rng.gen_range(0..len));
            }
            picked.into_iter().collect()
        };
        for idx in coords {
            let orig = store.get(&name).unwrap().value.as_slice().expect("standard layout")[idx];
            store.get_mut(&name).unwrap().value.as_slice_mut().unwrap()[idx] = orig + cfg.h;
            let plus = loss_fn(store);
            store.get_mut(&name).unwrap().value.as_slice_mut().unwrap()[idx] = orig - cfg.h;
            let minus = loss_fn(store);
            store.get_mut(&name).unwrap().value.as_slice_mut().unwrap()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic.get(&name).map(|g| g.as_slice().unwrap()[idx]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(cfg.floor);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_coord = idx;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report
}
