//! Small numeric and RNG helpers shared across the pipeline.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sums `values` in a canonical order that depends only on the multiset of
/// values, never on their positions. Callers that must produce bit-identical
/// results under input permutations (patient-level aggregation, batch-axis
/// attention) route their reductions through this.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.iter().sum()
}

/// Mean via [`stable_sum`]; 0.0 for an empty slice.
pub fn stable_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    stable_sum(values) / values.len() as f64
}

/// Population standard deviation (divide by `n`, not `n - 1`).
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = stable_mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (stable_sum(&sq) / values.len() as f64).sqrt()
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mixes a stream tag into a base seed (FNV-1a), giving decorrelated but
/// fully deterministic child seeds — e.g. one training seed per fold.
pub fn derive_seed(base_seed: u64, stream: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325; // FNV-1a offset basis
    for byte in stream.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    base_seed ^ hash
}

/// Derives an independent RNG stream from a base seed and a stream tag, so
/// that e.g. parameter init, sampling, and dropout never share a stream.
/// Streams with different tags are independent ChaCha streams; the mapping is
/// fixed, which keeps every run with the same base seed bit-reproducible.
pub fn derive_rng(base_seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base_seed, stream))
}
