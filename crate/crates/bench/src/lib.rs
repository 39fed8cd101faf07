//! Fixtures shared by the benchmarks.

use oemhmm_core::{simulate, stationary_distribution, HmmParams};

/// Model with `m` states: sticky transitions, means `0, 1, ..., m - 1`.
pub fn chain(m: usize) -> HmmParams {
    let stay = 0.9;
    let off = if m > 1 { (1.0 - stay) / (m - 1) as f64 } else { 0.0 };
    let q = (0..m * m).map(|k| if m == 1 || k / m == k % m { if m == 1 { 1.0 } else { stay } } else { off }).collect();
    HmmParams::new(q, (0..m).map(|i| i as f64).collect(), 0.5).expect("valid chain")
}

/// Observations of length `n + 1` drawn from `params`.
pub fn record(params: &HmmParams, n: usize, seed: u64) -> Vec<f64> {
    let pi = stationary_distribution(params).expect("irreducible");
    simulate(params, n, &pi, seed).expect("valid inputs").observations
}
