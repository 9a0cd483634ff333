//! Seeded problem generators shared by the benchmarks.

use numax_core::utility::{make_utility, normalize, UtilityModel, UtilitySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `k` channel coefficients spread over three decades.
pub fn random_betas(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| 10f64.powf(rng.random_range(0.0..3.0)))
        .collect()
}

/// Sigmoid, logarithmic and linear utilities normalized at `m` nats.
pub fn mixed_utilities(m: f64) -> Vec<UtilityModel> {
    [
        UtilitySpec::sigmoid(0.5 * m),
        UtilitySpec::log(1.0, 1.0, 1.0),
        UtilitySpec::linear(1.0),
    ]
    .iter()
    .map(|s| normalize(&make_utility(s).expect("closed form"), m).expect("increasing"))
    .collect()
}

/// Row-major `n x k` matrix of channel coefficients.
pub fn random_beta_matrix(n: usize, k: usize, seed: u64) -> Vec<f64> {
    random_betas(n * k, seed)
}
