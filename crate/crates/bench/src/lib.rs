//! Benchmark fixtures for the estimator; see `benches/`.

use aggmarkov::{build_observation_set, ObservationSet, TransitionMatrix};

/// Noise-free snapshot pairs from `a` with deterministic, varied initial laws.
pub fn noise_free_observations(a: &TransitionMatrix, pairs: usize) -> ObservationSet {
    let n = a.n();
    let raw = (0..pairs)
        .map(|t| {
            let mu: Vec<f64> = (0..n)
                .map(|i| 1.0 + ((t * 7 + i * 13) % 11) as f64)
                .collect();
            let mass: f64 = mu.iter().sum();
            let mu: Vec<f64> = mu.iter().map(|v| v / mass).collect();
            let nu = a.propagate(&mu);
            (mu, nu)
        })
        .collect();
    build_observation_set(raw, false).expect("valid synthetic observations")
}
