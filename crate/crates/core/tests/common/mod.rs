#![allow(dead_code)]

use aggmarkov::sim::{random_stochastic_matrix, stream_rng, uniform_simplex};
use aggmarkov::{build_observation_set, MarginalPair, Matrix, ObservationSet, TransitionMatrix};
use rand::Rng;

/// Positive `n x n` matrix with entries in `[lo, lo + 1)`.
pub fn positive_matrix(n: usize, seed: u64, lo: f64) -> Matrix {
    let mut rng = stream_rng(seed, 0, 0, 100);
    Matrix::from_fn(n, n, |_, _| lo + rng.random::<f64>())
}

/// Unit-mass pair with every entry at least `floor`.
pub fn positive_pair(n: usize, seed: u64, floor: f64) -> MarginalPair {
    let mut rng = stream_rng(seed, 0, 0, 101);
    let mut draw = || {
        let p = uniform_simplex(n, &mut rng);
        let s: f64 = p.iter().map(|x| x + floor).sum();
        p.iter().map(|x| (x + floor) / s).collect::<Vec<_>>()
    };
    let mu = draw();
    let nu = draw();
    MarginalPair::from_vecs(mu, nu).unwrap()
}

/// Exact data `nu_t = A^T mu_t` from simplex-uniform `mu_t`.
pub fn noise_free(a: &TransitionMatrix, pairs: usize, seed: u64) -> ObservationSet {
    let mut rng = stream_rng(seed, 0, 0, 102);
    let raw = (0..pairs)
        .map(|_| {
            let mu = uniform_simplex(a.n(), &mut rng);
            let nu = a.propagate(&mu);
            (mu, nu)
        })
        .collect();
    build_observation_set(raw, false).unwrap()
}

pub fn random_positive_chain(n: usize, seed: u64) -> TransitionMatrix {
    random_stochastic_matrix(n, seed, true, 0.02)
}

/// Max of relative L1 residuals of both marginals.
pub fn marginal_residual(plan: &Matrix, pair: &MarginalPair) -> f64 {
    let mass = pair.mass();
    let rows: f64 = (0..plan.nrows())
        .map(|i| (plan.row(i).sum() - pair.mu()[i]).abs())
        .sum();
    let cols: f64 = (0..plan.ncols())
        .map(|j| (plan.column(j).sum() - pair.nu()[j]).abs())
        .sum();
    rows.max(cols) / mass
}
