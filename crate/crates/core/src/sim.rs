//! Synthetic aggregate observations from a known chain, and chain analytics.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution as _, Exp1};
use statrs::function::gamma::ln_gamma;

use crate::error::{shape_err, Error, Result};
use crate::model::{Distribution, MarginalPair, Matrix, ObservationSet, TransitionMatrix};

/// Number of particles per snapshot; `Infinite` propagates laws exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Particles {
    Finite(u64),
    Infinite,
}

impl fmt::Display for Particles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Particles::Finite(n) => write!(f, "{n}"),
            Particles::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Particles {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "Infinity" => Ok(Particles::Infinite),
            other => match other.parse::<u64>() {
                Ok(n) if n >= 1 => Ok(Particles::Finite(n)),
                _ => Err(Error::InvalidConfig(format!(
                    "invalid particle count {other:?}"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Each pair starts from a fresh initial law and takes one step.
    Independent,
    /// One population observed at consecutive times.
    Sequential,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Independent => "independent",
            SamplingMode::Sequential => "sequential",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    /// Uniform on the probability simplex (normalized exponentials).
    UniformRandomSimplex,
    Fixed(Distribution),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub n: usize,
    pub particles: Particles,
    pub n_pairs: usize,
    pub mode: SamplingMode,
    pub seed: u64,
    /// Extra key for the random streams, so repeats of an experiment differ.
    pub repeat: u64,
    pub initial_law: InitialLaw,
    /// Sequential mode only: steps discarded before the first snapshot.
    pub burn_in: usize,
}

impl SimulationConfig {
    pub fn new(
        n: usize,
        particles: Particles,
        n_pairs: usize,
        mode: SamplingMode,
        seed: u64,
    ) -> Self {
        Self {
            n,
            particles,
            n_pairs,
            mode,
            seed,
            repeat: 0,
            initial_law: InitialLaw::UniformRandomSimplex,
            burn_in: 0,
        }
    }

    fn validate(&self, a: &TransitionMatrix) -> Result<()> {
        if self.n != a.n() {
            return Err(Error::InvalidConfig(format!(
                "config has {} states but the transition matrix has {}",
                self.n,
                a.n()
            )));
        }
        if self.n_pairs == 0 {
            return Err(Error::InvalidConfig("need at least one pair".into()));
        }
        if let Particles::Finite(0) = self.particles {
            return Err(Error::InvalidConfig("need at least one particle".into()));
        }
        if let InitialLaw::Fixed(d) = &self.initial_law {
            if d.len() != self.n || !(d.mass() > 0.0) {
                return Err(Error::InvalidConfig(
                    "fixed initial law must have n entries and positive mass".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Random stream stages.
const STAGE_LAW: u64 = 0;
const STAGE_PLACE: u64 = 1;
const STAGE_STEP: u64 = 2;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes an ordered key into a 64-bit value.
pub fn mix_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Independent random stream keyed by `(seed, repeat, index, stage)`.
pub fn stream_rng(seed: u64, repeat: u64, index: u64, stage: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    let mut h = mix_key(&[seed, repeat, index, stage]);
    for chunk in bytes.chunks_mut(8) {
        h = splitmix(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// A point drawn uniformly from the probability simplex.
pub fn uniform_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|d| d / total).collect()
}

/// Multinomial counts by sequential conditional binomials.
pub fn multinomial<R: Rng + ?Sized>(trials: u64, probs: &[f64], rng: &mut R) -> Vec<u64> {
    let mut counts = vec![0u64; probs.len()];
    let mut remaining = trials;
    let mut rest: f64 = probs.iter().sum();
    for (k, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if k + 1 == probs.len() && p > 0.0 {
            counts[k] = remaining;
            remaining = 0;
            break;
        }
        let q = if rest > 0.0 {
            (p / rest).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let x = if q >= 1.0 {
            remaining
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(remaining, q)
                .map(|b| b.sample(rng))
                .unwrap_or(0)
        };
        counts[k] = x;
        remaining -= x;
        rest -= p;
    }
    // a trailing zero-probability tail cannot receive particles
    if remaining > 0 {
        if let Some(k) = probs.iter().rposition(|&p| p > 0.0) {
            counts[k] += remaining;
        }
    }
    counts
}

fn step_counts<R: Rng + ?Sized>(a: &TransitionMatrix, counts: &[u64], rng: &mut R) -> Vec<u64> {
    let n = a.n();
    let mut next = vec![0u64; n];
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let row: Vec<f64> = (0..n).map(|j| a.get(i, j)).collect();
        for (j, k) in multinomial(c, &row, rng).into_iter().enumerate() {
            next[j] += k;
        }
    }
    next
}

fn frequencies(counts: &[u64], total: u64) -> Vec<f64> {
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

fn initial_law(cfg: &SimulationConfig, index: u64) -> Vec<f64> {
    match &cfg.initial_law {
        InitialLaw::UniformRandomSimplex => {
            let mut rng = stream_rng(cfg.seed, cfg.repeat, index, STAGE_LAW);
            uniform_simplex(cfg.n, &mut rng)
        }
        InitialLaw::Fixed(d) => d.normalized().into_weights(),
    }
}

/// Draws `n_pairs` snapshot pairs from the chain `a`.
///
/// Every snapshot has unit mass. In sequential mode `nu_t` and `mu_{t+1}`
/// are the same vector.
pub fn sample_empirical_marginals(
    a: &TransitionMatrix,
    cfg: &SimulationConfig,
) -> Result<ObservationSet> {
    cfg.validate(a)?;
    let raw: Vec<(Vec<f64>, Vec<f64>)> = match (cfg.mode, cfg.particles) {
        (SamplingMode::Independent, Particles::Infinite) => (0..cfg.n_pairs)
            .map(|t| {
                let mu = initial_law(cfg, t as u64);
                let nu = a.propagate(&mu);
                (mu, nu)
            })
            .collect(),
        (SamplingMode::Independent, Particles::Finite(np)) => (0..cfg.n_pairs)
            .map(|t| {
                let law = initial_law(cfg, t as u64);
                let mut rng = stream_rng(cfg.seed, cfg.repeat, t as u64, STAGE_PLACE);
                let counts = multinomial(np, &law, &mut rng);
                let mut rng = stream_rng(cfg.seed, cfg.repeat, t as u64, STAGE_STEP);
                let next = step_counts(a, &counts, &mut rng);
                (frequencies(&counts, np), frequencies(&next, np))
            })
            .collect(),
        (SamplingMode::Sequential, Particles::Infinite) => {
            let mut law = initial_law(cfg, 0);
            for _ in 0..cfg.burn_in {
                law = a.propagate(&law);
            }
            let mut snapshots = vec![law];
            for t in 0..cfg.n_pairs {
                let next = a.propagate(&snapshots[t]);
                snapshots.push(next);
            }
            consecutive(snapshots)
        }
        (SamplingMode::Sequential, Particles::Finite(np)) => {
            let law = initial_law(cfg, 0);
            let mut rng = stream_rng(cfg.seed, cfg.repeat, 0, STAGE_PLACE);
            let mut counts = multinomial(np, &law, &mut rng);
            let mut step = 0u64;
            let mut advance = |counts: &[u64]| {
                let mut rng = stream_rng(cfg.seed, cfg.repeat, step, STAGE_STEP);
                step += 1;
                step_counts(a, counts, &mut rng)
            };
            for _ in 0..cfg.burn_in {
                counts = advance(&counts);
            }
            let mut snapshots = vec![frequencies(&counts, np)];
            for _ in 0..cfg.n_pairs {
                counts = advance(&counts);
                snapshots.push(frequencies(&counts, np));
            }
            consecutive(snapshots)
        }
    };
    let pairs = raw
        .into_iter()
        .enumerate()
        .map(|(t, (mu, nu))| {
            MarginalPair::new(Distribution::new(mu)?, Distribution::new(nu)?).map_err(|e| match e {
                Error::MassMismatch {
                    mu_mass, nu_mass, ..
                } => Error::MassMismatch {
                    pair: t,
                    mu_mass,
                    nu_mass,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ObservationSet::new(pairs)
}

fn consecutive(snapshots: Vec<Vec<f64>>) -> Vec<(Vec<f64>, Vec<f64>)> {
    snapshots
        .windows(2)
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect()
}

/// Log-probability that particles counted by `mu0` move as the count matrix `m`.
///
/// Returns `-inf` when `m` puts particles on a zero of `a`.
pub fn log_transition_probability(
    mu0: &[i64],
    a: &TransitionMatrix,
    m: &DMatrix<i64>,
) -> Result<f64> {
    let n = a.n();
    if mu0.len() != n {
        return Err(shape_err((n, 1), (mu0.len(), 1)));
    }
    if m.shape() != (n, n) {
        return Err(shape_err((n, n), m.shape()));
    }
    if let Some(&value) = mu0.iter().chain(m.iter()).find(|&&v| v < 0) {
        return Err(Error::NegativeCount { value });
    }
    let mut total = 0.0;
    let mut impossible = false;
    for i in 0..n {
        let row_sum: i64 = m.row(i).iter().sum();
        if row_sum != mu0[i] {
            return Err(Error::MarginalMismatch { row: i });
        }
        total += ln_gamma(mu0[i] as f64 + 1.0);
        for j in 0..n {
            let k = m[(i, j)];
            if k == 0 {
                continue;
            }
            let p = a.get(i, j);
            if p == 0.0 {
                impossible = true;
                continue;
            }
            total += k as f64 * p.ln() - ln_gamma(k as f64 + 1.0);
        }
    }
    Ok(if impossible { f64::NEG_INFINITY } else { total })
}

/// Strong connectivity of the directed graph `i -> j` where `a(i,j) > 0`.
pub fn is_irreducible(a: &TransitionMatrix) -> bool {
    let n = a.n();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                let w = if forward { a.get(u, v) } else { a.get(v, u) };
                if w > 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    n > 0 && reach(true) && reach(false)
}

/// The unique `pi` with `A^T pi = pi`, `sum pi = 1`.
pub fn stationary_distribution(a: &TransitionMatrix, tol: f64) -> Result<Distribution> {
    if !is_irreducible(a) {
        return Err(Error::Reducible);
    }
    let n = a.n();
    // (A^T - I) pi = 0 with the last equation replaced by sum(pi) = 1
    let mut system = a.matrix().transpose() - Matrix::identity(n, n);
    system.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let solved = system.lu().solve(&rhs).ok_or(Error::NotConverged {
        residual: f64::INFINITY,
    })?;
    let mut pi: Vec<f64> = solved.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= total);
    let moved = a.propagate(&pi);
    let residual: f64 = moved.iter().zip(&pi).map(|(x, y)| (x - y).abs()).sum();
    if !(residual <= tol) {
        return Err(Error::NotConverged { residual });
    }
    Distribution::new(pi)
}

/// Half the L1 distance.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape_err((p.len(), 1), (q.len(), 1)));
    }
    Ok(0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingStats {
    pub pi: Distribution,
    /// Worst-case distance to stationarity for `t = 0..=horizon`.
    pub d: Vec<f64>,
    pub t_mix: Option<usize>,
    /// Modulus of the second-largest eigenvalue.
    pub alpha_hat: f64,
}

/// Distance-to-stationarity curve, mixing time and spectral modulus.
///
/// The supremum over initial laws is attained at a point mass, so `d(t)` is
/// the maximum over the rows of `A^t`.
pub fn mixing_stats(a: &TransitionMatrix, eps: f64, horizon: usize) -> Result<MixingStats> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    let pi = stationary_distribution(a, 1e-10)?;
    let n = a.n();
    let mut power = Matrix::identity(n, n);
    let mut d = Vec::with_capacity(horizon + 1);
    let mut t_mix = None;
    for t in 0..=horizon {
        let worst = (0..n)
            .map(|i| {
                let row: Vec<f64> = power.row(i).iter().copied().collect();
                tv_distance(&row, pi.weights()).unwrap_or(f64::NAN)
            })
            .fold(0.0, f64::max);
        if t_mix.is_none() && worst <= eps {
            t_mix = Some(t);
        }
        d.push(worst);
        power = &power * a.matrix();
    }
    let mut moduli: Vec<f64> = a
        .matrix()
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .collect();
    moduli.sort_by(|x, y| y.total_cmp(x));
    let alpha_hat = moduli.get(1).copied().unwrap_or(0.0);
    Ok(MixingStats {
        pi,
        d,
        t_mix,
        alpha_hat,
    })
}

/// Random row-stochastic matrix with simplex-uniform rows.
///
/// With `strictly_positive`, `min_entry` is added to every entry before the
/// rows are renormalized.
pub fn random_stochastic_matrix(
    n: usize,
    seed: u64,
    strictly_positive: bool,
    min_entry: f64,
) -> TransitionMatrix {
    let mut rng = stream_rng(seed, 0, n as u64, 0x7261_6e64);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut row = uniform_simplex(n, &mut rng);
            if strictly_positive {
                row.iter_mut().for_each(|v| *v += min_entry);
            }
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect()
        })
        .collect();
    TransitionMatrix::from_rows(&rows).expect("normalized rows are stochastic")
}

/// Five-state transition matrix estimated from flow cytometry data, used as
/// ground truth in the reference simulation studies.
pub fn paper_matrix() -> TransitionMatrix {
    let rows = [
        [0.48, 0.50, 0.0, 0.02, 0.0],
        [0.33, 0.27, 0.0, 0.40, 0.0],
        [0.0, 0.0, 0.0, 0.54, 0.46],
        [0.26, 0.0, 0.45, 0.29, 0.0],
        [0.0, 0.0, 0.51, 0.0, 0.49],
    ];
    TransitionMatrix::from_rows(&rows.map(|r| r.to_vec())).expect("reference matrix is stochastic")
}
