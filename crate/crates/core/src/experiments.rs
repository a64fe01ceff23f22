//! Error-curve experiments: estimation error against the number of observed
//! snapshot pairs, repeated over seeds and particle counts.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimateResult, EstimatorConfig};
use crate::model::{frobenius_error, TransitionMatrix};
use crate::sim::{
    mix_key, paper_matrix, random_stochastic_matrix, sample_empirical_marginals, Particles,
    SamplingMode, SimulationConfig,
};

pub const CSV_HEADER: &str = "n_particles,tau,repeat,frobenius_error";
pub const SUMMARY_HEADER: &str = "# summary: n_particles,tau,mean,ci_low,ci_high";
pub const SLOPE_HEADER: &str = "# slope: n_particles,slope";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentMode {
    Independent,
    SequentialPaperA,
    SequentialRandomA,
}

impl ExperimentMode {
    pub fn sampling(self) -> SamplingMode {
        match self {
            ExperimentMode::Independent => SamplingMode::Independent,
            _ => SamplingMode::Sequential,
        }
    }

    pub fn default_tau_grid(self) -> Vec<usize> {
        match self {
            ExperimentMode::Independent => vec![8, 16, 32, 64, 128, 256],
            _ => vec![50, 100, 200, 400, 800, 1600],
        }
    }
}

impl std::fmt::Display for ExperimentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExperimentMode::Independent => "independent",
            ExperimentMode::SequentialPaperA => "sequential-paper",
            ExperimentMode::SequentialRandomA => "sequential-random",
        })
    }
}

impl FromStr for ExperimentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(ExperimentMode::Independent),
            "sequential-paper" => Ok(ExperimentMode::SequentialPaperA),
            "sequential-random" => Ok(ExperimentMode::SequentialRandomA),
            other => Err(Error::InvalidConfig(format!(
                "unknown experiment mode '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    pub n: usize,
    pub particle_counts: Vec<Particles>,
    pub tau_grid: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    /// Ground truth; when absent the mode picks the reference matrix or a
    /// random positive matrix keyed by the seed.
    pub transition: Option<TransitionMatrix>,
    pub tail_fraction: f64,
    pub random_min_entry: f64,
}

impl ExperimentConfig {
    pub fn new(mode: ExperimentMode) -> Self {
        Self {
            mode,
            n: 5,
            particle_counts: match mode {
                ExperimentMode::Independent => {
                    vec![Particles::Finite(1000), Particles::Finite(100_000)]
                }
                _ => vec![
                    Particles::Finite(2),
                    Particles::Finite(100),
                    Particles::Finite(10_000),
                ],
            },
            tau_grid: mode.default_tau_grid(),
            repeats: 10,
            seed: 0,
            estimator: EstimatorConfig::default(),
            transition: None,
            tail_fraction: 0.5,
            random_min_entry: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be at least 1".into()));
        }
        if self.tau_grid.is_empty() || self.tau_grid[0] == 0 {
            return Err(Error::InvalidConfig(
                "tau_grid must be non-empty and positive".into(),
            ));
        }
        if self.tau_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "tau_grid must be strictly increasing".into(),
            ));
        }
        if self.particle_counts.is_empty() {
            return Err(Error::InvalidConfig(
                "particle_counts must be non-empty".into(),
            ));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "tail_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.n < 2 {
            return Err(Error::InvalidConfig("need at least two states".into()));
        }
        self.estimator.validate()
    }

    /// The chain the observations are drawn from.
    pub fn truth(&self) -> Result<TransitionMatrix> {
        if let Some(a) = &self.transition {
            if a.n() != self.n {
                return Err(Error::InvalidConfig(format!(
                    "transition has {} states, config says {}",
                    a.n(),
                    self.n
                )));
            }
            return Ok(a.clone());
        }
        match self.mode {
            ExperimentMode::SequentialRandomA => Ok(random_stochastic_matrix(
                self.n,
                self.seed,
                true,
                self.random_min_entry,
            )),
            _ if self.n == 5 => Ok(paper_matrix()),
            _ => Err(Error::InvalidConfig(
                "the reference matrix has 5 states; supply a transition for other sizes".into(),
            )),
        }
    }
}

fn particles_key(p: Particles) -> u64 {
    match p {
        Particles::Finite(k) => k,
        Particles::Infinite => u64::MAX,
    }
}

fn particles_order(a: Particles, b: Particles) -> Ordering {
    particles_key(a).cmp(&particles_key(b))
}

/// Simulation seed of a cell. It does not depend on `tau`, so within one
/// repeat the smaller cells see a prefix of the larger cells' data.
pub fn cell_seed(seed: u64, n_particles: Particles) -> u64 {
    mix_key(&[seed, particles_key(n_particles)])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRow {
    pub n_particles: Particles,
    pub tau: usize,
    pub repeat: usize,
    /// `NaN` when the cell's estimation failed.
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub n_particles: Particles,
    pub tau: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub rows: Vec<ErrorRow>,
    pub summary: Vec<SummaryRow>,
    /// `NaN` where the fit was impossible.
    pub slopes: Vec<(Particles, f64)>,
}

/// Simulates and estimates one cell.
pub fn estimate_cell(
    cfg: &ExperimentConfig,
    truth: &TransitionMatrix,
    n_particles: Particles,
    tau: usize,
    repeat: usize,
) -> Result<EstimateResult> {
    let mut sim = SimulationConfig::new(
        cfg.n,
        n_particles,
        tau,
        cfg.mode.sampling(),
        cell_seed(cfg.seed, n_particles),
    );
    sim.repeat = repeat as u64;
    let obs = sample_empirical_marginals(truth, &sim)?;
    estimate(&obs, &cfg.estimator)
}

pub fn run_cell(
    cfg: &ExperimentConfig,
    truth: &TransitionMatrix,
    n_particles: Particles,
    tau: usize,
    repeat: usize,
) -> ErrorRow {
    let error = estimate_cell(cfg, truth, n_particles, tau, repeat)
        .and_then(|r| frobenius_error(r.transition.matrix(), truth.matrix()))
        .unwrap_or(f64::NAN);
    ErrorRow {
        n_particles,
        tau,
        repeat,
        error,
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ErrorCurve> {
    run_experiment_with(cfg, |_| {})
}

/// Runs every cell in parallel, handing each finished row to `on_row` as it
/// completes. The returned curve is in canonical order.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, on_row: F) -> Result<ErrorCurve>
where
    F: FnMut(&ErrorRow) + Send,
{
    cfg.validate()?;
    let truth = cfg.truth()?;
    let mut cells = Vec::new();
    for &np in &cfg.particle_counts {
        for &tau in &cfg.tau_grid {
            for repeat in 0..cfg.repeats {
                cells.push((np, tau, repeat));
            }
        }
    }
    let sink = Mutex::new(on_row);
    let mut rows: Vec<ErrorRow> = cells
        .par_iter()
        .map(|&(np, tau, repeat)| {
            let row = run_cell(cfg, &truth, np, tau, repeat);
            if let Ok(mut f) = sink.lock() {
                f(&row);
            }
            row
        })
        .collect();
    sort_rows(&mut rows);
    let summary = summarize(&rows);
    let slopes = slopes_by_particles(&summary, cfg.tail_fraction);
    Ok(ErrorCurve {
        rows,
        summary,
        slopes,
    })
}

pub fn sort_rows(rows: &mut [ErrorRow]) {
    rows.sort_by(|a, b| {
        particles_order(a.n_particles, b.n_particles)
            .then(a.tau.cmp(&b.tau))
            .then(a.repeat.cmp(&b.repeat))
    });
}

/// Mean and normal-approximation 95% interval per `(N, tau)`, skipping `NaN`.
pub fn summarize(rows: &[ErrorRow]) -> Vec<SummaryRow> {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut out = Vec::new();
    for group in sorted.chunk_by(|a, b| a.n_particles == b.n_particles && a.tau == b.tau) {
        let values: Vec<f64> = group
            .iter()
            .map(|r| r.error)
            .filter(|e| !e.is_nan())
            .collect();
        let k = values.len();
        let (mean, half) = if k == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let mean = values.iter().sum::<f64>() / k as f64;
            let half = if k > 1 {
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
                1.96 * var.sqrt() / (k as f64).sqrt()
            } else {
                0.0
            };
            (mean, half)
        };
        out.push(SummaryRow {
            n_particles: group[0].n_particles,
            tau: group[0].tau,
            mean,
            ci_low: mean - half,
            ci_high: mean + half,
            count: k,
        });
    }
    out
}

/// Least-squares slope of `log(error)` against `log(tau)` over the last
/// `tail_fraction` of the points, widened to at least three points.
pub fn fit_loglog_slope(points: &[(f64, f64)], tail_fraction: f64) -> Result<f64> {
    let len = points.len();
    if len < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            found: len,
        });
    }
    let window = ((tail_fraction * len as f64).ceil() as usize).clamp(3, len);
    let tail = &points[len - window..];
    if let Some(&(_, e)) = tail.iter().find(|(_, e)| !(*e > 0.0)) {
        return Err(Error::NonPositiveError { value: e });
    }
    let xs: Vec<f64> = tail.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = tail.iter().map(|(_, e)| e.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            found: 1,
        });
    }
    Ok(sxy / sxx)
}

pub fn slopes_by_particles(summary: &[SummaryRow], tail_fraction: f64) -> Vec<(Particles, f64)> {
    let mut out = Vec::new();
    for group in summary.chunk_by(|a, b| a.n_particles == b.n_particles) {
        let points: Vec<(f64, f64)> = group
            .iter()
            .filter(|s| !s.mean.is_nan())
            .map(|s| (s.tau as f64, s.mean))
            .collect();
        out.push((
            group[0].n_particles,
            fit_loglog_slope(&points, tail_fraction).unwrap_or(f64::NAN),
        ));
    }
    out
}

/// Shortest round-trip decimal, `nan` for missing values.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:?}")
    }
}

impl ErrorCurve {
    /// CSV rows, then the summary and slope blocks as comment lines. Interval
    /// bounds are floored at zero here since errors cannot be negative.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.n_particles,
                r.tau,
                r.repeat,
                format_float(r.error)
            );
        }
        s.push_str(SUMMARY_HEADER);
        s.push('\n');
        for r in &self.summary {
            let _ = writeln!(
                s,
                "# {},{},{},{},{}",
                r.n_particles,
                r.tau,
                format_float(r.mean),
                format_float(display_floor(r.ci_low)),
                format_float(r.ci_high)
            );
        }
        s.push_str(SLOPE_HEADER);
        s.push('\n');
        for (np, slope) in &self.slopes {
            let _ = writeln!(s, "# {},{}", np, format_float(*slope));
        }
        s
    }
}

pub(crate) fn display_floor(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}
