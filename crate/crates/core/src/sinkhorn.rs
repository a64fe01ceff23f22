//! Bi-marginal KL projection by diagonal scaling.
//!
//! Given a nonnegative prior `X` and a marginal pair `(mu, nu)`, the minimizer
//! of `D(M | X)` over `{M >= 0 : M 1 = mu, M^T 1 = nu}` has the form
//! `diag(a) X diag(b)`. The scalings are found by alternating row and column
//! fits. Iterations run on the scalings directly and fall back to log-domain
//! updates when the prior has entries small enough to threaten underflow.

use std::collections::VecDeque;

use crate::error::{shape_err, Error, Result};
use crate::model::{MarginalPair, Matrix, TransportPlan};

/// Prior entries below this (but positive) switch the solver to log domain.
pub const LOG_DOMAIN_THRESHOLD: f64 = 1e-100;

const RENORMALIZE_EVERY: usize = 20;
const STAGNATION_WINDOW: usize = 100;
const STAGNATION_MIN_IMPROVEMENT: f64 = 1e-16;
/// Stagnating residuals above this are treated as an unreachable support.
const INFEASIBLE_RESIDUAL: f64 = 1e-6;

/// Row and column scalings; the plan is `diag(row) X diag(col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPair {
    pub row: Vec<f64>,
    pub col: Vec<f64>,
}

impl ScalingPair {
    pub fn ones(n: usize) -> Self {
        Self {
            row: vec![1.0; n],
            col: vec![1.0; n],
        }
    }

    /// `(c a, b / c)`, which leaves the plan unchanged.
    pub fn regauged(&self, c: f64) -> Self {
        Self {
            row: self.row.iter().map(|v| v * c).collect(),
            col: self.col.iter().map(|v| v / c).collect(),
        }
    }

    fn is_finite(&self) -> bool {
        self.row.iter().chain(&self.col).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkhornStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornReport {
    pub iterations: usize,
    /// Max of the two relative L1 marginal residuals.
    pub final_marginal_residual: f64,
    pub status: SinkhornStatus,
    pub log_domain: bool,
}

/// Stopping rule for [`kl_project_with`].
///
/// The solve stops as soon as the residual reaches `floor_tol`, or once at
/// least `min_sweeps` sweeps are done and the residual is below `tol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub min_sweeps: usize,
    pub floor_tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self::full(1e-9, 100_000)
    }
}

impl SinkhornOptions {
    pub fn full(tol: f64, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            min_sweeps: 0,
            floor_tol: tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub plan: TransportPlan,
    pub scalings: ScalingPair,
    pub report: SinkhornReport,
}

/// Projects `prior` onto the transportation polytope of `pair` in KL.
pub fn kl_project(
    prior: &Matrix,
    pair: &MarginalPair,
    tol: f64,
    max_iter: usize,
) -> Result<Projection> {
    kl_project_with(prior, pair, None, &SinkhornOptions::full(tol, max_iter))
}

/// [`kl_project`] with explicit warm-start scalings and stopping rule.
pub fn kl_project_with(
    prior: &Matrix,
    pair: &MarginalPair,
    init: Option<&ScalingPair>,
    opts: &SinkhornOptions,
) -> Result<Projection> {
    let n = pair.n();
    if prior.shape() != (n, n) {
        return Err(shape_err((n, n), prior.shape()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "tolerance must be positive, got {}",
            opts.tol
        )));
    }
    if prior.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::NonFinite);
    }
    check_support(prior, pair)?;

    let needs_log = prior.iter().any(|&v| v > 0.0 && v < LOG_DOMAIN_THRESHOLD);
    if !needs_log {
        match solve_scaling(prior, pair, init, opts) {
            Err(Error::NonFinite) => {}
            other => return other,
        }
    }
    solve_log(prior, pair, init, opts)
}

/// One sweep `a <- mu / (X b)`, then `b <- nu / (X^T a)`.
///
/// Scalings of zero marginal entries are set to zero.
pub fn sinkhorn_sweep(
    scalings: &ScalingPair,
    prior: &Matrix,
    pair: &MarginalPair,
) -> Result<ScalingPair> {
    let n = pair.n();
    if prior.shape() != (n, n) {
        return Err(shape_err((n, n), prior.shape()));
    }
    if scalings.row.len() != n || scalings.col.len() != n {
        return Err(shape_err((n, 2), (scalings.row.len(), scalings.col.len())));
    }
    let mut out = scalings.clone();
    sweep_in_place(&mut out, prior, pair)?;
    Ok(out)
}

/// `diag(a) X diag(b)` with `0 * anything = 0`.
pub fn plan_from_scalings(prior: &Matrix, scalings: &ScalingPair) -> Result<TransportPlan> {
    let (r, c) = prior.shape();
    if scalings.row.len() != r || scalings.col.len() != c {
        return Err(shape_err((r, c), (scalings.row.len(), scalings.col.len())));
    }
    Ok(TransportPlan(assemble(prior, scalings)))
}

fn assemble(prior: &Matrix, s: &ScalingPair) -> Matrix {
    Matrix::from_fn(prior.nrows(), prior.ncols(), |i, j| {
        let x = prior[(i, j)];
        if x == 0.0 || s.row[i] == 0.0 || s.col[j] == 0.0 {
            0.0
        } else {
            s.row[i] * x * s.col[j]
        }
    })
}

fn sweep_in_place(s: &mut ScalingPair, prior: &Matrix, pair: &MarginalPair) -> Result<()> {
    let n = pair.n();
    for i in 0..n {
        let mu = pair.mu()[i];
        if mu == 0.0 {
            s.row[i] = 0.0;
            continue;
        }
        let kb: f64 = (0..n).map(|j| prior[(i, j)] * s.col[j]).sum();
        let a = mu / kb;
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::NonFinite);
        }
        s.row[i] = a;
    }
    for j in 0..n {
        let nu = pair.nu()[j];
        if nu == 0.0 {
            s.col[j] = 0.0;
            continue;
        }
        let ka: f64 = (0..n).map(|i| prior[(i, j)] * s.row[i]).sum();
        let b = nu / ka;
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::NonFinite);
        }
        s.col[j] = b;
    }
    Ok(())
}

fn residual_of(plan: &Matrix, pair: &MarginalPair) -> f64 {
    let n = pair.n();
    let s = pair.mass();
    let mut row_err = 0.0;
    let mut col_err = 0.0;
    for i in 0..n {
        row_err += (plan.row(i).sum() - pair.mu()[i]).abs();
        col_err += (plan.column(i).sum() - pair.nu()[i]).abs();
    }
    f64::max(row_err, col_err) / s
}

/// Tracks residuals to decide convergence and detect stagnation.
struct Monitor {
    history: VecDeque<f64>,
}

enum Verdict {
    Continue,
    Converged,
    Floor,
}

impl Monitor {
    fn new() -> Self {
        Self {
            history: VecDeque::with_capacity(STAGNATION_WINDOW + 1),
        }
    }

    fn check(&mut self, residual: f64, sweeps: usize, opts: &SinkhornOptions) -> Result<Verdict> {
        if !residual.is_finite() {
            return Err(Error::NonFinite);
        }
        if residual <= opts.floor_tol || (sweeps >= opts.min_sweeps && residual <= opts.tol) {
            return Ok(Verdict::Converged);
        }
        self.history.push_back(residual);
        if self.history.len() > STAGNATION_WINDOW {
            let old = self.history.pop_front().unwrap_or(residual);
            if old - residual < STAGNATION_MIN_IMPROVEMENT {
                if residual > INFEASIBLE_RESIDUAL {
                    return Err(Error::InfeasibleSupport { residual });
                }
                return Ok(Verdict::Floor);
            }
        }
        Ok(Verdict::Continue)
    }
}

fn solve_scaling(
    prior: &Matrix,
    pair: &MarginalPair,
    init: Option<&ScalingPair>,
    opts: &SinkhornOptions,
) -> Result<Projection> {
    let n = pair.n();
    let mut s = match init {
        Some(s) if s.row.len() == n && s.col.len() == n && s.is_finite() => s.clone(),
        _ => ScalingPair::ones(n),
    };
    // zero-marginal convention and strictly positive start on the support
    for i in 0..n {
        if pair.mu()[i] == 0.0 {
            s.row[i] = 0.0;
        } else if !(s.row[i] > 0.0) {
            s.row[i] = 1.0;
        }
        if pair.nu()[i] == 0.0 {
            s.col[i] = 0.0;
        } else if !(s.col[i] > 0.0) {
            s.col[i] = 1.0;
        }
    }
    let mut monitor = Monitor::new();
    let mut plan = assemble(prior, &s);
    let mut residual = residual_of(&plan, pair);
    let mut sweeps = 0;
    let mut status = SinkhornStatus::MaxIterations;
    if residual <= opts.floor_tol {
        status = SinkhornStatus::Converged;
    } else {
        while sweeps < opts.max_iter {
            sweep_in_place(&mut s, prior, pair)?;
            sweeps += 1;
            if sweeps % RENORMALIZE_EVERY == 0 {
                let m = s.row.iter().cloned().fold(0.0, f64::max);
                if m > 0.0 {
                    s = s.regauged(1.0 / m);
                }
            }
            plan = assemble(prior, &s);
            residual = residual_of(&plan, pair);
            match monitor.check(residual, sweeps, opts)? {
                Verdict::Continue => {}
                Verdict::Converged => {
                    status = SinkhornStatus::Converged;
                    break;
                }
                Verdict::Floor => break,
            }
        }
    }
    if plan.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(Projection {
        plan: TransportPlan(plan),
        scalings: s,
        report: SinkhornReport {
            iterations: sweeps,
            final_marginal_residual: residual,
            status,
            log_domain: false,
        },
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.filter(|v| *v > f64::NEG_INFINITY).collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn solve_log(
    prior: &Matrix,
    pair: &MarginalPair,
    init: Option<&ScalingPair>,
    opts: &SinkhornOptions,
) -> Result<Projection> {
    let n = pair.n();
    let log_x = prior.map(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY });
    let log_mu: Vec<f64> = pair.mu().iter().map(|v| v.ln()).collect();
    let log_nu: Vec<f64> = pair.nu().iter().map(|v| v.ln()).collect();
    let start = |v: Option<f64>, marginal: f64| {
        if marginal == 0.0 {
            f64::NEG_INFINITY
        } else {
            match v {
                Some(x) if x > 0.0 && x.is_finite() => x.ln(),
                _ => 0.0,
            }
        }
    };
    let init = init.filter(|s| s.row.len() == n && s.col.len() == n);
    let mut f: Vec<f64> = (0..n)
        .map(|i| start(init.map(|s| s.row[i]), pair.mu()[i]))
        .collect();
    let mut g: Vec<f64> = (0..n)
        .map(|j| start(init.map(|s| s.col[j]), pair.nu()[j]))
        .collect();

    let build = |f: &[f64], g: &[f64]| {
        Matrix::from_fn(n, n, |i, j| {
            let e = f[i] + log_x[(i, j)] + g[j];
            if e == f64::NEG_INFINITY || e.is_nan() {
                0.0
            } else {
                e.exp()
            }
        })
    };

    let mut monitor = Monitor::new();
    let mut plan = build(&f, &g);
    let mut residual = residual_of(&plan, pair);
    let mut sweeps = 0;
    let mut status = SinkhornStatus::MaxIterations;
    if residual <= opts.floor_tol {
        status = SinkhornStatus::Converged;
    } else {
        while sweeps < opts.max_iter {
            for i in 0..n {
                if pair.mu()[i] == 0.0 {
                    continue;
                }
                let lse = log_sum_exp((0..n).map(|j| log_x[(i, j)] + g[j]));
                if lse == f64::NEG_INFINITY {
                    return Err(Error::InfeasibleSupport { residual });
                }
                f[i] = log_mu[i] - lse;
            }
            for j in 0..n {
                if pair.nu()[j] == 0.0 {
                    continue;
                }
                let lse = log_sum_exp((0..n).map(|i| log_x[(i, j)] + f[i]));
                if lse == f64::NEG_INFINITY {
                    return Err(Error::InfeasibleSupport { residual });
                }
                g[j] = log_nu[j] - lse;
            }
            sweeps += 1;
            plan = build(&f, &g);
            residual = residual_of(&plan, pair);
            match monitor.check(residual, sweeps, opts)? {
                Verdict::Continue => {}
                Verdict::Converged => {
                    status = SinkhornStatus::Converged;
                    break;
                }
                Verdict::Floor => break,
            }
        }
    }
    // balance the gauge before leaving log space
    let fmax = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gmax = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shift = if fmax.is_finite() && gmax.is_finite() {
        (fmax - gmax) / 2.0
    } else {
        0.0
    };
    let scalings = ScalingPair {
        row: f.iter().map(|v| (v - shift).exp()).collect(),
        col: g.iter().map(|v| (v + shift).exp()).collect(),
    };
    Ok(Projection {
        plan: TransportPlan(plan),
        scalings,
        report: SinkhornReport {
            iterations: sweeps,
            final_marginal_residual: residual,
            status,
            log_domain: true,
        },
    })
}

/// Exact feasibility of the marginals on the support of `prior`, by max-flow
/// from occupied rows to occupied columns through positive prior entries.
pub fn check_support(prior: &Matrix, pair: &MarginalPair) -> Result<()> {
    let n = pair.n();
    let rows: Vec<usize> = (0..n).filter(|&i| pair.mu()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n).filter(|&j| pair.nu()[j] > 0.0).collect();
    // node layout: 0 source, 1..=r rows, r+1..=r+c cols, r+c+1 sink
    let r = rows.len();
    let c = cols.len();
    let sink = r + c + 1;
    let mut net = FlowNetwork::new(sink + 1);
    for (a, &i) in rows.iter().enumerate() {
        net.add_edge(0, 1 + a, pair.mu()[i]);
        for (b, &j) in cols.iter().enumerate() {
            if prior[(i, j)] > 0.0 {
                net.add_edge(1 + a, 1 + r + b, f64::INFINITY);
            }
        }
    }
    for (b, &j) in cols.iter().enumerate() {
        net.add_edge(1 + r + b, sink, pair.nu()[j]);
    }
    let flow = net.max_flow(0, sink);
    let shortfall = (pair.mass() - flow) / pair.mass();
    if shortfall > 1e-9 {
        return Err(Error::InfeasibleSupport {
            residual: shortfall,
        });
    }
    Ok(())
}

struct FlowNetwork {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<f64>,
}

impl FlowNetwork {
    fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            to: Vec::new(),
            cap: Vec::new(),
        }
    }

    fn add_edge(&mut self, u: usize, v: usize, c: f64) {
        self.adj[u].push(self.to.len());
        self.to.push(v);
        self.cap.push(c);
        self.adj[v].push(self.to.len());
        self.to.push(u);
        self.cap.push(0.0);
    }

    // Edmonds-Karp; graphs here have at most 2n + 2 nodes.
    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut total = 0.0;
        loop {
            let mut parent_edge = vec![usize::MAX; self.adj.len()];
            let mut queue = VecDeque::from([s]);
            let mut seen = vec![false; self.adj.len()];
            seen[s] = true;
            while let Some(u) = queue.pop_front() {
                for &e in &self.adj[u] {
                    let v = self.to[e];
                    if !seen[v] && self.cap[e] > 0.0 {
                        seen[v] = true;
                        parent_edge[v] = e;
                        queue.push_back(v);
                    }
                }
            }
            if !seen[t] {
                return total;
            }
            let mut bottleneck = f64::INFINITY;
            let mut v = t;
            while v != s {
                let e = parent_edge[v];
                bottleneck = bottleneck.min(self.cap[e]);
                v = self.to[e ^ 1];
            }
            if !(bottleneck > 0.0) || !bottleneck.is_finite() {
                return total;
            }
            let mut v = t;
            while v != s {
                let e = parent_edge[v];
                self.cap[e] -= bottleneck;
                self.cap[e ^ 1] += bottleneck;
                v = self.to[e ^ 1];
            }
            total += bottleneck;
        }
    }
}
