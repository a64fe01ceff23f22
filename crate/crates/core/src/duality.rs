//! Dual variables, complementary slackness and uniqueness certificates.
//!
//! At an optimum every plan factors as `M_t = Mbar * u_t v_t^T` (entrywise),
//! with `sum_t u_t(i) v_t(j) <= 1` and equality wherever `Mbar > 0`. The
//! scalings are read back from the plans rather than from the solver state,
//! since the inner scalings are relative to the last prior.

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};
use crate::estimator::{objective_value, EstimateResult};
use crate::model::{Matrix, ObservationSet};

/// Relative L1 misfit above which a ratio matrix is not rank one.
pub const RANK_ONE_TOLERANCE: f64 = 1e-4;
/// Slack on the dual constraint for the active/inactive split.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-6;
/// Singular values below this fraction of the largest count as zero.
pub const RANK_THRESHOLD: f64 = 1e-8;
/// Aggregate entries at or below this (times the mean pair mass) are off support.
pub const SUPPORT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DualScalings {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Factor `c_t` divided out of `u_t` and multiplied into `v_t`.
    pub gauge: Vec<f64>,
    /// States never occupied by `mu_t`; `u_t` is zero there.
    pub u_extrapolated: Vec<Vec<bool>>,
    /// States never occupied by `nu_t`; `v_t` is zero there.
    pub v_extrapolated: Vec<Vec<bool>>,
    /// Largest relative misfit of `Mbar * u_t v_t^T` over the pairs.
    pub fit_error: f64,
    pub support: DMatrix<bool>,
}

impl DualScalings {
    pub fn n(&self) -> usize {
        self.support.nrows()
    }

    /// `lambda_t = log u_t`, with `-inf` at extrapolated states.
    pub fn lambdas(&self) -> Vec<Vec<f64>> {
        self.u
            .iter()
            .map(|u| u.iter().map(|x| x.ln()).collect())
            .collect()
    }

    pub fn rhos(&self) -> Vec<Vec<f64>> {
        self.v
            .iter()
            .map(|v| v.iter().map(|x| x.ln()).collect())
            .collect()
    }

    /// `sum_t u_t(i) v_t(j)` for every entry.
    pub fn constraint_matrix(&self) -> Matrix {
        let n = self.n();
        let mut b = Matrix::zeros(n, n);
        for (u, v) in self.u.iter().zip(&self.v) {
            for i in 0..n {
                for j in 0..n {
                    b[(i, j)] += u[i] * v[j];
                }
            }
        }
        b
    }
}

fn support_of(aggregate: &Matrix, n_pairs: usize) -> DMatrix<bool> {
    let scale = (aggregate.sum() / n_pairs.max(1) as f64).max(f64::MIN_POSITIVE);
    aggregate.map(|x| x > SUPPORT_TOLERANCE * scale)
}

/// Weighted least-squares fit of `log R(i,j) = a_i + b_j` over entries
/// with positive weight.
fn fit_log_ratio(logr: &Matrix, w: &Matrix, rows: &[bool], cols: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let n = logr.nrows();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for _ in 0..500 {
        let mut delta: f64 = 0.0;
        for i in (0..n).filter(|&i| rows[i]) {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..n {
                if w[(i, j)] > 0.0 {
                    num += w[(i, j)] * (logr[(i, j)] - b[j]);
                    den += w[(i, j)];
                }
            }
            if den > 0.0 {
                let next = num / den;
                delta = delta.max((next - a[i]).abs());
                a[i] = next;
            }
        }
        for j in (0..n).filter(|&j| cols[j]) {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                if w[(i, j)] > 0.0 {
                    num += w[(i, j)] * (logr[(i, j)] - a[i]);
                    den += w[(i, j)];
                }
            }
            if den > 0.0 {
                let next = num / den;
                delta = delta.max((next - b[j]).abs());
                b[j] = next;
            }
        }
        if delta < 1e-15 {
            break;
        }
    }
    (a, b)
}

/// Reads the dual scalings off the plans of an estimate.
pub fn extract_dual_scalings(result: &EstimateResult) -> Result<DualScalings> {
    let xbar = result.aggregate.matrix();
    let n = xbar.nrows();
    let n_pairs = result.plans.len();
    let mut out = DualScalings {
        u: Vec::with_capacity(n_pairs),
        v: Vec::with_capacity(n_pairs),
        gauge: Vec::with_capacity(n_pairs),
        u_extrapolated: Vec::with_capacity(n_pairs),
        v_extrapolated: Vec::with_capacity(n_pairs),
        fit_error: 0.0,
        support: support_of(xbar, n_pairs),
    };
    for (t, plan) in result.plans.iter().enumerate() {
        let m = plan.matrix();
        if m.shape() != xbar.shape() {
            return Err(shape_err(xbar.shape(), m.shape()));
        }
        let rows: Vec<bool> = plan.row_sums().iter().map(|&s| s > 0.0).collect();
        let cols: Vec<bool> = plan.col_sums().iter().map(|&s| s > 0.0).collect();
        let mut logr = Matrix::zeros(n, n);
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if m[(i, j)] > 0.0 && xbar[(i, j)] > 0.0 {
                    logr[(i, j)] = (m[(i, j)] / xbar[(i, j)]).ln();
                    w[(i, j)] = m[(i, j)];
                }
            }
        }
        let (a, b) = fit_log_ratio(&logr, &w, &rows, &cols);
        let mut u: Vec<f64> = (0..n)
            .map(|i| if rows[i] { a[i].exp() } else { 0.0 })
            .collect();
        let mut v: Vec<f64> = (0..n)
            .map(|j| if cols[j] { b[j].exp() } else { 0.0 })
            .collect();

        let mass = m.sum();
        let mut misfit = 0.0;
        for i in 0..n {
            for j in 0..n {
                misfit += (m[(i, j)] - xbar[(i, j)] * u[i] * v[j]).abs();
            }
        }
        let rel = misfit / mass;
        if !(rel <= RANK_ONE_TOLERANCE) {
            return Err(Error::NotRankOne {
                pair: t,
                error: rel,
            });
        }
        out.fit_error = out.fit_error.max(rel);

        let c = u.iter().cloned().fold(0.0, f64::max);
        if c > 0.0 {
            u.iter_mut().for_each(|x| *x /= c);
            v.iter_mut().for_each(|x| *x *= c);
        }
        out.gauge.push(c);
        out.u.push(u);
        out.v.push(v);
        out.u_extrapolated.push(rows.iter().map(|r| !r).collect());
        out.v_extrapolated.push(cols.iter().map(|c| !c).collect());
    }
    Ok(out)
}

/// `sum_t lambda_t^T mu_t + rho_t^T nu_t`, with `(-inf) * 0 = 0`.
pub fn dual_objective(
    lambdas: &[Vec<f64>],
    rhos: &[Vec<f64>],
    obs: &ObservationSet,
) -> Result<f64> {
    let (n, t) = (obs.n(), obs.len());
    if lambdas.len() != t || rhos.len() != t {
        return Err(shape_err((t, n), (lambdas.len().min(rhos.len()), n)));
    }
    let dot = |x: &[f64], w: &[f64]| -> Result<f64> {
        if x.len() != w.len() {
            return Err(shape_err((w.len(), 1), (x.len(), 1)));
        }
        Ok(x.iter()
            .zip(w)
            .filter(|(_, &wi)| wi != 0.0)
            .map(|(xi, wi)| xi * wi)
            .sum())
    };
    let mut total = 0.0;
    for ((l, r), pair) in lambdas.iter().zip(rhos).zip(obs.pairs()) {
        total += dot(l, pair.mu())? + dot(r, pair.nu())?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintStatus {
    Active,
    Inactive,
    /// Amount by which the constraint exceeds one.
    Violated(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub max_constraint: f64,
    pub values: Matrix,
    pub status: DMatrix<ConstraintStatus>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.max_constraint <= 1.0 + FEASIBILITY_TOLERANCE
    }

    pub fn inactive_set(&self) -> Vec<(usize, usize)> {
        entries_where(&self.status, |s| matches!(s, ConstraintStatus::Inactive))
    }

    /// Largest `|value - 1|` over entries on the aggregate's support.
    pub fn max_support_deviation(&self, support: &DMatrix<bool>) -> f64 {
        self.values
            .iter()
            .zip(support.iter())
            .filter(|(_, &s)| s)
            .map(|(v, _)| (v - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn entries_where<T, F>(m: &DMatrix<T>, f: F) -> Vec<(usize, usize)>
where
    T: nalgebra::Scalar + Copy,
    F: Fn(T) -> bool,
{
    let mut out = Vec::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if f(m[(i, j)]) {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn check_dual_feasibility(scalings: &DualScalings) -> FeasibilityReport {
    let values = scalings.constraint_matrix();
    let status = values.map(|b| {
        if b > 1.0 + FEASIBILITY_TOLERANCE {
            ConstraintStatus::Violated(b - 1.0)
        } else if b < 1.0 - FEASIBILITY_TOLERANCE {
            ConstraintStatus::Inactive
        } else {
            ConstraintStatus::Active
        }
    });
    FeasibilityReport {
        max_constraint: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        values,
        status,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Certified,
    NotUnique,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessCertificate {
    pub rank_u: usize,
    pub rank_v: usize,
    pub certified_unique: bool,
    pub verdict: Verdict,
    pub inactive_set: Vec<(usize, usize)>,
    pub aggregate_strictly_positive: bool,
    pub singular_values_u: Vec<f64>,
    pub singular_values_v: Vec<f64>,
}

/// Numerical rank and singular values of the vectors stacked as columns.
pub fn family_rank(vectors: &[Vec<f64>], n: usize) -> (usize, Vec<f64>) {
    if vectors.is_empty() || n == 0 {
        return (0, Vec::new());
    }
    let m = Matrix::from_fn(n, vectors.len(), |i, t| vectors[t][i]);
    let mut sv: Vec<f64> = m.singular_values().iter().cloned().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 {
        sv.iter().filter(|&&s| s > RANK_THRESHOLD * top).count()
    } else {
        0
    };
    (rank, sv)
}

fn verdict(rank_u: usize, rank_v: usize, n: usize, positive: bool) -> Verdict {
    if rank_u == n || rank_v == n {
        Verdict::Certified
    } else if positive {
        Verdict::NotUnique
    } else {
        Verdict::Undetermined
    }
}

/// Dual certificate: the optimum is unique when `{u_t}` or `{v_t}` spans R^n.
pub fn uniqueness_certificate(
    scalings: &DualScalings,
    result: &EstimateResult,
) -> UniquenessCertificate {
    let n = result.n();
    let (rank_u, singular_values_u) = family_rank(&scalings.u, n);
    let (rank_v, singular_values_v) = family_rank(&scalings.v, n);
    let positive = scalings.support.iter().all(|&s| s);
    let verdict = verdict(rank_u, rank_v, n, positive);
    UniquenessCertificate {
        rank_u,
        rank_v,
        certified_unique: verdict == Verdict::Certified,
        verdict,
        inactive_set: check_dual_feasibility(scalings).inactive_set(),
        aggregate_strictly_positive: positive,
        singular_values_u,
        singular_values_v,
    }
}

/// Primal certificate: for every `i` the rows `{M_t(i,:)}` span R^n, or for
/// every `j` the columns `{M_t(:,j)}` do. Only decisive on a positive aggregate.
///
/// `rank_v` holds the smallest row-family rank and `rank_u` the smallest
/// column-family rank, matching the dual families they are images of.
pub fn primal_span_certificate(result: &EstimateResult) -> UniquenessCertificate {
    let n = result.n();
    let support = support_of(result.aggregate.matrix(), result.plans.len());
    let positive = support.iter().all(|&s| s);
    let mut rank_v = n;
    let mut rank_u = n;
    let mut sv_v = Vec::new();
    let mut sv_u = Vec::new();
    for k in 0..n {
        let rows: Vec<Vec<f64>> = result
            .plans
            .iter()
            .map(|p| p.matrix().row(k).iter().cloned().collect())
            .collect();
        let (r, sv) = family_rank(&rows, n);
        if r <= rank_v {
            rank_v = r;
            sv_v = sv;
        }
        let cols: Vec<Vec<f64>> = result
            .plans
            .iter()
            .map(|p| p.matrix().column(k).iter().cloned().collect())
            .collect();
        let (r, sv) = family_rank(&cols, n);
        if r <= rank_u {
            rank_u = r;
            sv_u = sv;
        }
    }
    let verdict = if positive {
        verdict(rank_u, rank_v, n, true)
    } else {
        Verdict::Undetermined
    };
    UniquenessCertificate {
        rank_u,
        rank_v,
        certified_unique: verdict == Verdict::Certified,
        verdict,
        inactive_set: Vec::new(),
        aggregate_strictly_positive: positive,
        singular_values_u: sv_u,
        singular_values_v: sv_v,
    }
}

/// Marginals implied by the plans of an estimate.
pub fn observations_from_result(result: &EstimateResult) -> Result<ObservationSet> {
    let pairs = result
        .plans
        .iter()
        .map(|p| (p.row_sums(), p.col_sums()))
        .collect();
    crate::model::build_observation_set(pairs, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualityReport {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub feasibility: FeasibilityReport,
    pub certificate: UniquenessCertificate,
    pub primal_certificate: UniquenessCertificate,
    pub fit_error: f64,
}

/// Full diagnostic bundle for a converged estimate.
pub fn diagnose(result: &EstimateResult) -> Result<DualityReport> {
    let scalings = extract_dual_scalings(result)?;
    let obs = observations_from_result(result)?;
    let primal = objective_value(&result.plans, &result.aggregate)?;
    let dual = dual_objective(&scalings.lambdas(), &scalings.rhos(), &obs)?;
    Ok(DualityReport {
        primal,
        dual,
        gap: (primal - dual).abs(),
        feasibility: check_dual_feasibility(&scalings),
        certificate: uniqueness_certificate(&scalings, result),
        primal_certificate: primal_span_certificate(result),
        fit_error: scalings.fit_error,
    })
}
