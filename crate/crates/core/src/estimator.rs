//! Entropic proximal estimator.
//!
//! Each outer iteration projects every snapshot pair onto its transportation
//! polytope in KL with the current aggregate `X` as prior, then replaces `X`
//! by the sum of the projected plans. The transition estimate is the
//! row-normalized aggregate at termination.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::model::{
    kl_divergence_matrix, recover_transition, AggregatePlan, Matrix, ObservationSet,
    TransitionMatrix, TransportPlan, ZeroRowPolicy,
};
use crate::sinkhorn::{kl_project_with, ScalingPair, SinkhornOptions};

/// Full-mode inner tolerance relative to the squared previous outer change,
/// which is the order of the objective decrease per iteration.
const INNER_TO_OUTER: f64 = 1e-2;
const INNER_TOL_FLOOR: f64 = 1e-13;

/// How accurately each inner projection is solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerMode {
    /// Solve every projection to the full inner tolerance.
    FullConvergence,
    /// At least `k` sweeps per outer iteration, then continue only until the
    /// residual drops below the decaying accuracy `eta_0 * decay^k`.
    Sweeps(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// Relative max-norm change of `X` that ends the outer loop.
    pub outer_tol: f64,
    pub max_outer: usize,
    pub inner_mode: InnerMode,
    /// Starting inexact accuracy for [`InnerMode::Sweeps`].
    pub inner_tol: f64,
    pub inner_tol_decay: f64,
    /// Inner tolerance of [`InnerMode::FullConvergence`], tightened once the
    /// outer change gets small.
    pub full_inner_tol: f64,
    pub inner_max_iter: usize,
    /// Proximal weight; the convergence argument requires 1.
    pub epsilon: f64,
    /// Objective changes at or below this count toward the plateau guard.
    pub plateau_tol: f64,
    pub plateau_window: usize,
    pub zero_row_policy: ZeroRowPolicy,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            outer_tol: 1e-8,
            max_outer: 1000,
            inner_mode: InnerMode::FullConvergence,
            inner_tol: 1e-2,
            inner_tol_decay: 0.9,
            full_inner_tol: 1e-9,
            inner_max_iter: 100_000,
            epsilon: 1.0,
            plateau_tol: 1e-12,
            plateau_window: 5,
            zero_row_policy: ZeroRowPolicy::UniformRow,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_tol > 0.0) {
            return Err(Error::InvalidConfig("outer_tol must be positive".into()));
        }
        if self.max_outer == 0 {
            return Err(Error::InvalidConfig("max_outer must be at least 1".into()));
        }
        if self.epsilon != 1.0 {
            return Err(Error::InvalidConfig(
                "proximal weight epsilon must be 1".into(),
            ));
        }
        if !(self.full_inner_tol > 0.0) || !(self.inner_tol > 0.0) {
            return Err(Error::InvalidConfig(
                "inner tolerances must be positive".into(),
            ));
        }
        if !(self.inner_tol_decay > 0.0 && self.inner_tol_decay < 1.0) {
            return Err(Error::InvalidConfig(
                "inner_tol_decay must lie in (0, 1)".into(),
            ));
        }
        if let InnerMode::Sweeps(0) = self.inner_mode {
            return Err(Error::InvalidConfig(
                "sweep count must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Inner stopping rule for outer iteration `outer`, given the relative
    /// change of `X` in the previous iteration.
    fn inner_options(&self, outer: usize, prev_change: f64) -> SinkhornOptions {
        match self.inner_mode {
            InnerMode::FullConvergence => {
                // solve errors must stay below the outer progress or they
                // show up as objective noise near the fixed point
                let tol = (INNER_TO_OUTER * prev_change * prev_change)
                    .min(self.full_inner_tol)
                    .max(INNER_TOL_FLOOR.min(self.full_inner_tol));
                SinkhornOptions::full(tol, self.inner_max_iter)
            }
            InnerMode::Sweeps(k) => {
                let eta = self.inner_tol * self.inner_tol_decay.powi(outer as i32);
                SinkhornOptions {
                    tol: eta.max(self.full_inner_tol),
                    max_iter: self.inner_max_iter,
                    min_sweeps: k,
                    floor_tol: self.full_inner_tol,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateStatus {
    Converged,
    /// Stopped by the plateau guard before the change dropped below `outer_tol`.
    Plateau,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub plans: Vec<TransportPlan>,
    pub aggregate: AggregatePlan,
    pub transition: TransitionMatrix,
    /// Objective after each outer iteration (entry 0 is the initial coupling).
    pub objective_history: Vec<f64>,
    pub outer_iterations: usize,
    pub status: EstimateStatus,
    pub zero_row_flags: Vec<bool>,
    /// Relative max-norm change of the aggregate in the last iteration.
    pub last_change: f64,
}

impl EstimateResult {
    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn n(&self) -> usize {
        self.aggregate.matrix().nrows()
    }
}

/// Runs the proximal scheme from the product-coupling initialization.
pub fn estimate(obs: &ObservationSet, cfg: &EstimatorConfig) -> Result<EstimateResult> {
    estimate_from(obs, cfg, None)
}

/// Runs the proximal scheme, optionally seeded with an aggregate `X`.
///
/// A seed is restricted to the observation support before use; entries it
/// leaves at zero inside the support are refilled from the product coupling.
pub fn estimate_from(
    obs: &ObservationSet,
    cfg: &EstimatorConfig,
    seed: Option<&AggregatePlan>,
) -> Result<EstimateResult> {
    cfg.validate()?;
    let n = obs.n();
    let mask = obs.support_mask();

    let mut plans: Vec<TransportPlan> = obs
        .pairs()
        .iter()
        .map(|p| p.independent_coupling())
        .collect();
    let mut x = AggregatePlan::from_plans(&plans)?.into_inner();
    if let Some(seed) = seed {
        let s = seed.matrix();
        if s.shape() != (n, n) {
            return Err(shape_err((n, n), s.shape()));
        }
        for i in 0..n {
            for j in 0..n {
                if mask[(i, j)] && s[(i, j)] > 0.0 && s[(i, j)].is_finite() {
                    x[(i, j)] = s[(i, j)];
                }
            }
        }
    }
    let mut history = vec![objective_value(&plans, &AggregatePlan(x.clone()))?];
    let mut scalings: Vec<ScalingPair> = vec![ScalingPair::ones(n); obs.len()];
    let mut status = EstimateStatus::MaxIterations;
    let mut outer = 0;
    // a seed is expected to sit near the optimum, so its first solves are tight
    let mut last_change = if seed.is_some() {
        cfg.outer_tol
    } else {
        f64::INFINITY
    };
    let mut plateau = 0;

    while outer < cfg.max_outer {
        let opts = cfg.inner_options(outer, last_change);
        let prior = &x;
        let projections: Vec<Result<_>> = obs
            .pairs()
            .par_iter()
            .zip(scalings.par_iter())
            .enumerate()
            .map(|(t, (pair, init))| {
                kl_project_with(prior, pair, Some(init), &opts).map_err(|e| match e {
                    Error::InfeasibleSupport { .. } => Error::Infeasible { pair: t },
                    other => other,
                })
            })
            .collect();
        let mut next_plans = Vec::with_capacity(obs.len());
        for (t, p) in projections.into_iter().enumerate() {
            let p = p?;
            scalings[t] = p.scalings;
            next_plans.push(p.plan);
        }
        // ascending-t summation keeps the aggregate bit-stable
        let next_x = AggregatePlan::from_plans(&next_plans)?.into_inner();
        let scale = x.amax().max(f64::MIN_POSITIVE);
        last_change = (&next_x - &x).amax() / scale;
        plans = next_plans;
        x = next_x;
        outer += 1;

        let obj = objective_value(&plans, &AggregatePlan(x.clone()))?;
        let prev = *history.last().unwrap_or(&obj);
        history.push(obj);
        if (prev - obj).abs() <= cfg.plateau_tol {
            plateau += 1;
        } else {
            plateau = 0;
        }
        if last_change <= cfg.outer_tol {
            status = EstimateStatus::Converged;
            break;
        }
        if plateau >= cfg.plateau_window {
            status = EstimateStatus::Plateau;
            break;
        }
    }

    let aggregate = AggregatePlan(x);
    let recovered = recover_transition(&aggregate, cfg.zero_row_policy)?;
    Ok(EstimateResult {
        plans,
        aggregate,
        transition: recovered.transition,
        objective_history: history,
        outer_iterations: outer,
        status,
        zero_row_flags: recovered.zero_rows,
        last_change,
    })
}

/// `sum_t D(M_t | X)`; infinite if some plan has mass outside `X`'s support.
pub fn objective_value(plans: &[TransportPlan], xbar: &AggregatePlan) -> Result<f64> {
    let mut total = 0.0;
    for p in plans {
        total += kl_divergence_matrix(p.matrix(), xbar.matrix())?;
    }
    Ok(total)
}

/// `sum_t D(M_t | diag(mu_t) A)`, the objective before eliminating `A`.
pub fn objective_original(
    plans: &[TransportPlan],
    obs: &ObservationSet,
    a: &TransitionMatrix,
) -> Result<f64> {
    if plans.len() != obs.len() {
        return Err(shape_err((obs.len(), 1), (plans.len(), 1)));
    }
    let n = obs.n();
    if a.n() != n {
        return Err(shape_err((n, n), (a.n(), a.n())));
    }
    let mut total = 0.0;
    for (plan, pair) in plans.iter().zip(obs.pairs()) {
        let prior = Matrix::from_fn(n, n, |i, j| pair.mu()[i] * a.get(i, j));
        total += kl_divergence_matrix(plan.matrix(), &prior)?;
    }
    Ok(total)
}
