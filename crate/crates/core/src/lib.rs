//! Estimation of Markov transition matrices from aggregate snapshots.
//!
//! Pairs of population snapshots `(mu_t, nu_t)` are linked by unknown
//! transport plans `M_t`. The estimator solves the jointly convex program
//! `min sum_t D(M_t | sum_s M_s)` over plans matching the snapshots, with an
//! entropic proximal loop whose inner step is a Sinkhorn projection, and
//! row-normalizes the aggregate plan into a transition matrix.

pub mod duality;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod io;
pub mod model;
pub mod plot;
pub mod sim;
pub mod sinkhorn;

pub use duality::{
    check_dual_feasibility, diagnose, dual_objective, extract_dual_scalings,
    primal_span_certificate, uniqueness_certificate, ConstraintStatus, DualScalings, DualityReport,
    FeasibilityReport, UniquenessCertificate, Verdict,
};
pub use error::{Error, Result};
pub use estimator::{
    estimate, estimate_from, objective_original, objective_value, EstimateResult, EstimateStatus,
    EstimatorConfig, InnerMode,
};
pub use experiments::{
    fit_loglog_slope, run_experiment, run_experiment_with, summarize, ErrorCurve, ErrorRow,
    ExperimentConfig, ExperimentMode, SummaryRow,
};
pub use model::{
    build_observation_set, frobenius_error, independent_coupling, kl_divergence,
    kl_divergence_matrix, recover_transition, AggregatePlan, Distribution, MarginalPair, Matrix,
    ObservationSet, Recovered, TransitionMatrix, TransportPlan, ZeroRowPolicy,
};
pub use sim::{
    log_transition_probability, mixing_stats, paper_matrix, random_stochastic_matrix,
    sample_empirical_marginals, stationary_distribution, tv_distance, InitialLaw, MixingStats,
    Particles, SamplingMode, SimulationConfig,
};
pub use sinkhorn::{
    kl_project, kl_project_with, plan_from_scalings, sinkhorn_sweep, Projection, ScalingPair,
    SinkhornOptions, SinkhornReport, SinkhornStatus,
};
