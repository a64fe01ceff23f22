//! JSON documents for observations and estimation results.
//!
//! Output is canonical: keys sorted, floats in shortest round-trip form, so
//! parsing and re-serializing a document reproduces it byte for byte.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::duality::{DualityReport, Verdict};
use crate::error::{Error, Result};
use crate::estimator::{EstimateResult, EstimateStatus};
use crate::model::{
    AggregatePlan, Distribution, MarginalPair, Matrix, ObservationSet, TransitionMatrix,
    TransportPlan,
};
use crate::sim::Particles;

impl Serialize for Particles {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Particles::Finite(n) => s.serialize_u64(*n),
            Particles::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Particles {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Label(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Count(n) => n.to_string().parse::<Particles>(),
            Raw::Label(s) => s.parse::<Particles>(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_particles: Option<Particles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationFile {
    pub n: usize,
    pub pairs: Vec<PairRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ObservationMeta>,
}

impl ObservationFile {
    pub fn from_observations(obs: &ObservationSet, meta: Option<ObservationMeta>) -> Self {
        ObservationFile {
            n: obs.n(),
            pairs: obs
                .pairs()
                .iter()
                .map(|p| PairRecord {
                    mu: p.mu().to_vec(),
                    nu: p.nu().to_vec(),
                })
                .collect(),
            meta,
        }
    }

    /// Validates the document into an observation set.
    pub fn to_observations(&self) -> Result<ObservationSet> {
        let mut pairs = Vec::with_capacity(self.pairs.len());
        for (t, p) in self.pairs.iter().enumerate() {
            for (name, v) in [("mu", &p.mu), ("nu", &p.nu)] {
                if v.len() != self.n {
                    return Err(Error::Format(format!(
                        "pairs[{t}].{name}: expected {} entries, found {}",
                        self.n,
                        v.len()
                    )));
                }
            }
            let field = |name: &str, e: Error| Error::Format(format!("pairs[{t}].{name}: {e}"));
            let mu = Distribution::new(p.mu.clone()).map_err(|e| field("mu", e))?;
            let nu = Distribution::new(p.nu.clone()).map_err(|e| field("nu", e))?;
            let pair = MarginalPair::new(mu, nu).map_err(|e| match e {
                Error::MassMismatch {
                    mu_mass, nu_mass, ..
                } => Error::MassMismatch {
                    pair: t,
                    mu_mass,
                    nu_mass,
                },
                other => other,
            })?;
            pairs.push(pair);
        }
        ObservationSet::new(pairs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    pub certified_unique: bool,
    pub verdict: String,
    pub rank_u: usize,
    pub rank_v: usize,
    pub max_dual_constraint: f64,
    pub duality_gap: f64,
}

impl Diagnostics {
    pub fn from_report(r: &DualityReport) -> Self {
        Diagnostics {
            certified_unique: r.certificate.certified_unique,
            verdict: verdict_name(r.certificate.verdict).to_string(),
            rank_u: r.certificate.rank_u,
            rank_v: r.certificate.rank_v,
            max_dual_constraint: r.feasibility.max_constraint,
            duality_gap: r.gap,
        }
    }
}

pub fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Certified => "Certified",
        Verdict::NotUnique => "NotUnique",
        Verdict::Undetermined => "Undetermined",
    }
}

pub fn status_name(s: EstimateStatus) -> &'static str {
    match s {
        EstimateStatus::Converged => "Converged",
        EstimateStatus::Plateau => "Plateau",
        EstimateStatus::MaxIterations => "MaxIterations",
    }
}

fn parse_status(s: &str) -> Result<EstimateStatus> {
    match s {
        "Converged" => Ok(EstimateStatus::Converged),
        "Plateau" => Ok(EstimateStatus::Plateau),
        "MaxIterations" => Ok(EstimateStatus::MaxIterations),
        other => Err(Error::Format(format!("status: unknown value '{other}'"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub transition: Vec<Vec<f64>>,
    pub aggregate: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plans: Option<Vec<Vec<Vec<f64>>>>,
    pub objective_history: Vec<f64>,
    pub status: String,
    pub outer_iterations: usize,
    #[serde(default)]
    pub zero_row_flags: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

pub fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn rows_matrix(rows: &[Vec<f64>], field: &str) -> Result<Matrix> {
    let n = rows.len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(Error::Format(format!(
            "{field}[{i}]: expected {n} entries, found {}",
            r.len()
        )));
    }
    Ok(Matrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl ResultFile {
    pub fn from_result(
        r: &EstimateResult,
        emit_plans: bool,
        diagnostics: Option<Diagnostics>,
    ) -> Self {
        ResultFile {
            transition: matrix_rows(r.transition.matrix()),
            aggregate: matrix_rows(r.aggregate.matrix()),
            plans: emit_plans.then(|| r.plans.iter().map(|p| matrix_rows(p.matrix())).collect()),
            objective_history: r.objective_history.clone(),
            status: status_name(r.status).to_string(),
            outer_iterations: r.outer_iterations,
            zero_row_flags: r.zero_row_flags.clone(),
            diagnostics,
        }
    }

    /// Rebuilds the estimate; `Ok(None)` when the plans were not stored.
    pub fn to_result(&self) -> Result<Option<EstimateResult>> {
        let Some(plans) = &self.plans else {
            return Ok(None);
        };
        let aggregate = rows_matrix(&self.aggregate, "aggregate")?;
        let n = aggregate.nrows();
        let transition = TransitionMatrix::new(rows_matrix(&self.transition, "transition")?)
            .map_err(|e| Error::Format(format!("transition: {e}")))?;
        if transition.n() != n {
            return Err(Error::Format(
                "transition: size differs from aggregate".into(),
            ));
        }
        let mut out = Vec::with_capacity(plans.len());
        for (t, p) in plans.iter().enumerate() {
            let m = rows_matrix(p, &format!("plans[{t}]"))?;
            if m.nrows() != n {
                return Err(Error::Format(format!(
                    "plans[{t}]: size differs from aggregate"
                )));
            }
            out.push(TransportPlan(m));
        }
        let zero_row_flags = if self.zero_row_flags.is_empty() {
            vec![false; n]
        } else {
            self.zero_row_flags.clone()
        };
        Ok(Some(EstimateResult {
            plans: out,
            aggregate: AggregatePlan(aggregate),
            transition,
            objective_history: self.objective_history.clone(),
            outer_iterations: self.outer_iterations,
            status: parse_status(&self.status)?,
            zero_row_flags,
            last_change: f64::NAN,
        }))
    }
}

/// Canonical pretty JSON with a trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parses JSON, naming the offending field on failure.
pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Error::Format(e.inner().to_string())
        } else {
            Error::Format(format!("{path}: {}", e.inner()))
        }
    })
}
