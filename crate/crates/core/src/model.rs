//! Domain types shared by every stage of the estimator: marginal snapshots,
//! transport plans, the aggregate plan and the transition matrix, plus the
//! few closed-form operations that connect them.

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};

/// Dense real matrix used throughout the crate.
pub type Matrix = DMatrix<f64>;

/// Relative tolerance for `mu.mass == nu.mass`.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Nonnegative weight vector in mass units.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    weights: Vec<f64>,
    mass: f64,
}

impl Distribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        for (index, &value) in weights.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::NonnegativityViolation { index, value });
            }
        }
        let mass = weights.iter().sum();
        Ok(Self { weights, mass })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Rescales to unit mass. A zero-mass distribution is returned unchanged.
    pub fn normalized(&self) -> Self {
        if self.mass <= 0.0 {
            return self.clone();
        }
        let weights: Vec<f64> = self.weights.iter().map(|w| w / self.mass).collect();
        let mass = weights.iter().sum();
        Self { weights, mass }
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }
}

/// One observed snapshot pair with a common mass.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPair {
    mu: Distribution,
    nu: Distribution,
    mass: f64,
}

impl MarginalPair {
    pub fn new(mu: Distribution, nu: Distribution) -> Result<Self> {
        Self::indexed(mu, nu, 0)
    }

    pub(crate) fn indexed(mu: Distribution, nu: Distribution, pair: usize) -> Result<Self> {
        if mu.len() != nu.len() {
            return Err(shape_err((mu.len(), 1), (nu.len(), 1)));
        }
        if (mu.mass() - nu.mass()).abs() > MASS_TOLERANCE * mu.mass().max(1.0) {
            return Err(Error::MassMismatch {
                pair,
                mu_mass: mu.mass(),
                nu_mass: nu.mass(),
            });
        }
        let mass = mu.mass();
        Ok(Self { mu, nu, mass })
    }

    pub fn from_vecs(mu: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        Self::new(Distribution::new(mu)?, Distribution::new(nu)?)
    }

    pub fn mu(&self) -> &[f64] {
        self.mu.weights()
    }

    pub fn nu(&self) -> &[f64] {
        self.nu.weights()
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    /// The product coupling `mu nu^T / s`.
    pub fn independent_coupling(&self) -> TransportPlan {
        let n = self.n();
        let s = self.mass;
        let m = if s > 0.0 {
            Matrix::from_fn(n, n, |i, j| self.mu()[i] * self.nu()[j] / s)
        } else {
            Matrix::zeros(n, n)
        };
        TransportPlan(m)
    }
}

/// Product coupling of two raw marginals; fails when their masses differ.
pub fn independent_coupling(mu: &[f64], nu: &[f64]) -> Result<TransportPlan> {
    Ok(MarginalPair::from_vecs(mu.to_vec(), nu.to_vec())?.independent_coupling())
}

/// A validated collection of snapshot pairs over `n` states.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    n: usize,
    pairs: Vec<MarginalPair>,
    support_mask: DMatrix<bool>,
}

impl ObservationSet {
    pub fn new(pairs: Vec<MarginalPair>) -> Result<Self> {
        let first = pairs.first().ok_or(Error::EmptyInput)?;
        let n = first.n();
        let mut support_mask = DMatrix::from_element(n, n, false);
        for (t, pair) in pairs.iter().enumerate() {
            if pair.n() != n {
                return Err(shape_err((n, 1), (pair.n(), 1)));
            }
            if pair.mass() <= 0.0 {
                return Err(Error::ZeroMass { pair: t });
            }
            for (i, &mu) in pair.mu().iter().enumerate() {
                if mu <= 0.0 {
                    continue;
                }
                for (j, &nu) in pair.nu().iter().enumerate() {
                    if nu > 0.0 {
                        support_mask[(i, j)] = true;
                    }
                }
            }
        }
        Ok(Self {
            n,
            pairs,
            support_mask,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pairs(&self) -> &[MarginalPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `true` at `(i, j)` iff some pair has `mu(i) > 0` and `nu(j) > 0`.
    pub fn support_mask(&self) -> &DMatrix<bool> {
        &self.support_mask
    }

    /// Entries pinned to zero because no pair can move mass there.
    pub fn excluded_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if !self.support_mask[(i, j)] {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Builds an observation set from raw vectors, optionally normalizing each
/// pair to unit mass first.
pub fn build_observation_set(
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
    normalize: bool,
) -> Result<ObservationSet> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (t, (mu, nu)) in pairs.into_iter().enumerate() {
        let mut mu = Distribution::new(mu)?;
        let mut nu = Distribution::new(nu)?;
        if mu.mass() <= 0.0 || nu.mass() <= 0.0 {
            return Err(Error::ZeroMass { pair: t });
        }
        if normalize {
            mu = mu.normalized();
            nu = nu.normalized();
        }
        out.push(MarginalPair::indexed(mu, nu, t)?);
    }
    ObservationSet::new(out)
}

/// Nonnegative mass-transfer matrix for one snapshot pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan(pub Matrix);

impl TransportPlan {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.0.row_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.0.column_iter().map(|c| c.sum()).collect()
    }
}

/// Entrywise sum of transport plans.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatePlan(pub Matrix);

impl AggregatePlan {
    /// Sums plans in the given order.
    pub fn from_plans(plans: &[TransportPlan]) -> Result<Self> {
        let first = plans.first().ok_or(Error::EmptyInput)?;
        let shape = first.0.shape();
        let mut sum = Matrix::zeros(shape.0, shape.1);
        for p in plans {
            if p.0.shape() != shape {
                return Err(shape_err(shape, p.0.shape()));
            }
            sum += &p.0;
        }
        Ok(Self(sum))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

/// Row-stochastic matrix of transition probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(Matrix);

/// Row sums of user-supplied transition matrices must be within this of 1.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-9;

impl TransitionMatrix {
    /// Validates nonnegativity and row sums. Rows off by more than `1e-12`
    /// are renormalized; others are kept bit-for-bit.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(shape_err((m.nrows(), m.nrows()), m.shape()));
        }
        for (idx, &v) in m.iter().enumerate() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::NonnegativityViolation {
                    index: idx,
                    value: v,
                });
            }
        }
        let mut m = m;
        for i in 0..m.nrows() {
            let sum = m.row(i).sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
                return Err(Error::InvalidTransition { row: i, sum });
            }
            if (sum - 1.0).abs() > 1e-12 {
                m.row_mut(i).scale_mut(1.0 / sum);
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        for r in rows {
            if r.len() != n {
                return Err(shape_err((n, n), (n, r.len())));
            }
        }
        Self::new(Matrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    /// `A^T p`: the law after one step from `p`.
    pub fn propagate(&self, p: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|j| (0..n).map(|i| p[i] * self.0[(i, j)]).sum())
            .collect()
    }
}

/// Handling of rows of the aggregate that carry no mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroRowPolicy {
    Error,
    #[default]
    UniformRow,
}

/// A transition estimate with per-row flags for rows filled by policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovered {
    pub transition: TransitionMatrix,
    pub zero_rows: Vec<bool>,
}

/// Row-normalizes the aggregate plan into a transition matrix.
pub fn recover_transition(xbar: &AggregatePlan, on_zero_row: ZeroRowPolicy) -> Result<Recovered> {
    let x = xbar.matrix();
    let n = x.nrows();
    if x.ncols() != n {
        return Err(shape_err((n, n), x.shape()));
    }
    let mut a = Matrix::zeros(n, n);
    let mut zero_rows = vec![false; n];
    for i in 0..n {
        let row = x.row(i);
        if let Some((index, &value)) = row.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::NonnegativityViolation {
                index: i * n + index,
                value,
            });
        }
        let sum = row.sum();
        if sum > 0.0 {
            for j in 0..n {
                a[(i, j)] = x[(i, j)] / sum;
            }
        } else {
            match on_zero_row {
                ZeroRowPolicy::Error => return Err(Error::ZeroRow { row: i }),
                ZeroRowPolicy::UniformRow => {
                    zero_rows[i] = true;
                    a.row_mut(i).fill(1.0 / n as f64);
                }
            }
        }
    }
    Ok(Recovered {
        transition: TransitionMatrix(a),
        zero_rows,
    })
}

/// `sum_i p_i log(p_i / q_i)` with `0 log 0 = 0`.
///
/// Returns `f64::INFINITY` when `p` has mass where `q` has none. The result
/// is negative whenever `p` carries less mass than `q`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape_err((q.len(), 1), (p.len(), 1)));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Matrix form of [`kl_divergence`].
pub fn kl_divergence_matrix(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(shape_err(q.shape(), p.shape()));
    }
    kl_divergence(p.as_slice(), q.as_slice())
}

pub fn frobenius_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err(a.shape(), b.shape()));
    }
    Ok((a - b).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn kl_of_identical_is_zero() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    }

    #[test]
    fn kl_single_term() {
        let d = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(d, LN_2, epsilon = 1e-15);
    }

    #[test]
    fn kl_negative_for_smaller_mass() {
        let p = Matrix::from_element(2, 2, 0.25);
        let q = Matrix::from_element(2, 2, 0.5);
        let d = kl_divergence_matrix(&p, &q).unwrap();
        assert_abs_diff_eq!(d, -LN_2, epsilon = 1e-15);
    }

    #[test]
    fn kl_excess_support_is_infinite() {
        assert_eq!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn kl_shape_mismatch() {
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            kl_divergence_matrix(&Matrix::zeros(2, 2), &Matrix::zeros(2, 3)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn recover_basic() {
        let r = recover_transition(
            &AggregatePlan(mat(&[&[2.0, 2.0], &[1.0, 3.0]])),
            ZeroRowPolicy::Error,
        )
        .unwrap();
        assert_eq!(r.transition.matrix(), &mat(&[&[0.5, 0.5], &[0.25, 0.75]]));
        assert_eq!(r.zero_rows, vec![false, false]);
    }

    #[test]
    fn recover_identity_case() {
        let a = mat(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let r = recover_transition(&AggregatePlan(a.clone()), ZeroRowPolicy::Error).unwrap();
        assert_abs_diff_eq!(r.transition.matrix(), &a, epsilon = 1e-15);
    }

    #[test]
    fn recover_zero_row_policies() {
        let x = AggregatePlan(mat(&[&[0.0, 0.0], &[1.0, 1.0]]));
        let r = recover_transition(&x, ZeroRowPolicy::UniformRow).unwrap();
        assert_eq!(r.transition.matrix(), &Matrix::from_element(2, 2, 0.5));
        assert_eq!(r.zero_rows, vec![true, false]);
        assert_eq!(
            recover_transition(&x, ZeroRowPolicy::Error),
            Err(Error::ZeroRow { row: 0 })
        );
    }

    #[test]
    fn coupling_examples() {
        let p = independent_coupling(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(p.matrix(), &Matrix::from_element(2, 2, 0.5));
        let p = independent_coupling(&[2.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(p.matrix(), &mat(&[&[1.0, 1.0], &[0.0, 0.0]]));
        assert!(matches!(
            independent_coupling(&[1.0, 0.0], &[1.0, 1.0]),
            Err(Error::MassMismatch { .. })
        ));
    }

    #[test]
    fn observation_masks() {
        let obs = build_observation_set(vec![(vec![1.0, 0.0], vec![0.0, 1.0])], false).unwrap();
        assert_eq!(
            obs.support_mask(),
            &DMatrix::from_row_slice(2, 2, &[false, true, false, false])
        );
        let obs = build_observation_set(
            vec![
                (vec![1.0, 0.0], vec![0.0, 1.0]),
                (vec![0.0, 1.0], vec![1.0, 0.0]),
            ],
            false,
        )
        .unwrap();
        assert_eq!(
            obs.support_mask(),
            &DMatrix::from_row_slice(2, 2, &[false, true, true, false])
        );
        assert_eq!(obs.excluded_entries(), vec![(0, 0), (1, 1)]);
        let obs = build_observation_set(vec![(vec![0.5, 0.5], vec![0.5, 0.5])], false).unwrap();
        assert!(obs.support_mask().iter().all(|&b| b));
    }

    #[test]
    fn observation_errors() {
        assert_eq!(build_observation_set(vec![], true), Err(Error::EmptyInput));
        assert!(matches!(
            build_observation_set(vec![(vec![1.0, -0.1], vec![0.9, 0.0])], false),
            Err(Error::NonnegativityViolation { index: 1, .. })
        ));
        assert!(matches!(
            build_observation_set(vec![(vec![1.0, 0.0], vec![1.0, 1.0])], false),
            Err(Error::MassMismatch { pair: 0, .. })
        ));
        assert_eq!(
            build_observation_set(vec![(vec![0.0, 0.0], vec![0.0, 0.0])], true),
            Err(Error::ZeroMass { pair: 0 })
        );
        // normalization resolves a pure scale mismatch
        let obs = build_observation_set(vec![(vec![2.0, 2.0], vec![1.0, 0.0])], true).unwrap();
        assert_eq!(obs.pairs()[0].mass(), 1.0);
        assert!(matches!(
            build_observation_set(
                vec![(vec![1.0, 0.0], vec![1.0, 0.0]), (vec![1.0], vec![1.0])],
                false
            ),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn frobenius_examples() {
        let i = Matrix::identity(2, 2);
        assert_eq!(frobenius_error(&i, &i).unwrap(), 0.0);
        let swap = mat(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_abs_diff_eq!(frobenius_error(&i, &swap).unwrap(), 2.0, epsilon = 1e-15);
        let partial = mat(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_abs_diff_eq!(frobenius_error(&i, &partial).unwrap(), 1.0, epsilon = 1e-15);
        assert!(frobenius_error(&i, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn transition_validation() {
        assert!(TransitionMatrix::from_rows(&[vec![0.5, 0.5], vec![0.3, 0.6]]).is_err());
        assert!(TransitionMatrix::from_rows(&[vec![1.5, -0.5], vec![0.5, 0.5]]).is_err());
        let a = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let nu = a.propagate(&[1.0, 0.0]);
        assert_abs_diff_eq!(nu[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(nu[1], 0.1, epsilon = 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec_with_zeros(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..10.0], n)
        }

        proptest! {
            #[test]
            fn kl_self_is_zero(p in vec_with_zeros(6)) {
                prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
            }

            #[test]
            fn kl_summands_nonpositive_when_dominated(
                q in prop::collection::vec(0.0f64..5.0, 8),
                frac in prop::collection::vec(0.0f64..=1.0, 8),
            ) {
                for (qi, f) in q.iter().zip(&frac) {
                    let pi = qi * f;
                    let term = kl_divergence(&[pi], &[*qi]).unwrap();
                    prop_assert!(term.is_finite());
                    prop_assert!(term <= 0.0);
                }
            }

            #[test]
            fn coupling_matches_marginals(
                mu in vec_with_zeros(5),
                nu_raw in vec_with_zeros(5),
            ) {
                let m_mass: f64 = mu.iter().sum();
                let n_mass: f64 = nu_raw.iter().sum();
                prop_assume!(m_mass > 0.0 && n_mass > 0.0);
                let nu: Vec<f64> = nu_raw.iter().map(|v| v * m_mass / n_mass).collect();
                let pair = MarginalPair::from_vecs(mu.clone(), nu.clone()).unwrap();
                let plan = pair.independent_coupling();
                for (r, m) in plan.row_sums().iter().zip(&mu) {
                    prop_assert!((r - m).abs() <= 1e-12 * m_mass);
                }
                for (c, v) in plan.col_sums().iter().zip(&nu) {
                    prop_assert!((c - v).abs() <= 1e-12 * m_mass);
                }
                for i in 0..5 {
                    for j in 0..5 {
                        prop_assert_eq!(plan.matrix()[(i, j)] > 0.0, mu[i] > 0.0 && nu[j] > 0.0);
                    }
                }
            }

            #[test]
            fn recovery_rows_and_scale_invariance(
                entries in prop::collection::vec(0.001f64..10.0, 16),
                c in 0.01f64..100.0,
            ) {
                let x = Matrix::from_vec(4, 4, entries);
                let r1 = recover_transition(&AggregatePlan(x.clone()), ZeroRowPolicy::Error).unwrap();
                let r2 = recover_transition(&AggregatePlan(x * c), ZeroRowPolicy::Error).unwrap();
                for i in 0..4 {
                    prop_assert!((r1.transition.matrix().row(i).sum() - 1.0).abs() <= 1e-12);
                }
                prop_assert!((r1.transition.matrix() - r2.transition.matrix()).amax() <= 1e-14);
            }

            #[test]
            fn coupling_sum_support_matches_mask(
                raw in prop::collection::vec((vec_with_zeros(3), vec_with_zeros(3)), 1..6),
            ) {
                let mut pairs = Vec::new();
                for (mu, nu) in raw {
                    let ms: f64 = mu.iter().sum();
                    let ns: f64 = nu.iter().sum();
                    if ms > 0.0 && ns > 0.0 {
                        pairs.push((mu, nu));
                    }
                }
                prop_assume!(!pairs.is_empty());
                let obs = build_observation_set(pairs, true).unwrap();
                let plans: Vec<_> = obs.pairs().iter().map(|p| p.independent_coupling()).collect();
                let agg = AggregatePlan::from_plans(&plans).unwrap();
                // strictly positive exactly where some pair supports the entry
                for (v, m) in agg.matrix().iter().zip(obs.support_mask().iter()) {
                    prop_assert_eq!(*v > 0.0, *m);
                }
            }
        }
    }
}
