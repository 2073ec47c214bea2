//! Hypothesis classes `H = Range(Phi) + [-eps, eps]^k` and their hard instances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::design::{greedy_volume_rows, FeatureMatrix};
use crate::linalg::{max_over_slabs, numerical_rank, LpError, LpValue, RANK_TOL};

/// Tolerance used when checking `mu = Phi theta + Delta`.
pub const MU_TOL: f64 = 1e-12;
/// Per-row retry cap of the rejection sampler.
pub const JL_RETRY_CAP: usize = 10_000;
/// Largest number of subsets `lambda_q` enumerates exactly.
pub const LAMBDA_ENUMERATION_BUDGET: u128 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypothesisError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("misspecification |Delta|_inf = {found} exceeds epsilon = {epsilon}")]
    Misspecified { found: f64, epsilon: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("rejection sampling gave up on row {row} after {attempts} draws; best max |a^T b| reached was {achieved_max:.4} (bound {bound})")]
    SamplingBudget { row: usize, attempts: usize, achieved_max: f64, bound: f64 },
    #[error("hard instance violates its invariants: {0}")]
    InvalidInstance(String),
    #[error("hardness count exp({exponent:.3}) exceeds the cap {cap}")]
    Overflow { exponent: f64, cap: u64 },
    #[error("C({k}, {q}) subsets exceed the enumeration budget; use the greedy mode")]
    EnumerationBudget { k: usize, q: usize },
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// A reward vector `mu = Phi theta + Delta` with `|Delta|_inf <= epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct MisspecifiedReward {
    theta: DVector<f64>,
    delta: DVector<f64>,
    epsilon: f64,
    mu: DVector<f64>,
}

impl MisspecifiedReward {
    pub fn new(phi: &DMatrix<f64>, theta: DVector<f64>, delta: DVector<f64>, epsilon: f64) -> Result<Self, HypothesisError> {
        if theta.len() != phi.ncols() || delta.len() != phi.nrows() {
            return Err(HypothesisError::Dimension(format!(
                "phi is {}x{}, theta has {} entries, delta has {}",
                phi.nrows(),
                phi.ncols(),
                theta.len(),
                delta.len()
            )));
        }
        if !(epsilon >= 0.0) {
            return Err(HypothesisError::InvalidParameters(format!("epsilon = {epsilon}")));
        }
        let found = delta.amax();
        if found > epsilon {
            return Err(HypothesisError::Misspecified { found, epsilon });
        }
        let mu = phi * &theta + &delta;
        Ok(Self { theta, delta, epsilon, mu })
    }

    /// Writes a given `mu` as `Phi theta + Delta`, certifying `|Delta|_inf <= epsilon`.
    pub fn from_mu(phi: &DMatrix<f64>, theta: DVector<f64>, mu: DVector<f64>, epsilon: f64) -> Result<Self, HypothesisError> {
        if theta.len() != phi.ncols() || mu.len() != phi.nrows() {
            return Err(HypothesisError::Dimension("mu or theta does not match phi".into()));
        }
        let delta = &mu - phi * &theta;
        let found = delta.amax();
        if found > epsilon {
            return Err(HypothesisError::Misspecified { found, epsilon });
        }
        Ok(Self { theta, delta, epsilon, mu })
    }

    /// Worst-case misspecification: `Delta_i = signs_i * epsilon` exactly.
    pub fn worst_case(phi: &DMatrix<f64>, theta: DVector<f64>, signs: &[bool], epsilon: f64) -> Result<Self, HypothesisError> {
        let delta = DVector::from_iterator(signs.len(), signs.iter().map(|&s| if s { epsilon } else { -epsilon }));
        Self::new(phi, theta, delta, epsilon)
    }

    /// `theta` with independent standard normal entries and random signs at
    /// `+-epsilon` for `Delta` (or uniform in `[-epsilon, epsilon]` when
    /// `worst_case` is false).
    pub fn random<R: Rng + ?Sized>(phi: &DMatrix<f64>, epsilon: f64, worst_case: bool, rng: &mut R) -> Result<Self, HypothesisError> {
        let theta = DVector::from_fn(phi.ncols(), |_, _| StandardNormal.sample(rng));
        let delta = DVector::from_fn(phi.nrows(), |_, _| {
            if worst_case {
                if rng.random::<bool>() {
                    epsilon
                } else {
                    -epsilon
                }
            } else {
                epsilon * (2.0 * rng.random::<f64>() - 1.0)
            }
        });
        Self::new(phi, theta, delta, epsilon)
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn delta(&self) -> &DVector<f64> {
        &self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// `max mu - min mu`.
    pub fn range(&self) -> f64 {
        self.mu.max() - self.mu.min()
    }
}

/// Unit rows with pairwise inner products bounded by `epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct HardInstance {
    rows: DMatrix<f64>,
    epsilon: f64,
}

impl HardInstance {
    /// Validates the unit-norm and near-orthogonality invariants.
    pub fn new(rows: DMatrix<f64>, epsilon: f64) -> Result<Self, HypothesisError> {
        let inst = Self { rows, epsilon };
        for i in 0..inst.k() {
            let n = inst.rows.row(i).norm();
            if (n - 1.0).abs() > 1e-10 {
                return Err(HypothesisError::InvalidInstance(format!("row {i} has norm {n}")));
            }
        }
        let worst = inst.max_inner_product();
        if worst > epsilon {
            return Err(HypothesisError::InvalidInstance(format!("max |a^T b| = {worst} exceeds {epsilon}")));
        }
        Ok(inst)
    }

    pub fn k(&self) -> usize {
        self.rows.nrows()
    }

    pub fn d(&self) -> usize {
        self.rows.ncols()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// `max_{a != b} |a^T b|`, by a pass over all pairs.
    pub fn max_inner_product(&self) -> f64 {
        let gram = &self.rows * self.rows.transpose();
        let mut worst: f64 = 0.0;
        for i in 0..self.k() {
            for j in 0..i {
                worst = worst.max(gram[(i, j)].abs());
            }
        }
        worst
    }

    /// The rows as a [`FeatureMatrix`]; requires `k >= d`.
    pub fn feature_matrix(&self) -> Result<FeatureMatrix, crate::design::DesignError> {
        FeatureMatrix::new(self.rows.clone())
    }
}

/// Dimension `ceil(8 ln(k) / epsilon^2)` of the near-orthogonal construction.
pub fn jl_dimension(k: usize, epsilon: f64) -> usize {
    (8.0 * (k as f64).ln() / (epsilon * epsilon)).ceil() as usize
}

/// `k` unit vectors in dimension `ceil(8 ln k / epsilon^2)` with pairwise
/// `|a^T b| <= epsilon`.
pub fn jl_feature_matrix<R: Rng + ?Sized>(k: usize, epsilon: f64, rng: &mut R) -> Result<HardInstance, HypothesisError> {
    if k < 2 || !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(HypothesisError::InvalidParameters(format!("need k >= 2 and 0 < epsilon < 1, got k = {k}, epsilon = {epsilon}")));
    }
    near_orthogonal_rows(k, jl_dimension(k, epsilon), epsilon, rng)
}

/// Rejection sampler: rows are drawn one at a time uniformly on the sphere
/// and a draw is rejected when it has `|a^T b| > bound` against an accepted
/// row, with at most [`JL_RETRY_CAP`] draws per row.
pub fn near_orthogonal_rows<R: Rng + ?Sized>(k: usize, d: usize, bound: f64, rng: &mut R) -> Result<HardInstance, HypothesisError> {
    if k == 0 || d == 0 || !(bound > 0.0) {
        return Err(HypothesisError::InvalidParameters(format!("k = {k}, d = {d}, bound = {bound}")));
    }
    let mut rows: DMatrix<f64> = DMatrix::zeros(k, d);
    for i in 0..k {
        let mut best = f64::INFINITY;
        let mut accepted = false;
        for _ in 0..JL_RETRY_CAP {
            let mut a: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            let n = a.norm();
            if n == 0.0 {
                continue;
            }
            a /= n;
            let worst = (0..i).map(|j| rows.row(j).dot(&a.transpose()).abs()).fold(0.0, f64::max);
            best = best.min(worst);
            if worst <= bound {
                rows.set_row(i, &a.transpose());
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(HypothesisError::SamplingBudget { row: i, attempts: JL_RETRY_CAP, achieved_max: best, bound });
        }
    }
    HardInstance::new(rows, bound)
}

/// For every row `a_i`, the reward `e_i = Phi a_i + (e_i - Phi a_i)` as a
/// member of `H_Phi^epsilon`.
pub fn embed_unit_vectors(inst: &HardInstance) -> Result<Vec<MisspecifiedReward>, HypothesisError> {
    let k = inst.k();
    (0..k)
        .map(|i| {
            let theta = inst.rows.row(i).transpose();
            let mut mu = DVector::zeros(k);
            mu[i] = 1.0;
            MisspecifiedReward::from_mu(&inst.rows, theta, mu, inst.epsilon)
        })
        .collect()
}

/// Default cap for [`hardness_count`].
pub const HARDNESS_CAP: u64 = 1 << 40;

/// `floor(exp((d - 1) / 8 * (epsilon / delta)^2))`, the number of actions
/// of the rescaled hard instance.
pub fn hardness_count(d: usize, epsilon: f64, delta: f64, cap: u64) -> Result<u64, HypothesisError> {
    if d < 2 || !(delta > 0.0) || !(epsilon >= 0.0) || epsilon > delta {
        return Err(HypothesisError::InvalidParameters(format!(
            "need d >= 2 and 0 <= epsilon <= delta, got d = {d}, epsilon = {epsilon}, delta = {delta}"
        )));
    }
    let ratio = epsilon / delta;
    let exponent = (d as f64 - 1.0) / 8.0 * ratio * ratio;
    let value = exponent.exp().floor();
    if !(value <= cap as f64) {
        return Err(HypothesisError::Overflow { exponent, cap });
    }
    Ok(value as u64)
}

/// `lambda_q` and a subset attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaQ {
    /// `+inf` when no subset of size `q` spans `R^d`.
    pub value: f64,
    pub subset: Vec<usize>,
    /// False when the greedy heuristic replaced exhaustive enumeration.
    pub exact: bool,
}

/// How `lambda_q` searches over subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSearch {
    /// Enumerate every subset, failing above the budget.
    Exhaustive,
    /// Enumerate within the budget, otherwise greedy forward selection.
    Auto,
    Greedy,
}

/// `max_{v != 0} |Phi v|_inf / |Phi_C v|_inf` for a fixed subset `C`.
///
/// Solved exactly: for each row `a_j` maximize `a_j . v` over the polytope
/// `|a_c . v| <= 1, c in C`. The polytope is symmetric, so this also covers
/// `-a_j`. Returns `+inf` when the rows of `C` do not span `R^d`.
pub fn subset_amplification(phi: &FeatureMatrix, subset: &[usize]) -> Result<f64, HypothesisError> {
    let sub = phi.matrix().select_rows(subset.iter());
    if numerical_rank(&sub, RANK_TOL) < phi.d() {
        return Ok(f64::INFINITY);
    }
    // Rows of C attain exactly 1 on the bounded polytope.
    let mut worst: f64 = 1.0;
    for j in (0..phi.k()).filter(|j| !subset.contains(j)) {
        let c: Vec<f64> = phi.matrix().row(j).iter().copied().collect();
        match max_over_slabs(&c, &sub)? {
            LpValue::Bounded(v) => worst = worst.max(v),
            LpValue::Unbounded => return Ok(f64::INFINITY),
        }
    }
    Ok(worst)
}

/// `lambda_q(Phi) = min_{|C| = q} max_v |Phi v|_inf / |Phi_C v|_inf`.
pub fn lambda_q(phi: &FeatureMatrix, q: usize, search: LambdaSearch) -> Result<LambdaQ, HypothesisError> {
    let (k, d) = (phi.k(), phi.d());
    if q == 0 || q >= k {
        return Err(HypothesisError::InvalidParameters(format!("need 1 <= q < k, got q = {q}, k = {k}")));
    }
    if q < d {
        return Ok(LambdaQ { value: f64::INFINITY, subset: (0..q).collect(), exact: true });
    }
    let count = binomial(k, q);
    let enumerate = match search {
        LambdaSearch::Exhaustive if count > LAMBDA_ENUMERATION_BUDGET => {
            return Err(HypothesisError::EnumerationBudget { k, q })
        }
        LambdaSearch::Exhaustive => true,
        LambdaSearch::Auto => count <= LAMBDA_ENUMERATION_BUDGET,
        LambdaSearch::Greedy => false,
    };
    if enumerate {
        let mut best = LambdaQ { value: f64::INFINITY, subset: (0..q).collect(), exact: true };
        let mut subset: Vec<usize> = (0..q).collect();
        loop {
            let value = subset_amplification(phi, &subset)?;
            if value < best.value {
                best = LambdaQ { value, subset: subset.clone(), exact: true };
            }
            if !next_combination(&mut subset, k) {
                return Ok(best);
            }
        }
    }
    greedy_lambda(phi, q)
}

/// Forward selection: start from a volume-greedy basis, then repeatedly add
/// the row that lowers the amplification most.
fn greedy_lambda(phi: &FeatureMatrix, q: usize) -> Result<LambdaQ, HypothesisError> {
    let mut subset = greedy_volume_rows(phi.matrix()).map_err(|e| HypothesisError::InvalidParameters(e.to_string()))?;
    let mut value = subset_amplification(phi, &subset)?;
    while subset.len() < q {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..phi.k()).filter(|j| !subset.contains(j)) {
            let mut trial = subset.clone();
            trial.push(j);
            let v = subset_amplification(phi, &trial)?;
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((j, v));
            }
        }
        let (j, v) = best.expect("q < k leaves a candidate row");
        subset.push(j);
        value = v;
    }
    subset.sort_unstable();
    Ok(LambdaQ { value, subset, exact: false })
}

fn binomial(n: usize, r: usize) -> u128 {
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    acc
}

/// Advances `c` to the next `|c|`-subset of `0..n` in lexicographic order.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let q = c.len();
    let mut i = q;
    while i > 0 {
        i -= 1;
        if c[i] < n - q + i {
            c[i] += 1;
            for j in i + 1..q {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}
