//! Near G-optimal experimental designs over the rows of a feature matrix.
//!
//! A design `rho` is a probability distribution over the rows of a `k x d`
//! feature matrix. Its Gram matrix is `G(rho) = sum_a rho(a) a a^T` and its
//! criterion is the largest leverage `g(rho) = max_a a^T G(rho)^{-1} a`, taken
//! over every row, not just the support. By the Kiefer-Wolfowitz theorem the
//! minimum of `g` is exactly `d`, and it coincides with the maximizer of
//! `log det G`.
//!
//! [`frank_wolfe_design`] computes designs by conditional gradient ascent on
//! `log det G` with exact line search, using away steps on the support so that
//! the core set stays small.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::linalg::{argmax_lowest, numerical_rank, RANK_TOL};

/// Tolerance on the total mass of a [`Design`].
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Weights below this are dropped after every update.
pub const PRUNE_BELOW: f64 = 1e-10;
/// Slack allowed when checking `g(rho) >= d`.
pub const KW_FLOOR_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone)]
pub enum DesignError {
    #[error("feature matrix is empty or has inconsistent dimensions (k = {k}, d = {d})")]
    Shape { k: usize, d: usize },
    #[error("feature matrix needs k >= d, got k = {k}, d = {d}")]
    TooFewRows { k: usize, d: usize },
    #[error("feature matrix has a non-finite entry at row {row}")]
    NonFinite { row: usize },
    #[error("rows {first} and {second} of the feature matrix are identical")]
    DuplicateRows { first: usize, second: usize },
    #[error("rows span a {rank}-dimensional space, expected {d}")]
    RankDeficient { rank: usize, d: usize },
    #[error("design weights are invalid: {0}")]
    InvalidWeights(String),
    #[error("design refers to row {index} but the feature matrix has {k} rows")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("design support does not span the feature space (Gram matrix is singular)")]
    SingularGram,
    #[error("invalid design parameters: {0}")]
    InvalidParameters(String),
    #[error("Frank-Wolfe stopped after {iterations} iterations with g = {g_value:.6} and support {support} (target g <= {target_g}, support <= {max_support})")]
    NotConverged {
        best: Box<Design>,
        g_value: f64,
        support: usize,
        iterations: usize,
        target_g: f64,
        max_support: usize,
    },
}

/// A `k x d` matrix whose rows are the action features.
///
/// Construction checks that `k >= d >= 1`, every entry is finite, the rows are
/// pairwise distinct and that they span `R^d`.
#[derive(Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: DMatrix<f64>,
}

impl fmt::Debug for FeatureMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeatureMatrix({} x {})", self.k(), self.d())
    }
}

impl FeatureMatrix {
    pub fn new(rows: DMatrix<f64>) -> Result<Self, DesignError> {
        let (k, d) = rows.shape();
        if k == 0 || d == 0 {
            return Err(DesignError::Shape { k, d });
        }
        if k < d {
            return Err(DesignError::TooFewRows { k, d });
        }
        for i in 0..k {
            if rows.row(i).iter().any(|x| !x.is_finite()) {
                return Err(DesignError::NonFinite { row: i });
            }
        }
        if let Some((first, second)) = find_duplicate_rows(&rows) {
            return Err(DesignError::DuplicateRows { first, second });
        }
        let rank = numerical_rank(&rows, RANK_TOL);
        if rank < d {
            return Err(DesignError::RankDeficient { rank, d });
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DesignError> {
        let k = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if k == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(DesignError::Shape { k, d });
        }
        Self::new(DMatrix::from_fn(k, d, |i, j| rows[i][j]))
    }

    /// The `d x d` identity as a feature matrix.
    pub fn identity(d: usize) -> Result<Self, DesignError> {
        Self::new(DMatrix::identity(d, d))
    }

    pub fn k(&self) -> usize {
        self.rows.nrows()
    }

    pub fn d(&self) -> usize {
        self.rows.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.rows
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }

    /// Feature matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self, DesignError> {
        let k = self.k();
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(DesignError::IndexOutOfRange { index: bad, k });
        }
        Self::new(self.rows.select_rows(indices.iter()))
    }
}

impl AsRef<DMatrix<f64>> for FeatureMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.rows
    }
}

fn find_duplicate_rows(rows: &DMatrix<f64>) -> Option<(usize, usize)> {
    // Adding 0.0 maps -0.0 to +0.0 so equal rows compare equal.
    let key = |i: usize| -> Vec<f64> { rows.row(i).iter().map(|x| x + 0.0).collect() };
    let mut order: Vec<usize> = (0..rows.nrows()).collect();
    order.sort_by(|&a, &b| {
        key(a)
            .iter()
            .zip(key(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.windows(2).find_map(|w| {
        (key(w[0]) == key(w[1])).then(|| (w[0].min(w[1]), w[0].max(w[1])))
    })
}

/// Sparse probability distribution over row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    weights: BTreeMap<usize, f64>,
}

impl Design {
    /// Builds a design from `(row, weight)` pairs.
    ///
    /// Weights must be finite and nonnegative and sum to one within
    /// [`WEIGHT_SUM_TOL`]. Zero weights are dropped; repeated rows accumulate.
    pub fn new<I: IntoIterator<Item = (usize, f64)>>(pairs: I) -> Result<Self, DesignError> {
        let weights = collect_weights(pairs)?;
        let total: f64 = weights.values().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(DesignError::InvalidWeights(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    /// Builds a design after dividing every weight by the total.
    pub fn normalized<I: IntoIterator<Item = (usize, f64)>>(pairs: I) -> Result<Self, DesignError> {
        let mut weights = collect_weights(pairs)?;
        let total: f64 = weights.values().sum();
        if total <= 0.0 {
            return Err(DesignError::InvalidWeights("total weight is zero".into()));
        }
        weights.values_mut().for_each(|w| *w /= total);
        Ok(Self { weights })
    }

    /// Uniform weights on the given (distinct) rows.
    pub fn uniform(indices: &[usize]) -> Result<Self, DesignError> {
        Self::normalized(indices.iter().map(|&i| (i, 1.0)))
    }

    pub fn weight(&self, index: usize) -> f64 {
        self.weights.get(&index).copied().unwrap_or(0.0)
    }

    /// Supported row indices in increasing order.
    pub fn support(&self) -> Vec<usize> {
        self.weights.keys().copied().collect()
    }

    pub fn support_size(&self) -> usize {
        self.weights.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights.iter().map(|(&i, &w)| (i, w))
    }

    /// The same weights attached to relabelled rows: row `i` becomes `map[i]`.
    pub fn relabel(&self, map: &[usize]) -> Result<Self, DesignError> {
        let pairs = self
            .iter()
            .map(|(i, w)| map.get(i).map(|&j| (j, w)).ok_or(DesignError::IndexOutOfRange { index: i, k: map.len() }))
            .collect::<Result<Vec<_>, _>>()?;
        Self::normalized(pairs)
    }

    fn check_indices(&self, k: usize) -> Result<(), DesignError> {
        match self.weights.keys().find(|&&i| i >= k) {
            Some(&index) => Err(DesignError::IndexOutOfRange { index, k }),
            None => Ok(()),
        }
    }
}

fn collect_weights<I: IntoIterator<Item = (usize, f64)>>(pairs: I) -> Result<BTreeMap<usize, f64>, DesignError> {
    let mut weights = BTreeMap::new();
    for (i, w) in pairs {
        if !w.is_finite() || w < 0.0 {
            return Err(DesignError::InvalidWeights(format!("weight {w} for row {i}")));
        }
        if w > 0.0 {
            *weights.entry(i).or_insert(0.0) += w;
        }
    }
    if weights.is_empty() {
        return Err(DesignError::InvalidWeights("empty support".into()));
    }
    Ok(weights)
}

/// `G(rho) = sum_a rho(a) a a^T`.
///
/// Fails with [`DesignError::SingularGram`] when the supported rows do not
/// span `R^d`.
pub fn gram(phi: &FeatureMatrix, rho: &Design) -> Result<DMatrix<f64>, DesignError> {
    rho.check_indices(phi.k())?;
    let g = weighted_gram(phi.matrix(), rho.iter());
    factor_gram(&g)?;
    Ok(g)
}

pub(crate) fn weighted_gram<I: IntoIterator<Item = (usize, f64)>>(rows: &DMatrix<f64>, weights: I) -> DMatrix<f64> {
    let d = rows.ncols();
    let mut g = DMatrix::zeros(d, d);
    for (i, w) in weights {
        let a = rows.row(i);
        g.ger(w, &a.transpose(), &a.transpose(), 1.0);
    }
    g
}

/// Cholesky factor of a Gram matrix, rejecting numerically singular ones.
pub(crate) fn factor_gram(g: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, DesignError> {
    let chol = Cholesky::new(g.clone()).ok_or(DesignError::SingularGram)?;
    let diag = chol.l_dirty().diagonal();
    let max = diag.iter().cloned().fold(0.0_f64, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || (min / max).powi(2) < 1e-14 {
        return Err(DesignError::SingularGram);
    }
    Ok(chol)
}

/// `a^T G^{-1} a` for every row `a` of `rows`.
pub(crate) fn row_leverages(rows: &DMatrix<f64>, chol: &Cholesky<f64, Dyn>) -> DVector<f64> {
    let z = chol
        .l_dirty()
        .solve_lower_triangular(&rows.transpose())
        .expect("Cholesky factor has a nonzero diagonal");
    DVector::from_iterator(rows.nrows(), z.column_iter().map(|c| c.norm_squared()))
}

/// Leverage of every row of `phi` under `rho`.
pub fn leverages(phi: &FeatureMatrix, rho: &Design) -> Result<DVector<f64>, DesignError> {
    rho.check_indices(phi.k())?;
    let chol = factor_gram(&weighted_gram(phi.matrix(), rho.iter()))?;
    Ok(row_leverages(phi.matrix(), &chol))
}

/// `g(rho) = max_a a^T G(rho)^{-1} a` over all rows of `phi`.
pub fn g_value(phi: &FeatureMatrix, rho: &Design) -> Result<f64, DesignError> {
    Ok(leverages(phi, rho)?.max())
}

/// Summary of a computed design.
#[derive(Debug, Clone)]
pub struct DesignCertificate {
    pub g_value: f64,
    pub gram: DMatrix<f64>,
    pub support_size: usize,
    pub iterations: usize,
    pub log_det: f64,
}

/// Core-set size guaranteed for a `2d`-approximate design: `4 d loglog d + 16`
/// rounded down. Dimensions below 3 use `loglog 3` and are raised to
/// `d (d + 1) / 2`, the exact-design support bound.
pub fn core_set_bound(d: usize) -> usize {
    let df = d as f64;
    let base = (4.0 * df * loglog(d.max(3)) + 16.0).floor() as usize;
    if d <= 2 {
        base.max(d * (d + 1) / 2)
    } else {
        base
    }
}

/// Initial exploration length of phased elimination, `ceil(4 d loglog d) + 16`.
pub fn initial_episode_length(d: usize) -> usize {
    (4.0 * d as f64 * loglog(d.max(3))).ceil() as usize + 16
}

/// Default iteration cap: `max(10 d ceil(loglog d), 200)`.
pub fn default_max_iters(d: usize) -> usize {
    (10 * d * loglog(d.max(3)).ceil() as usize).max(200)
}

fn loglog(d: usize) -> f64 {
    (d as f64).ln().ln()
}

/// Stopping rule and budgets for [`frank_wolfe_design`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrankWolfeOptions {
    pub target_g: f64,
    pub max_support: usize,
    pub max_iters: usize,
}

impl FrankWolfeOptions {
    /// `g <= 2d` with the core-set bound and default iteration cap.
    pub fn for_dim(d: usize) -> Self {
        Self {
            target_g: 2.0 * d as f64,
            max_support: core_set_bound(d),
            max_iters: default_max_iters(d),
        }
    }
}

/// Frank-Wolfe design with the default `g <= 2d` target.
pub fn near_optimal_design(phi: &FeatureMatrix) -> Result<(Design, DesignCertificate), DesignError> {
    let opts = FrankWolfeOptions::for_dim(phi.d());
    frank_wolfe_design(phi, opts.target_g, opts.max_support, opts.max_iters)
}

/// Computes a design with `g(rho) <= target_g` and at most `max_support`
/// supported rows.
///
/// Starts from uniform weights on `d` rows picked greedily by volume (pivoted
/// Gram-Schmidt), then alternates toward steps on the row of largest leverage
/// and away steps on the supported row of smallest leverage, each with the
/// closed-form line search for `log det G`. Weights under [`PRUNE_BELOW`] are
/// dropped after each step.
pub fn frank_wolfe_design(
    phi: &FeatureMatrix,
    target_g: f64,
    max_support: usize,
    max_iters: usize,
) -> Result<(Design, DesignCertificate), DesignError> {
    run_frank_wolfe(phi, target_g, max_support, max_iters, None)
}

/// Which kind of update a Frank-Wolfe iteration applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Toward,
    Away,
    Drop,
}

/// State at the start of one Frank-Wolfe iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FwIterate {
    pub iteration: usize,
    pub g_value: f64,
    pub log_det: f64,
    pub support_size: usize,
    /// Update applied after this state; `None` for the final state.
    pub step: Option<StepKind>,
}

/// [`frank_wolfe_design`] that also returns the state of every iteration.
pub fn frank_wolfe_design_traced(
    phi: &FeatureMatrix,
    opts: FrankWolfeOptions,
) -> Result<(Design, DesignCertificate, Vec<FwIterate>), DesignError> {
    let mut trace = Vec::new();
    let (design, cert) = run_frank_wolfe(phi, opts.target_g, opts.max_support, opts.max_iters, Some(&mut trace))?;
    Ok((design, cert, trace))
}

fn run_frank_wolfe(
    phi: &FeatureMatrix,
    target_g: f64,
    max_support: usize,
    max_iters: usize,
    mut trace: Option<&mut Vec<FwIterate>>,
) -> Result<(Design, DesignCertificate), DesignError> {
    let (k, d) = (phi.k(), phi.d());
    let df = d as f64;
    if !(target_g >= df * (1.0 + 1e-6)) {
        return Err(DesignError::InvalidParameters(format!(
            "target_g = {target_g} must be at least d (1 + 1e-6) = {}",
            df * (1.0 + 1e-6)
        )));
    }
    if max_support < d {
        return Err(DesignError::InvalidParameters(format!("max_support = {max_support} is below d = {d}")));
    }

    let rows = phi.matrix();
    let mut w = vec![0.0; k];
    for i in greedy_volume_rows(rows)? {
        w[i] = 1.0 / df;
    }

    let mut iterations = 0;
    loop {
        let g = weighted_gram(rows, support_of(&w));
        let chol = factor_gram(&g)?;
        let lev = row_leverages(rows, &chol);
        let plus = argmax_lowest(lev.iter().copied()).expect("k >= 1");
        let l_plus = lev[plus];
        let support: Vec<usize> = (0..k).filter(|&i| w[i] > 0.0).collect();
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        if let Some(t) = trace.as_deref_mut() {
            t.push(FwIterate { iteration: iterations, g_value: l_plus, log_det, support_size: support.len(), step: None });
        }

        if l_plus <= target_g && support.len() <= max_support {
            let design = Design::normalized(support.iter().map(|&i| (i, w[i])))?;
            let cert = DesignCertificate {
                g_value: l_plus,
                gram: g,
                support_size: design.support_size(),
                iterations,
                log_det,
            };
            return Ok((design, cert));
        }
        if iterations >= max_iters {
            let best = Design::normalized(support.iter().map(|&i| (i, w[i])))?;
            return Err(DesignError::NotConverged {
                best: Box::new(best),
                g_value: l_plus,
                support: support.len(),
                iterations,
                target_g,
                max_support,
            });
        }

        let (minus, l_minus) = support
            .iter()
            .map(|&i| (i, lev[i]))
            .fold((usize::MAX, f64::INFINITY), |acc, (i, l)| if l < acc.1 { (i, l) } else { acc });

        // Toward steps move mass onto the row of largest leverage; away steps
        // remove mass from the weakest supported row once toward progress
        // stalls or the support is too large.
        let away = support.len() > 1
            && (df - l_minus > l_plus - df || (l_plus <= target_g && support.len() > max_support));
        let kind = if away {
            let wj = w[minus];
            let gamma_min = -wj / (1.0 - wj);
            let gamma = if l_minus <= 1.0 {
                gamma_min
            } else {
                ((l_minus / df - 1.0) / (l_minus - 1.0)).max(gamma_min)
            };
            step(&mut w, minus, gamma);
            if gamma <= gamma_min {
                w[minus] = 0.0;
                StepKind::Drop
            } else {
                StepKind::Away
            }
        } else {
            let gamma = (l_plus / df - 1.0) / (l_plus - 1.0);
            step(&mut w, plus, gamma);
            StepKind::Toward
        };
        if let Some(last) = trace.as_deref_mut().and_then(|t| t.last_mut()) {
            last.step = Some(kind);
        }
        prune(&mut w);
        iterations += 1;
    }
}

fn support_of(w: &[f64]) -> impl Iterator<Item = (usize, f64)> + '_ {
    w.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(i, &x)| (i, x))
}

/// `w <- (1 - gamma) w + gamma e_j`.
fn step(w: &mut [f64], j: usize, gamma: f64) {
    for x in w.iter_mut() {
        *x *= 1.0 - gamma;
    }
    w[j] += gamma;
}

fn prune(w: &mut [f64]) {
    for x in w.iter_mut() {
        if *x < PRUNE_BELOW {
            *x = 0.0;
        }
    }
    let total: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= total;
    }
}

/// Picks `d` rows greedily, each maximizing its distance to the span of the
/// rows already chosen.
pub(crate) fn greedy_volume_rows(rows: &DMatrix<f64>) -> Result<Vec<usize>, DesignError> {
    let (k, d) = rows.shape();
    let mut residual = rows.clone();
    let scale = (0..k).map(|i| rows.row(i).norm_squared()).fold(0.0_f64, f64::max);
    let mut chosen = Vec::with_capacity(d);
    for rank in 0..d {
        let norms = (0..k).map(|i| residual.row(i).norm_squared());
        let j = argmax_lowest(norms).expect("k >= 1");
        let norm2 = residual.row(j).norm_squared();
        if !(norm2 > RANK_TOL * RANK_TOL * scale) {
            return Err(DesignError::RankDeficient { rank, d });
        }
        let q = residual.row(j).transpose() / norm2.sqrt();
        let proj = &residual * &q;
        residual.ger(-1.0, &proj, &q, 1.0);
        chosen.push(j);
    }
    Ok(chosen)
}

/// Outcome of a Kiefer-Wolfowitz optimality check.
#[derive(Debug, Clone, PartialEq)]
pub struct KwReport {
    /// `g(rho) <= d (1 + tol)`.
    pub optimal: bool,
    pub g_value: f64,
    pub d: usize,
    /// Row attaining the maximum leverage (lowest index on ties).
    pub argmax_row: usize,
    pub leverage: f64,
}

/// Certifies near-optimality of `rho` through the equivalence `g(rho*) = d`.
pub fn kw_certificate(phi: &FeatureMatrix, rho: &Design, tol: f64) -> Result<KwReport, DesignError> {
    let lev = leverages(phi, rho)?;
    let argmax_row = argmax_lowest(lev.iter().copied()).expect("k >= 1");
    let d = phi.d();
    Ok(KwReport {
        optimal: lev[argmax_row] <= d as f64 * (1.0 + tol),
        g_value: lev[argmax_row],
        d,
        argmax_row,
        leverage: lev[argmax_row],
    })
}

/// Integer pull counts `u(a) = ceil(m rho(a))` for a design.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    /// `(row, count)` in increasing row order.
    pub counts: Vec<(usize, usize)>,
    pub total: usize,
}

pub fn rounded_allocation(rho: &Design, m: usize) -> Allocation {
    assert!(m >= 1, "allocation length must be positive");
    let counts: Vec<(usize, usize)> = rho
        .iter()
        .map(|(i, w)| (i, (m as f64 * w).ceil() as usize))
        .collect();
    let total = counts.iter().map(|&(_, c)| c).sum();
    Allocation { counts, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_matrix(k: usize, d: usize, seed: u64, normalize: bool) -> FeatureMatrix {
        let mut rng = seeded(seed);
        let mut m = DMatrix::from_fn(k, d, |_, _| StandardNormal.sample(&mut rng));
        if normalize {
            for mut r in m.row_iter_mut() {
                let n = r.norm();
                r /= n;
            }
        }
        FeatureMatrix::new(m).unwrap()
    }

    #[test]
    fn rejects_bad_feature_matrices() {
        assert!(matches!(
            FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]),
            Err(DesignError::DuplicateRows { first: 0, second: 1 })
        ));
        assert!(matches!(
            FeatureMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]),
            Err(DesignError::RankDeficient { rank: 1, d: 2 })
        ));
        assert!(matches!(FeatureMatrix::from_rows(&[vec![1.0, 1.0]]), Err(DesignError::TooFewRows { .. })));
        assert!(matches!(
            FeatureMatrix::from_rows(&[vec![0.0, 1.0], vec![-0.0, 1.0]]),
            Err(DesignError::DuplicateRows { .. })
        ));
    }

    #[test]
    fn design_weights_validated() {
        assert!(Design::new([(0, 0.5), (1, 0.4)]).is_err());
        assert!(Design::new([(0, -0.1), (1, 1.1)]).is_err());
        let rho = Design::new([(3, 0.25), (1, 0.75), (2, 0.0)]).unwrap();
        assert_eq!(rho.support(), vec![1, 3]);
    }

    #[test]
    fn gram_of_identity_uniform() {
        let phi = FeatureMatrix::identity(2).unwrap();
        let g = gram(&phi, &Design::uniform(&[0, 1]).unwrap()).unwrap();
        assert_eq!(g, DMatrix::from_diagonal_element(2, 2, 0.5));
    }

    #[test]
    fn gram_single_point() {
        let phi = FeatureMatrix::from_rows(&[vec![1.0]]).unwrap();
        let g = gram(&phi, &Design::new([(0, 1.0)]).unwrap()).unwrap();
        assert_eq!(g, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn gram_rejects_non_spanning_support() {
        let phi = FeatureMatrix::identity(3).unwrap();
        let rho = Design::uniform(&[0, 1]).unwrap();
        assert!(matches!(gram(&phi, &rho), Err(DesignError::SingularGram)));
        assert!(matches!(g_value(&phi, &rho), Err(DesignError::SingularGram)));
        let stray = Design::uniform(&[0, 7]).unwrap();
        assert!(matches!(gram(&phi, &stray), Err(DesignError::IndexOutOfRange { index: 7, k: 3 })));
    }

    #[test]
    fn gram_matches_reverse_order_accumulation() {
        let phi = gaussian_matrix(50, 5, 11, false);
        let (rho, _) = near_optimal_design(&phi).unwrap();
        let g = gram(&phi, &rho).unwrap();
        // Independent re-accumulation: outer products summed in reverse row order.
        let mut h = DMatrix::<f64>::zeros(5, 5);
        for (i, w) in rho.iter().collect::<Vec<_>>().into_iter().rev() {
            let a = phi.row(i);
            h += w * &a * a.transpose();
        }
        assert!((g - h).amax() < 1e-10);
    }

    #[test]
    fn g_value_examples() {
        let phi = FeatureMatrix::identity(4).unwrap();
        let uniform = Design::uniform(&[0, 1, 2, 3]).unwrap();
        assert_abs_diff_eq!(g_value(&phi, &uniform).unwrap(), 4.0, epsilon = 1e-12);

        let phi2 = FeatureMatrix::identity(2).unwrap();
        let skewed = Design::new([(0, 0.9), (1, 0.1)]).unwrap();
        assert_abs_diff_eq!(g_value(&phi2, &skewed).unwrap(), 10.0, epsilon = 1e-9);
    }

    #[test]
    fn frank_wolfe_beats_uniform() {
        let phi = gaussian_matrix(200, 8, 3, false);
        let uniform = Design::uniform(&(0..200).collect::<Vec<_>>()).unwrap();
        let (rho, cert) = near_optimal_design(&phi).unwrap();
        assert!(g_value(&phi, &uniform).unwrap() >= cert.g_value);
        assert_abs_diff_eq!(g_value(&phi, &rho).unwrap(), cert.g_value, epsilon = 1e-9);
    }

    #[test]
    fn identity_design_is_uniform() {
        let phi = FeatureMatrix::identity(5).unwrap();
        let (rho, cert) = near_optimal_design(&phi).unwrap();
        assert_eq!(cert.support_size, 5);
        assert_abs_diff_eq!(cert.g_value, 5.0, epsilon = 1e-12);
        for i in 0..5 {
            assert_abs_diff_eq!(rho.weight(i), 0.2, epsilon = 1e-12);
        }
    }

    /// Three-point design on the regular simplex in R^2, solved by brute force
    /// over the two free weights.
    #[test]
    fn simplex_design_matches_grid_oracle() {
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / 3.0;
                vec![t.cos(), t.sin()]
            })
            .collect();
        let phi = FeatureMatrix::from_rows(&rows).unwrap();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let steps = 300;
        for i in 1..steps {
            for j in 1..(steps - i) {
                let (a, b) = (i as f64 / steps as f64, j as f64 / steps as f64);
                let rho = Design::normalized([(0, a), (1, b), (2, 1.0 - a - b)]).unwrap();
                let g = g_value(&phi, &rho).unwrap();
                if g < best.0 {
                    best = (g, a, b);
                }
            }
        }
        assert_abs_diff_eq!(best.0, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(best.1, 1.0 / 3.0, epsilon = 1e-2);

        let (rho, cert) = frank_wolfe_design(&phi, 2.0 * (1.0 + 1e-6), 3, 10_000).unwrap();
        assert_abs_diff_eq!(cert.g_value, 2.0, epsilon = 2e-6);
        for i in 0..3 {
            assert_abs_diff_eq!(rho.weight(i), 1.0 / 3.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn frank_wolfe_meets_core_set_bound() {
        let phi = gaussian_matrix(500, 10, 42, true);
        let (rho, cert) = near_optimal_design(&phi).unwrap();
        assert!(cert.g_value <= 20.0);
        assert!(rho.support_size() <= 49);
        assert_eq!(core_set_bound(10), 49);
    }

    #[test]
    fn frank_wolfe_rejects_bad_parameters() {
        let phi = FeatureMatrix::identity(3).unwrap();
        assert!(matches!(frank_wolfe_design(&phi, 3.0, 10, 100), Err(DesignError::InvalidParameters(_))));
        assert!(matches!(frank_wolfe_design(&phi, 6.0, 2, 100), Err(DesignError::InvalidParameters(_))));
    }

    #[test]
    fn frank_wolfe_reports_best_design_on_budget_exhaustion() {
        let phi = gaussian_matrix(100, 6, 5, false);
        match frank_wolfe_design(&phi, 6.0 * (1.0 + 1e-5), 100, 3) {
            Err(DesignError::NotConverged { best, iterations, .. }) => {
                assert_eq!(iterations, 3);
                assert!(g_value(&phi, &best).unwrap().is_finite());
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn small_dimension_bounds() {
        assert_eq!(core_set_bound(1), 16);
        assert_eq!(core_set_bound(2), 16);
        assert_eq!(initial_episode_length(5), 26);
        assert_eq!(initial_episode_length(10), 50);
        assert_eq!(default_max_iters(10), 200);
        let phi = FeatureMatrix::from_rows(&[vec![1.0], vec![-3.0], vec![2.0]]).unwrap();
        let (rho, cert) = near_optimal_design(&phi).unwrap();
        assert!(cert.g_value <= 2.0);
        assert!(rho.support_size() <= core_set_bound(1));
    }

    #[test]
    fn kw_certificate_examples() {
        let phi = FeatureMatrix::identity(3).unwrap();
        let uniform = Design::uniform(&[0, 1, 2]).unwrap();
        assert!(kw_certificate(&phi, &uniform, 1e-6).unwrap().optimal);

        let skewed = Design::new([(0, 0.5), (1, 0.3), (2, 0.2)]).unwrap();
        let report = kw_certificate(&phi, &skewed, 1e-6).unwrap();
        assert!(!report.optimal);
        assert_eq!(report.argmax_row, 2);
        assert_abs_diff_eq!(report.leverage, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn converged_design_passes_certificate() {
        let phi = gaussian_matrix(100, 6, 9, false);
        let (rho, _) = frank_wolfe_design(&phi, 6.0 * (1.0 + 1e-4), 100, 100_000).unwrap();
        assert!(kw_certificate(&phi, &rho, 1e-3).unwrap().optimal);
    }

    #[test]
    fn converged_support_rows_share_maximal_leverage() {
        let phi = gaussian_matrix(60, 4, 13, false);
        let (rho, cert) = frank_wolfe_design(&phi, 4.0 * (1.0 + 1e-6), 60, 1_000_000).unwrap();
        let lev = leverages(&phi, &rho).unwrap();
        for i in rho.support() {
            assert!((lev[i] - cert.g_value).abs() <= 1e-4, "row {i}: {} vs {}", lev[i], cert.g_value);
        }
    }

    #[test]
    fn log_det_increases_every_iteration() {
        let phi = gaussian_matrix(300, 7, 17, false);
        let opts = FrankWolfeOptions { target_g: 7.0 * (1.0 + 1e-5), max_support: 300, max_iters: 20_000 };
        let (_, _, trace) = frank_wolfe_design_traced(&phi, opts).unwrap();
        assert!(trace.len() > 10);
        for w in trace.windows(2) {
            assert!(w[1].log_det >= w[0].log_det - 1e-12, "{:?} -> {:?}", w[0], w[1]);
        }
    }

    #[test]
    fn rounded_allocation_examples() {
        let half = Design::uniform(&[0, 1]).unwrap();
        let a = rounded_allocation(&half, 3);
        assert_eq!(a.counts, vec![(0, 2), (1, 2)]);
        assert_eq!(a.total, 4);

        let point = Design::new([(4, 1.0)]).unwrap();
        assert_eq!(rounded_allocation(&point, 7).total, 7);

        let phi = gaussian_matrix(200, 8, 21, false);
        let (rho, _) = near_optimal_design(&phi).unwrap();
        let a = rounded_allocation(&rho, 100);
        assert!(a.total >= 100 && a.total <= 100 + rho.support_size());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kw_floor_holds(seed in 0u64..10_000, k in 4usize..30, d in 1usize..4) {
            let phi = gaussian_matrix(k.max(d), d, seed, false);
            let mut rng = seeded(seed ^ 0xabc);
            let weights: Vec<(usize, f64)> = (0..phi.k()).map(|i| (i, rand::Rng::random::<f64>(&mut rng) + 1e-3)).collect();
            let rho = Design::normalized(weights).unwrap();
            let lev = leverages(&phi, &rho).unwrap();
            // Trace identity: sum_a rho(a) a^T G^{-1} a = d.
            let trace: f64 = rho.iter().map(|(i, w)| w * lev[i]).sum();
            prop_assert!((trace - d as f64).abs() < 1e-9);
            prop_assert!(lev.max() >= d as f64 - KW_FLOOR_TOL);
        }

        #[test]
        fn g_is_scale_invariant(seed in 0u64..10_000, c in prop::sample::select(vec![0.1, 10.0])) {
            let phi = gaussian_matrix(20, 3, seed, false);
            let scaled = FeatureMatrix::new(phi.matrix() * c).unwrap();
            let rho = Design::uniform(&(0..20).collect::<Vec<_>>()).unwrap();
            let a = g_value(&phi, &rho).unwrap();
            let b = g_value(&scaled, &rho).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn g_is_permutation_equivariant(seed in 0u64..10_000) {
            let phi = gaussian_matrix(15, 3, seed, false);
            let mut rng = seeded(seed + 1);
            let mut perm: Vec<usize> = (0..15).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            // Row i of the permuted matrix is row perm[i] of the original.
            let permuted = FeatureMatrix::new(phi.matrix().select_rows(perm.iter())).unwrap();
            let rho = Design::normalized((0..15).map(|i| (i, 1.0 + i as f64))).unwrap();
            let mut inverse = vec![0; 15];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let moved = rho.relabel(&inverse).unwrap();
            let a = g_value(&phi, &rho).unwrap();
            let b = g_value(&permuted, &moved).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
