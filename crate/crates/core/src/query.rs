//! The noiseless query game: a learner probes coordinates of a hidden reward
//! vector and must output an estimate and an action.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::design::{factor_gram, Design, DesignError, FeatureMatrix};
use crate::hypothesis::{lambda_q, HypothesisError, LambdaQ, LambdaSearch};
use crate::linalg::{argmax_lowest, chebyshev_fit, LpError};

/// Slack allowed on the Chebyshev residual before the fit is rejected.
pub const FIT_TOL: f64 = 1e-9;
/// Answers closer than this are treated as equal by the game-tree search.
pub const ANSWER_TOL: f64 = 1e-12;
/// Largest hypothesis set the brute-force search accepts.
pub const BRUTE_MAX_POINTS: usize = 64;
/// Largest number of actions the brute-force search accepts.
pub const BRUTE_MAX_ACTIONS: usize = 10;

#[derive(Debug, Error, Clone)]
pub enum QueryError {
    #[error("probe index {index} out of range for k = {k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("Chebyshev residual {residual} exceeds epsilon = {epsilon}: mu is not in the hypothesis class")]
    OutsideClass { residual: f64, epsilon: f64 },
    #[error("every coordinate was probed and all were zero")]
    NoNeedle,
    #[error("brute-force search is limited to {max_points} points and {max_actions} actions, got {points} and {actions}")]
    BudgetExceeded { points: usize, actions: usize, max_points: usize, max_actions: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Hidden reward vector answering exact probes.
#[derive(Debug, Clone)]
pub struct QueryEnvironment {
    mu: DVector<f64>,
    seen: Vec<bool>,
    query_log: Vec<(usize, f64)>,
}

impl QueryEnvironment {
    pub fn new(mu: DVector<f64>) -> Self {
        let k = mu.len();
        Self { mu, seen: vec![false; k], query_log: Vec::new() }
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    /// Returns `mu_i`. Repeated probes of the same index are not counted again.
    pub fn probe(&mut self, i: usize) -> Result<f64, QueryError> {
        if i >= self.k() {
            return Err(QueryError::IndexOutOfRange { index: i, k: self.k() });
        }
        let v = self.mu[i];
        if !self.seen[i] {
            self.seen[i] = true;
            self.query_log.push((i, v));
        }
        Ok(v)
    }

    /// Number of distinct indices probed so far.
    pub fn query_count(&self) -> usize {
        self.query_log.len()
    }

    /// Distinct probes in the order they were first answered.
    pub fn query_log(&self) -> &[(usize, f64)] {
        &self.query_log
    }

    /// The hidden vector, for scoring only.
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerOutput {
    pub mu_hat: DVector<f64>,
    pub a_hat: usize,
    pub queries_used: usize,
}

impl LearnerOutput {
    fn from_estimate(mu_hat: DVector<f64>, queries_used: usize) -> Self {
        let a_hat = argmax_lowest(mu_hat.iter().copied()).expect("non-empty estimate");
        Self { mu_hat, a_hat, queries_used }
    }

    /// `|mu_hat - mu|_inf`.
    pub fn error(&self, mu: &DVector<f64>) -> f64 {
        (&self.mu_hat - mu).amax()
    }

    /// `max mu - mu_{a_hat}`.
    pub fn action_gap(&self, mu: &DVector<f64>) -> f64 {
        mu.max() - mu[self.a_hat]
    }

    /// True unless the estimate is within `delta` while the chosen action
    /// misses the optimum by `2 delta` or more.
    pub fn max_sound_given_sound(&self, mu: &DVector<f64>, delta: f64) -> bool {
        self.error(mu) >= delta || self.action_gap(mu) < 2.0 * delta
    }
}

/// Probes the support of `rho` and extrapolates with the weighted least
/// squares estimate `theta = G(rho)^-1 sum_a rho(a) mu_a a`.
pub fn design_learner(phi: &FeatureMatrix, rho: &Design, env: &mut QueryEnvironment) -> Result<LearnerOutput, QueryError> {
    if env.k() != phi.k() {
        return Err(QueryError::Invalid(format!("environment has k = {}, features have k = {}", env.k(), phi.k())));
    }
    let m = phi.matrix();
    let d = phi.d();
    let mut gram = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for (i, w) in rho.iter() {
        if i >= phi.k() {
            return Err(DesignError::IndexOutOfRange { index: i, k: phi.k() }.into());
        }
        let a = m.row(i).transpose();
        gram.ger(w, &a, &a, 1.0);
        b.axpy(w * env.probe(i)?, &a, 1.0);
    }
    let theta = factor_gram(&gram)?.solve(&b);
    Ok(LearnerOutput::from_estimate(m * theta, env.query_count()))
}

/// Probes `subset` and returns the Chebyshev fit `Phi theta` with
/// `min_theta |Phi_C theta - mu_C|_inf`.
pub fn probe_and_fit_subset(
    phi: &FeatureMatrix,
    subset: &[usize],
    epsilon: f64,
    env: &mut QueryEnvironment,
) -> Result<LearnerOutput, QueryError> {
    if env.k() != phi.k() {
        return Err(QueryError::Invalid(format!("environment has k = {}, features have k = {}", env.k(), phi.k())));
    }
    let mut observed = DVector::zeros(subset.len());
    for (r, &i) in subset.iter().enumerate() {
        observed[r] = env.probe(i)?;
    }
    let rows = phi.matrix().select_rows(subset.iter());
    let fit = chebyshev_fit(&rows, &observed)?;
    if fit.residual > epsilon + FIT_TOL {
        return Err(QueryError::OutsideClass { residual: fit.residual, epsilon });
    }
    Ok(LearnerOutput::from_estimate(phi.matrix() * fit.theta, env.query_count()))
}

/// Picks the `lambda_q`-minimizing subset, probes it and fits.
pub fn probe_and_fit(
    phi: &FeatureMatrix,
    q: usize,
    epsilon: f64,
    env: &mut QueryEnvironment,
) -> Result<(LearnerOutput, LambdaQ), QueryError> {
    let lambda = lambda_q(phi, q, LambdaSearch::Auto)?;
    let out = probe_and_fit_subset(phi, &lambda.subset, epsilon, env)?;
    Ok((out, lambda))
}

/// Probes coordinates in a uniformly random order until one is nonzero.
/// Intended for needle environments `mu = e_i`.
pub fn random_probe_learner<R: Rng + ?Sized>(env: &mut QueryEnvironment, rng: &mut R) -> Result<LearnerOutput, QueryError> {
    let k = env.k();
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    for &i in &order {
        let v = env.probe(i)?;
        if v != 0.0 {
            let mut mu_hat = DVector::zeros(k);
            mu_hat[i] = v;
            return Ok(LearnerOutput { mu_hat, a_hat: i, queries_used: env.query_count() });
        }
    }
    Err(QueryError::NoNeedle)
}

/// Minimax number of queries a deterministic sound learner needs on the
/// finite class `h_points` at tolerance `delta`.
///
/// Searches adaptive query trees exhaustively. A state (consistent points,
/// probed coordinates) is terminal once every coordinate's range over the
/// consistent points is below `2 delta`, since the midrange estimate is then
/// strictly within `delta`. Randomized learners are not covered.
pub fn brute_force_est_complexity(h_points: &[DVector<f64>], delta: f64) -> Result<usize, QueryError> {
    let n = h_points.len();
    if n == 0 || !(delta > 0.0) {
        return Err(QueryError::Invalid(format!("need a non-empty class and delta > 0, got {n} points, delta = {delta}")));
    }
    let k = h_points[0].len();
    if h_points.iter().any(|p| p.len() != k) {
        return Err(QueryError::Invalid("points have different lengths".into()));
    }
    if n > BRUTE_MAX_POINTS || k > BRUTE_MAX_ACTIONS {
        return Err(QueryError::BudgetExceeded {
            points: n,
            actions: k,
            max_points: BRUTE_MAX_POINTS,
            max_actions: BRUTE_MAX_ACTIONS,
        });
    }
    let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut search = GameTree { points: h_points, k, delta, memo: HashMap::new() };
    Ok(search.value(full, 0))
}

struct GameTree<'a> {
    points: &'a [DVector<f64>],
    k: usize,
    delta: f64,
    memo: HashMap<(u64, u32), usize>,
}

impl GameTree<'_> {
    fn members(&self, set: u64) -> impl Iterator<Item = usize> + '_ {
        (0..self.points.len()).filter(move |&i| set >> i & 1 == 1)
    }

    fn resolved(&self, set: u64) -> bool {
        (0..self.k).all(|j| {
            let (lo, hi) = self
                .members(set)
                .map(|i| self.points[i][j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo < 2.0 * self.delta
        })
    }

    /// Splits `set` by the answer to probing coordinate `j`.
    fn split(&self, set: u64, j: usize) -> Vec<u64> {
        let mut groups: Vec<(f64, u64)> = Vec::new();
        for i in self.members(set) {
            let v = self.points[i][j];
            match groups.iter_mut().find(|(g, _)| (g - v).abs() <= ANSWER_TOL) {
                Some((_, bits)) => *bits |= 1 << i,
                None => groups.push((v, 1 << i)),
            }
        }
        groups.into_iter().map(|(_, bits)| bits).collect()
    }

    fn value(&mut self, set: u64, queried: u32) -> usize {
        if self.resolved(set) {
            return 0;
        }
        if let Some(&v) = self.memo.get(&(set, queried)) {
            return v;
        }
        let mut best = usize::MAX;
        for j in (0..self.k).filter(|j| queried >> j & 1 == 0) {
            let parts = self.split(set, j);
            if parts.len() == 1 {
                // An uninformative probe never helps a minimax learner.
                continue;
            }
            let mut worst = 0;
            for part in parts {
                worst = worst.max(self.value(part, queried | 1 << j));
                if 1 + worst >= best {
                    break;
                }
            }
            best = best.min(1 + worst);
        }
        // Unresolved with nothing left to learn happens only for duplicate
        // points, which are resolved; the fallback keeps the search total.
        let best = if best == usize::MAX { self.k } else { best };
        self.memo.insert((set, queried), best);
        best
    }
}
