//! Discounted tabular MDPs with a generative model, exact solvers and
//! approximate policy iteration on a core set.
//!
//! State-action pairs are flattened row-major: pair `(s, a)` is row
//! `s * A + a` of every `SA`-indexed vector and feature matrix.

mod api;

pub use api::{
    api_core_set, api_parameters, build_q_features, lemma3_violation, measure_epsilon, ApiDiagnostics, ApiIteration,
    ApiOverrides, ApiParams, FeatureMode, InitialPolicy, MeasuredEpsilon, QEstimate,
};

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use thiserror::Error;

use crate::design::DesignError;
use crate::linalg::{argmax_lowest, LpError};

/// Row sums of the transition matrix must equal 1 within this tolerance.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone)]
pub enum RlError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Finite discounted MDP with rewards in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TabularMDP {
    states: usize,
    actions: usize,
    /// `SA x S`; row `s * A + a` is `P(. | s, a)`.
    p: DMatrix<f64>,
    r: DVector<f64>,
    gamma: f64,
    samplers: Vec<WeightedIndex<f64>>,
}

impl PartialEq for TabularMDP {
    fn eq(&self, other: &Self) -> bool {
        self.actions == other.actions && self.p == other.p && self.r == other.r && self.gamma == other.gamma
    }
}

impl TabularMDP {
    pub fn new(actions: usize, p: DMatrix<f64>, r: DVector<f64>, gamma: f64) -> Result<Self, RlError> {
        let states = p.ncols();
        if actions == 0 || states == 0 || p.nrows() != states * actions || r.len() != p.nrows() {
            return Err(RlError::InvalidMdp(format!(
                "P is {}x{}, r has {} entries, A = {actions}",
                p.nrows(),
                p.ncols(),
                r.len()
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(RlError::InvalidMdp(format!("gamma = {gamma} must be in (0, 1)")));
        }
        let mut samplers = Vec::with_capacity(p.nrows());
        for row in 0..p.nrows() {
            let probs: Vec<f64> = p.row(row).iter().copied().collect();
            if probs.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(RlError::InvalidMdp(format!("row {row} of P has a negative or non-finite entry")));
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(RlError::InvalidMdp(format!("row {row} of P sums to {total}")));
            }
            samplers.push(WeightedIndex::new(&probs).map_err(|e| RlError::InvalidMdp(e.to_string()))?);
        }
        if let Some(i) = r.iter().position(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(RlError::InvalidMdp(format!("reward {} at row {i} is outside [0, 1]", r[i])));
        }
        Ok(Self { states, actions, p, r, gamma, samplers })
    }

    /// Dense random MDP: each `P(. | s, a)` is a normalized vector of
    /// independent uniforms and each reward is uniform on `[0, 1]`.
    pub fn random<R: Rng + ?Sized>(states: usize, actions: usize, gamma: f64, rng: &mut R) -> Result<Self, RlError> {
        let sa = states * actions;
        let mut p = DMatrix::from_fn(sa, states, |_, _| rng.random::<f64>());
        for mut row in p.row_iter_mut() {
            let total = row.sum();
            row /= total;
        }
        // Renormalizing can leave a rounding error in the last place; fold it
        // into the largest entry.
        for mut row in p.row_iter_mut() {
            let err = 1.0 - row.sum();
            let j = argmax_lowest(row.iter().copied()).expect("S >= 1");
            row[j] += err;
        }
        let r = DVector::from_fn(sa, |_, _| rng.random::<f64>());
        Self::new(actions, p, r, gamma)
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn pairs(&self) -> usize {
        self.states * self.actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transitions(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn rewards(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn index(&self, s: usize, a: usize) -> usize {
        s * self.actions + a
    }

    /// `(s, a)` of flattened row `i`.
    pub fn pair(&self, i: usize) -> (usize, usize) {
        (i / self.actions, i % self.actions)
    }

    /// `SA x SA` operator `(P^pi Q)(s, a) = sum_s' P(s'|s,a) Q(s', pi(s'))`.
    pub fn pair_operator(&self, pi: &Policy) -> DMatrix<f64> {
        let sa = self.pairs();
        let mut m = DMatrix::zeros(sa, sa);
        for row in 0..sa {
            for s2 in 0..self.states {
                m[(row, self.index(s2, pi.action(s2)))] = self.p[(row, s2)];
            }
        }
        m
    }

    /// `S x S` matrix `P^pi(s, s') = P(s' | s, pi(s))`.
    pub fn state_operator(&self, pi: &Policy) -> DMatrix<f64> {
        DMatrix::from_fn(self.states, self.states, |s, s2| self.p[(self.index(s, pi.action(s)), s2)])
    }

    /// Bellman optimality operator on a `Q` table.
    pub fn bellman(&self, q: &DVector<f64>) -> DVector<f64> {
        let v = self.greedy_values(q);
        &self.r + (&self.p * v) * self.gamma
    }

    fn greedy_values(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.states, |s, _| (0..self.actions).map(|a| q[self.index(s, a)]).fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Deterministic stationary policy.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Policy(Vec<usize>);

impl Policy {
    pub fn new(actions: Vec<usize>, mdp: &TabularMDP) -> Result<Self, RlError> {
        if actions.len() != mdp.states() || actions.iter().any(|&a| a >= mdp.actions()) {
            return Err(RlError::InvalidParameters("policy does not match the MDP".into()));
        }
        Ok(Self(actions))
    }

    /// Action 0 in every state.
    pub fn constant(mdp: &TabularMDP) -> Self {
        Self(vec![0; mdp.states()])
    }

    pub fn random<R: Rng + ?Sized>(mdp: &TabularMDP, rng: &mut R) -> Self {
        Self((0..mdp.states()).map(|_| rng.random_range(0..mdp.actions())).collect())
    }

    /// The policy with index `code` in base `A`, state 0 least significant.
    pub fn from_code(mut code: u64, mdp: &TabularMDP) -> Self {
        let a = mdp.actions() as u64;
        Self(
            (0..mdp.states())
                .map(|_| {
                    let x = (code % a) as usize;
                    code /= a;
                    x
                })
                .collect(),
        )
    }

    pub fn action(&self, s: usize) -> usize {
        self.0[s]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// `pi(s) = argmax_a Q(s, a)`, lowest action on ties.
pub fn greedy_policy(mdp: &TabularMDP, q: &DVector<f64>) -> Policy {
    Policy(
        (0..mdp.states())
            .map(|s| argmax_lowest((0..mdp.actions()).map(|a| q[mdp.index(s, a)])).expect("A >= 1"))
            .collect(),
    )
}

/// Exact `(V^pi, Q^pi)` by solving `(I - gamma P^pi) V = r^pi`.
pub fn exact_policy_eval(mdp: &TabularMDP, pi: &Policy) -> (DVector<f64>, DVector<f64>) {
    let s = mdp.states();
    let system = DMatrix::identity(s, s) - mdp.state_operator(pi) * mdp.gamma();
    let r_pi = DVector::from_fn(s, |st, _| mdp.r[mdp.index(st, pi.action(st))]);
    let v = system.lu().solve(&r_pi).expect("I - gamma P is invertible for gamma < 1");
    let q = &mdp.r + (&mdp.p * &v) * mdp.gamma();
    (v, q)
}

/// Value iteration until `|Q - TQ|_inf <= tol (1 - gamma) / (2 gamma)`, so
/// that the returned `TQ` is within `tol` of `Q*`.
pub fn exact_value_iteration(mdp: &TabularMDP, tol: f64) -> Result<(DVector<f64>, DVector<f64>), RlError> {
    if !(tol > 0.0) {
        return Err(RlError::InvalidParameters(format!("tol = {tol}")));
    }
    let stop = tol * (1.0 - mdp.gamma()) / (2.0 * mdp.gamma());
    let mut q = DVector::zeros(mdp.pairs());
    loop {
        let tq = mdp.bellman(&q);
        let residual = (&tq - &q).amax();
        q = tq;
        if residual <= stop {
            return Ok((mdp.greedy_values(&q), q));
        }
    }
}

/// Optimal policy and its exact values by policy iteration. A state's action
/// changes only on a strict improvement, so the iteration terminates.
pub fn exact_optimal(mdp: &TabularMDP) -> (Policy, DVector<f64>, DVector<f64>) {
    let mut pi = Policy::constant(mdp);
    loop {
        let (v, q) = exact_policy_eval(mdp, &pi);
        let scale = 1e-12 * (1.0 + v.amax());
        let mut changed = false;
        let mut next = pi.0.clone();
        for s in 0..mdp.states() {
            let best = greedy_policy(mdp, &q).action(s);
            if q[mdp.index(s, best)] > q[mdp.index(s, pi.action(s))] + scale {
                next[s] = best;
                changed = true;
            }
        }
        if !changed {
            return (pi, v, q);
        }
        pi = Policy(next);
    }
}

/// Sampling access to an MDP that counts every `(s, a)` query.
#[derive(Debug)]
pub struct GenerativeModel<'a> {
    mdp: &'a TabularMDP,
    samples: u64,
}

impl<'a> GenerativeModel<'a> {
    pub fn new(mdp: &'a TabularMDP) -> Self {
        Self { mdp, samples: 0 }
    }

    /// Reward of `(s, a)` and a next state drawn from `P(. | s, a)`.
    pub fn sample<R: Rng + ?Sized>(&mut self, s: usize, a: usize, rng: &mut R) -> (f64, usize) {
        self.samples += 1;
        let row = self.mdp.index(s, a);
        (self.mdp.r[row], self.mdp.samplers[row].sample(rng))
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }
}

/// One discounted return `sum_{t<n} gamma^t r(s_t, a_t)` starting with
/// `(s, a)` and following `pi`. Uses exactly `n` generative samples.
pub fn rollout_q<R: Rng + ?Sized>(
    model: &mut GenerativeModel<'_>,
    pi: &Policy,
    s: usize,
    a: usize,
    horizon: usize,
    rng: &mut R,
) -> f64 {
    let gamma = model.mdp.gamma();
    let (mut state, mut action) = (s, a);
    let mut discount = 1.0;
    let mut total = 0.0;
    for _ in 0..horizon {
        let (r, next) = model.sample(state, action, rng);
        total += discount * r;
        discount *= gamma;
        state = next;
        action = pi.action(state);
    }
    total
}
