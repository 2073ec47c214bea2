//! Approximate policy iteration with rollouts on an optimal-design core set.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{exact_optimal, exact_policy_eval, greedy_policy, rollout_q, GenerativeModel, Policy, RlError, TabularMDP};
use crate::design::{factor_gram, near_optimal_design, weighted_gram, FeatureMatrix};
use crate::linalg::chebyshev_fit;
use crate::rng::stream_rng;

/// Largest `A^S` for which every deterministic policy is enumerated when
/// measuring misspecification.
pub const ENUMERATION_LIMIT: u64 = 4096;
/// Random policies sampled when enumeration is too large.
pub const SAMPLED_POLICIES: usize = 256;

/// Iterations, rollouts per pair and rollout length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApiParams {
    pub k: usize,
    pub m: usize,
    pub n: usize,
}

/// `k = ln(1/(eps sqrt d))/(1-g)`, `m = ln(2k|C|/alpha)/(2 eps^2 (1-g)^2)`,
/// `n = ln(1/(eps (1-g)))/(1-g)`, each rounded up and at least 1.
pub fn api_parameters(gamma: f64, d: usize, core_size: usize, epsilon: f64, alpha: f64) -> ApiParams {
    let h = 1.0 - gamma;
    let up = |x: f64| if x.is_finite() && x > 1.0 { x.ceil() as usize } else { 1 };
    let k = up((1.0 / (epsilon * (d as f64).sqrt())).ln() / h);
    let m = up((2.0 * k as f64 * core_size as f64 / alpha).ln() / (2.0 * epsilon * epsilon * h * h));
    let n = up((1.0 / (epsilon * h)).ln() / h);
    ApiParams { k, m, n }
}

/// Replacements for the computed parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ApiOverrides {
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialPolicy {
    /// Action 0 in every state.
    #[default]
    Constant,
    /// Uniformly random actions from a dedicated stream of the run seed.
    Random,
}

/// Linear `Q` estimate; values are always derived from `theta_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct QEstimate {
    pub theta_hat: DVector<f64>,
}

impl QEstimate {
    pub fn values(&self, phi: &FeatureMatrix) -> DVector<f64> {
        phi.matrix() * &self.theta_hat
    }
}

/// Per-iteration diagnostics, checked against exact oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiIteration {
    /// From 1.
    pub iteration: usize,
    pub policy: Policy,
    /// `max_C |Q_hat - Q^pi|`.
    pub core_error: f64,
    /// `min_theta |Q^pi - Phi theta|_inf` for this iteration's policy.
    pub misspecification: f64,
    /// `|Q_i - Q^pi_i|_inf`.
    pub extrapolation_error: f64,
    /// `eps_i + (eps_i + core_error) sqrt(2d)`.
    pub extrapolation_bound: f64,
    /// `|Q* - Q^pi_i|_inf`.
    pub policy_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiDiagnostics {
    pub params: ApiParams,
    pub overridden: bool,
    /// Core set as `(s, a)` pairs.
    pub core_set: Vec<(usize, usize)>,
    pub design_g: f64,
    pub samples: u64,
    /// `k m n |C|`.
    pub expected_samples: u64,
    pub iterations: Vec<ApiIteration>,
    /// `max_s V*(s) - V^pi(s)` for the returned policy.
    pub value_gap: f64,
    /// `3 eps sqrt(2d) + eps` with the configured epsilon.
    pub delta: f64,
    /// `2/(1-g)^2 (3 delta + g^k)`.
    pub guarantee: f64,
    /// Largest measured `|Q_i - Q^pi_i|_inf`.
    pub measured_delta: f64,
    /// `|Q* - Q^pi_out|_inf`.
    pub final_policy_error: f64,
    /// `2 delta_meas / (1-g) + g^k / (1-g)` with the measured delta.
    pub convergence_bound: f64,
    /// Each rollout average may fail with probability `alpha / (k |C|)`.
    pub per_event_alpha: f64,
}

impl ApiDiagnostics {
    pub fn within_guarantee(&self) -> bool {
        self.value_gap <= self.guarantee
    }

    pub fn ledger_ok(&self) -> bool {
        self.samples == self.expected_samples
    }
}

/// Runs `k` rounds of rollout evaluation on the design support, least-squares
/// extrapolation and greedy improvement; returns `pi_{k+1}`.
///
/// Rollouts for iteration `i` (from 1) and core pair `j` draw from stream
/// `(i - 1) |C| + j` of `seed`, so results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn api_core_set(
    mdp: &TabularMDP,
    phi: &FeatureMatrix,
    epsilon: f64,
    alpha: f64,
    seed: u64,
    overrides: ApiOverrides,
    initial: InitialPolicy,
) -> Result<(Policy, ApiDiagnostics), RlError> {
    if phi.k() != mdp.pairs() {
        return Err(RlError::InvalidParameters(format!("features have {} rows, the MDP has {} pairs", phi.k(), mdp.pairs())));
    }
    if !(epsilon > 0.0) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(RlError::InvalidParameters(format!("need epsilon > 0 and 0 < alpha < 1, got {epsilon}, {alpha}")));
    }
    if [overrides.k, overrides.m, overrides.n].contains(&Some(0)) {
        return Err(RlError::InvalidParameters("overrides must be positive".into()));
    }
    let d = phi.d();
    let gamma = mdp.gamma();
    let (rho, cert) = near_optimal_design(phi)?;
    let core: Vec<(usize, f64)> = rho.iter().collect();
    let computed = api_parameters(gamma, d, core.len(), epsilon, alpha);
    let params = ApiParams {
        k: overrides.k.unwrap_or(computed.k),
        m: overrides.m.unwrap_or(computed.m),
        n: overrides.n.unwrap_or(computed.n),
    };
    let chol = factor_gram(&weighted_gram(phi.matrix(), rho.iter()))?;
    let (_, v_star, q_star) = exact_optimal(mdp);

    let mut pi = match initial {
        InitialPolicy::Constant => Policy::constant(mdp),
        InitialPolicy::Random => Policy::random(mdp, &mut stream_rng(seed, u64::MAX)),
    };
    let mut samples = 0u64;
    let mut iterations = Vec::with_capacity(params.k);
    for i in 1..=params.k {
        let base = (i as u64 - 1) * core.len() as u64;
        let estimates: Vec<(f64, u64)> = core
            .par_iter()
            .enumerate()
            .map(|(j, &(row, _))| {
                let mut rng = stream_rng(seed, base + j as u64);
                let mut model = GenerativeModel::new(mdp);
                let (s, a) = mdp.pair(row);
                let total: f64 = (0..params.m).map(|_| rollout_q(&mut model, &pi, s, a, params.n, &mut rng)).sum();
                (total / params.m as f64, model.samples())
            })
            .collect();
        samples += estimates.iter().map(|&(_, c)| c).sum::<u64>();

        let mut b = DVector::zeros(d);
        for (&(row, w), &(q_hat, _)) in core.iter().zip(&estimates) {
            b.axpy(w * q_hat, &phi.matrix().row(row).transpose(), 1.0);
        }
        let estimate = QEstimate { theta_hat: chol.solve(&b) };
        let q_i = estimate.values(phi);

        let (_, q_pi) = exact_policy_eval(mdp, &pi);
        let core_error = core.iter().zip(&estimates).map(|(&(row, _), &(q_hat, _))| (q_hat - q_pi[row]).abs()).fold(0.0, f64::max);
        let misspecification = chebyshev_fit(phi.matrix(), &q_pi)?.residual;
        iterations.push(ApiIteration {
            iteration: i,
            policy: pi.clone(),
            core_error,
            misspecification,
            extrapolation_error: (&q_i - &q_pi).amax(),
            extrapolation_bound: misspecification + (misspecification + core_error) * (2.0 * d as f64).sqrt(),
            policy_error: (&q_star - &q_pi).amax(),
        });
        pi = greedy_policy(mdp, &q_i);
    }

    let (v_out, q_out) = exact_policy_eval(mdp, &pi);
    let delta = 3.0 * epsilon * (2.0 * d as f64).sqrt() + epsilon;
    let h = 1.0 - gamma;
    let gk = gamma.powi(params.k as i32);
    let measured_delta = iterations.iter().map(|it| it.extrapolation_error).fold(0.0, f64::max);
    let diagnostics = ApiDiagnostics {
        params,
        overridden: params != computed,
        core_set: core.iter().map(|&(row, _)| mdp.pair(row)).collect(),
        design_g: cert.g_value,
        samples,
        expected_samples: (params.k * params.m * params.n * core.len()) as u64,
        iterations,
        value_gap: (&v_star - v_out).max(),
        delta,
        guarantee: 2.0 / (h * h) * (3.0 * delta + gk),
        measured_delta,
        final_policy_error: (&q_star - q_out).amax(),
        convergence_bound: 2.0 * measured_delta / h + gk / h,
        per_event_alpha: alpha / (params.k * core.len()) as f64,
    };
    Ok((pi, diagnostics))
}

/// How to build `Q` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Identity features, one per pair.
    Tabular,
    /// `d` orthonormal columns of a random Gaussian matrix.
    Projected { d: usize, seed: u64 },
}

/// `max_pi min_theta |Q^pi - Phi theta|_inf` over a set of policies.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredEpsilon {
    pub value: f64,
    /// True when every deterministic policy was checked; otherwise the value
    /// is a lower estimate.
    pub exhaustive: bool,
    pub policies_checked: usize,
}

pub fn build_q_features(mdp: &TabularMDP, mode: FeatureMode) -> Result<(FeatureMatrix, MeasuredEpsilon), RlError> {
    let sa = mdp.pairs();
    match mode {
        FeatureMode::Tabular => {
            let phi = FeatureMatrix::identity(sa)?;
            Ok((phi, MeasuredEpsilon { value: 0.0, exhaustive: true, policies_checked: 0 }))
        }
        FeatureMode::Projected { d, seed } => {
            if d == 0 || d > sa {
                return Err(RlError::InvalidParameters(format!("need 1 <= d <= SA = {sa}, got {d}")));
            }
            let mut rng = stream_rng(seed, 0);
            let gaussian = DMatrix::from_fn(sa, d, |_, _| StandardNormal.sample(&mut rng));
            let phi = FeatureMatrix::new(gaussian.qr().q())?;
            let eps = measure_epsilon(mdp, &phi, &[], &mut stream_rng(seed, 1))?;
            Ok((phi, eps))
        }
    }
}

/// Misspecification of `phi` over all deterministic policies when `A^S` is
/// at most [`ENUMERATION_LIMIT`], otherwise over random policies, the
/// iterates of exact policy iteration and `extra`.
pub fn measure_epsilon<R: Rng + ?Sized>(
    mdp: &TabularMDP,
    phi: &FeatureMatrix,
    extra: &[Policy],
    rng: &mut R,
) -> Result<MeasuredEpsilon, RlError> {
    let count = (mdp.actions() as u64).checked_pow(mdp.states() as u32);
    let exhaustive = count.is_some_and(|c| c <= ENUMERATION_LIMIT);
    let mut policies: Vec<Policy> = if exhaustive {
        (0..count.expect("checked")).map(|c| Policy::from_code(c, mdp)).collect()
    } else {
        let mut ps: Vec<Policy> = (0..SAMPLED_POLICIES).map(|_| Policy::random(mdp, rng)).collect();
        ps.extend(policy_iteration_path(mdp));
        ps
    };
    policies.extend(extra.iter().cloned());
    let mut value: f64 = 0.0;
    for pi in &policies {
        let (_, q) = exact_policy_eval(mdp, pi);
        value = value.max(chebyshev_fit(phi.matrix(), &q)?.residual);
    }
    Ok(MeasuredEpsilon { value, exhaustive, policies_checked: policies.len() })
}

/// Policies visited by exact policy iteration from the constant policy.
fn policy_iteration_path(mdp: &TabularMDP) -> Vec<Policy> {
    let (star, _, _) = exact_optimal(mdp);
    let mut path = vec![Policy::constant(mdp)];
    while path.len() < 64 {
        let (_, q) = exact_policy_eval(mdp, path.last().expect("non-empty"));
        let next = greedy_policy(mdp, &q);
        if path.contains(&next) {
            break;
        }
        path.push(next);
    }
    path.push(star);
    path
}

/// Largest entry of `lhs - rhs` in the error-propagation inequality
/// `Q* - Q^{pi_k} <= (g P*)^k (Q* - Q^{pi_0}) + g sum_i (g P*)^{k-i-1} E_i delta_i`
/// with `delta_i = Q_i - Q^{pi_i}` and
/// `E_i = P^{pi_{i+1}} (I - g P^{pi_{i+1}})^-1 (I - g P^{pi_i}) - P*`.
/// `policies` holds `pi_0..=pi_k` and `q` holds `Q_0..Q_{k-1}`, where each
/// `pi_{i+1}` is greedy with respect to `Q_i`. Non-positive means it holds.
pub fn lemma3_violation(mdp: &TabularMDP, policies: &[Policy], q: &[DVector<f64>]) -> Result<f64, RlError> {
    let k = q.len();
    if policies.len() != k + 1 || k == 0 {
        return Err(RlError::InvalidParameters("need k >= 1 estimates and k + 1 policies".into()));
    }
    let g = mdp.gamma();
    let sa = mdp.pairs();
    let id = DMatrix::<f64>::identity(sa, sa);
    let (star, _, q_star) = exact_optimal(mdp);
    let gp_star = mdp.pair_operator(&star) * g;
    let p_star = mdp.pair_operator(&star);
    let q_pi: Vec<DVector<f64>> = policies.iter().map(|p| exact_policy_eval(mdp, p).1).collect();
    let power = |mut v: DVector<f64>, times: usize| {
        for _ in 0..times {
            v = &gp_star * v;
        }
        v
    };
    let mut rhs = power(&q_star - &q_pi[0], k);
    for i in 0..k {
        let p_next = mdp.pair_operator(&policies[i + 1]);
        let p_cur = mdp.pair_operator(&policies[i]);
        let delta_i = &q[i] - &q_pi[i];
        let inner = (&id - &p_cur * g) * delta_i;
        let solved = (&id - &p_next * g).lu().solve(&inner).expect("I - gP is invertible");
        let e_delta = &p_next * solved - &p_star * (&q[i] - &q_pi[i]);
        rhs += power(e_delta, k - i - 1) * g;
    }
    let lhs = &q_star - &q_pi[k];
    Ok((lhs - rhs).max())
}
