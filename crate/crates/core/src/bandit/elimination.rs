//! Phased elimination with near-optimal designs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{BanditError, BanditInstance, BanditTrace};
use crate::design::{
    core_set_bound, default_max_iters, factor_gram, frank_wolfe_design, initial_episode_length, rounded_allocation, Design,
    DesignError, FeatureMatrix,
};
use crate::linalg::{argmax_lowest, numerical_rank, row_space_basis, RANK_TOL};

/// Step-6 elimination threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EliminationRule {
    /// Keep `a` when `max_b <theta, b - a> <= 2 sqrt((4d/m) ln(1/alpha))`.
    Standard,
    /// Keep `a` when `max_b <theta, b - a> / 4 <= sqrt((d/m) ln(1/alpha)) + epsilon sqrt(d)`.
    KnownEpsilon(f64),
}

impl EliminationRule {
    /// Threshold on `max_b <theta, b - a>` in working dimension `d`.
    pub fn threshold(&self, d: usize, m: usize, alpha: f64) -> f64 {
        let log_term = (1.0 / alpha).ln();
        match *self {
            EliminationRule::Standard => 2.0 * (4.0 * d as f64 / m as f64 * log_term).sqrt(),
            EliminationRule::KnownEpsilon(eps) => {
                4.0 * ((d as f64 / m as f64 * log_term).sqrt() + eps * (d as f64).sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EliminationConfig {
    pub alpha: f64,
    pub rule: EliminationRule,
    /// First episode length; defaults to `ceil(4 d loglog d) + 16`.
    pub initial_m: Option<usize>,
    /// Episode lengths are multiplied by this after every episode.
    pub growth: usize,
}

impl EliminationConfig {
    /// `alpha = 1/(kn)` with the standard rule.
    pub fn standard(k: usize, n: usize) -> Self {
        Self { alpha: 1.0 / (k as f64 * n as f64), rule: EliminationRule::Standard, initial_m: None, growth: 2 }
    }

    fn validate(&self) -> Result<(), BanditError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(BanditError::InvalidParameters(format!("alpha = {} must be in (0, 1)", self.alpha)));
        }
        if self.growth < 1 || self.initial_m == Some(0) {
            return Err(BanditError::InvalidParameters("episode lengths must be positive".into()));
        }
        if let EliminationRule::KnownEpsilon(eps) = self.rule {
            if !(eps >= 0.0) {
                return Err(BanditError::InvalidParameters(format!("epsilon = {eps}")));
            }
        }
        Ok(())
    }
}

/// Diagnostics of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub index: usize,
    pub start_round: usize,
    pub m: usize,
    /// Dimension of the span of the active set.
    pub working_dim: usize,
    pub active_before: usize,
    pub active_after: usize,
    pub support_size: usize,
    pub g_value: f64,
    /// False when the design search ran out of iterations and its best
    /// iterate was used.
    pub design_converged: bool,
    /// Planned pulls `sum_a ceil(m rho(a))`.
    pub pulls: usize,
    /// True when the horizon ended the episode before elimination.
    pub truncated: bool,
    pub threshold: f64,
    /// `max_b |b^T G^-1 sum_a u(a) Delta_a a|` over the active set.
    pub max_bias: f64,
    /// `2 epsilon sqrt(working_dim)` with the instance's epsilon.
    pub bias_bound: f64,
    pub best_mu_before: f64,
    pub best_mu_after: f64,
    /// Least-squares estimate in the original coordinates.
    pub theta_hat: DVector<f64>,
}

/// Runs phased elimination for `n` rounds with the standard rule.
pub fn phased_elimination<R: Rng + ?Sized>(
    inst: &BanditInstance,
    n: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<BanditTrace, BanditError> {
    let config = EliminationConfig { alpha, ..EliminationConfig::standard(inst.k(), n) };
    run_phased_elimination(inst, n, &config, rng)
}

/// Phased elimination with the rule that uses a known bound on epsilon.
pub fn phased_elimination_known_eps<R: Rng + ?Sized>(
    inst: &BanditInstance,
    n: usize,
    alpha: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<BanditTrace, BanditError> {
    let config = EliminationConfig { alpha, rule: EliminationRule::KnownEpsilon(epsilon), initial_m: None, growth: 2 };
    run_phased_elimination(inst, n, &config, rng)
}

/// Phased elimination under an explicit configuration.
///
/// When the active set spans fewer than `d` dimensions the design and the
/// estimate live in an orthonormal basis of its span. The episode schedule
/// keeps doubling regardless. The horizon may cut an episode short.
pub fn run_phased_elimination<R: Rng + ?Sized>(
    inst: &BanditInstance,
    n: usize,
    config: &EliminationConfig,
    rng: &mut R,
) -> Result<BanditTrace, BanditError> {
    if n == 0 {
        return Err(BanditError::InvalidParameters("n must be at least 1".into()));
    }
    config.validate()?;
    let phi = inst.phi().matrix();
    let mu = inst.mu();
    let delta = inst.reward().delta();
    let epsilon = inst.reward().epsilon();
    let mu_star = inst.best_mean();
    let noise = inst.noise();

    let mut trace = BanditTrace::with_capacity(n);
    let mut active: Vec<usize> = (0..inst.k()).collect();
    let mut m = config.initial_m.unwrap_or_else(|| initial_episode_length(inst.d()));

    while trace.rounds() < n {
        let start_round = trace.rounds() + 1;
        trace.episode_boundaries.push(start_round);
        let best_mu_before = active.iter().map(|&a| mu[a]).fold(f64::NEG_INFINITY, f64::max);

        if active.len() == 1 {
            let a = active[0];
            while trace.rounds() < n {
                trace.push(a, mu[a] + noise.sample(rng), mu_star - mu[a]);
            }
            trace.eliminated_log.push(1);
            trace.episodes.push(EpisodeLog {
                index: trace.episodes.len() + 1,
                start_round,
                m,
                working_dim: 0,
                active_before: 1,
                active_after: 1,
                support_size: 1,
                g_value: 0.0,
                design_converged: true,
                pulls: n + 1 - start_round,
                truncated: true,
                threshold: 0.0,
                max_bias: 0.0,
                bias_bound: 0.0,
                best_mu_before,
                best_mu_after: best_mu_before,
                theta_hat: DVector::zeros(inst.d()),
            });
            break;
        }

        let (basis, local) = working_features(phi, &active);
        let dw = local.ncols();
        let (rho, g_value, design_converged) = episode_design(&local)?;
        let alloc = rounded_allocation(&rho, m);

        // Pull each supported action u(a) times, in index order.
        let mut reward_sums = vec![0.0; active.len()];
        let mut truncated = false;
        'pulls: for &(i, count) in &alloc.counts {
            let a = active[i];
            for _ in 0..count {
                if trace.rounds() == n {
                    truncated = true;
                    break 'pulls;
                }
                let y = mu[a] + noise.sample(rng);
                reward_sums[i] += y;
                trace.push(a, y, mu_star - mu[a]);
            }
        }

        let mut gram = DMatrix::zeros(dw, dw);
        let mut b = DVector::zeros(dw);
        let mut bias_sum = DVector::zeros(dw);
        for &(i, count) in &alloc.counts {
            let x = local.row(i).transpose();
            gram.ger(count as f64, &x, &x, 1.0);
            b.axpy(reward_sums[i], &x, 1.0);
            bias_sum.axpy(count as f64 * delta[active[i]], &x, 1.0);
        }
        let chol = factor_gram(&gram)?;
        let theta_local = chol.solve(&b);
        let bias_dir = chol.solve(&bias_sum);
        let max_bias = (0..active.len()).map(|i| local.row(i).dot(&bias_dir.transpose()).abs()).fold(0.0, f64::max);
        let threshold = config.rule.threshold(dw, m, config.alpha);

        let active_before = active.len();
        if !truncated {
            let est: Vec<f64> = (0..active.len()).map(|i| local.row(i).dot(&theta_local.transpose())).collect();
            let top = est[argmax_lowest(est.iter().copied()).expect("active set is non-empty")];
            active = active.iter().zip(&est).filter(|(_, &e)| top - e <= threshold).map(|(&a, _)| a).collect();
            assert!(!active.is_empty(), "the empirical argmax always survives");
        }
        let best_mu_after = active.iter().map(|&a| mu[a]).fold(f64::NEG_INFINITY, f64::max);
        trace.eliminated_log.push(active.len());
        trace.episodes.push(EpisodeLog {
            index: trace.episodes.len() + 1,
            start_round,
            m,
            working_dim: dw,
            active_before,
            active_after: active.len(),
            support_size: rho.support_size(),
            g_value,
            design_converged,
            pulls: alloc.total,
            truncated,
            threshold,
            max_bias,
            bias_bound: 2.0 * epsilon * (dw as f64).sqrt(),
            best_mu_before,
            best_mu_after,
            theta_hat: &basis * theta_local,
        });
        m = m.saturating_mul(config.growth);
    }
    Ok(trace)
}

/// Active rows in working coordinates, with the basis mapping them back.
fn working_features(phi: &DMatrix<f64>, active: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let rows = phi.select_rows(active.iter());
    let d = phi.ncols();
    if numerical_rank(&rows, RANK_TOL) == d {
        (DMatrix::identity(d, d), rows)
    } else {
        let basis = row_space_basis(&rows, RANK_TOL);
        let local = &rows * &basis;
        (basis, local)
    }
}

/// Design with `g <= 2d` on the working features, falling back to the best
/// iterate (or the uniform design) rather than failing the run.
fn episode_design(local: &DMatrix<f64>) -> Result<(Design, f64, bool), BanditError> {
    let k = local.nrows();
    let d = local.ncols();
    let uniform = || -> Result<(Design, f64, bool), BanditError> {
        let rho = Design::uniform(&(0..k).collect::<Vec<_>>())?;
        let g = crate::design::weighted_gram(local, rho.iter());
        let chol = factor_gram(&g)?;
        let g_value = crate::design::row_leverages(local, &chol).max();
        Ok((rho, g_value, false))
    };
    let Ok(phi) = FeatureMatrix::new(local.clone()) else {
        return uniform();
    };
    match frank_wolfe_design(&phi, 2.0 * d as f64, core_set_bound(d), default_max_iters(d)) {
        Ok((rho, cert)) => Ok((rho, cert.g_value, true)),
        Err(DesignError::NotConverged { best, g_value, .. }) => Ok((*best, g_value, false)),
        Err(_) => uniform(),
    }
}
