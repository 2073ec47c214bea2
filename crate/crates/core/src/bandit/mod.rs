//! Stochastic linear bandits with misspecified rewards.

mod elimination;
mod instances;
mod linucb;

pub use elimination::{phased_elimination, phased_elimination_known_eps, EliminationConfig, EliminationRule, EpisodeLog};
pub use instances::{failure_instance, lower_bound_features, lower_bound_instance, random_contexts, realizable_instance};
pub use linucb::{linucb, linucb_modified, linucb_beta, ContextSequence, ContextSet, LinUcbStats};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::design::{DesignError, FeatureMatrix};
use crate::hypothesis::{HypothesisError, MisspecifiedReward};

#[derive(Debug, Error, Clone)]
pub enum BanditError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("no instance with gap >= {min_gap} found in {attempts} draws")]
    InstanceSearch { min_gap: f64, attempts: usize },
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
}

/// Reward noise `eta_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    Gaussian { sigma: f64 },
    /// Uniform on `[-half_width, half_width]`.
    Uniform { half_width: f64 },
    Zero,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Gaussian { sigma: 1.0 }
    }
}

impl NoiseModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseModel::Gaussian { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            }
            NoiseModel::Uniform { half_width } => half_width * (2.0 * rng.random::<f64>() - 1.0),
            NoiseModel::Zero => 0.0,
        }
    }
}

/// A finite-armed linear bandit `Y_t = mu_{X_t} + eta_t`.
#[derive(Debug, Clone)]
pub struct BanditInstance {
    phi: FeatureMatrix,
    reward: MisspecifiedReward,
    noise: NoiseModel,
}

impl BanditInstance {
    pub fn new(phi: FeatureMatrix, reward: MisspecifiedReward, noise: NoiseModel) -> Result<Self, BanditError> {
        if reward.mu().len() != phi.k() || reward.theta().len() != phi.d() {
            return Err(BanditError::InvalidParameters(format!(
                "reward has k = {}, d = {} but features are {}x{}",
                reward.mu().len(),
                reward.theta().len(),
                phi.k(),
                phi.d()
            )));
        }
        Ok(Self { phi, reward, noise })
    }

    pub fn phi(&self) -> &FeatureMatrix {
        &self.phi
    }

    pub fn reward(&self) -> &MisspecifiedReward {
        &self.reward
    }

    pub fn mu(&self) -> &DVector<f64> {
        self.reward.mu()
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    pub fn k(&self) -> usize {
        self.phi.k()
    }

    pub fn d(&self) -> usize {
        self.phi.d()
    }

    pub fn best_mean(&self) -> f64 {
        self.mu().max()
    }

    /// The regret guarantee assumes `max mu - min mu <= 1`.
    pub fn range_warning(&self) -> Option<String> {
        let r = self.reward.range();
        (r > 1.0).then(|| format!("reward range {r:.4} exceeds 1"))
    }
}

/// Round-by-round record of a bandit run. Rounds are numbered from 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BanditTrace {
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub instant_regret: Vec<f64>,
    pub cumulative_regret: Vec<f64>,
    /// First round of each episode; empty for non-episodic algorithms.
    pub episode_boundaries: Vec<usize>,
    /// Active set size after each episode's elimination step.
    pub eliminated_log: Vec<usize>,
    pub episodes: Vec<EpisodeLog>,
}

impl BanditTrace {
    fn with_capacity(n: usize) -> Self {
        Self {
            actions: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            instant_regret: Vec::with_capacity(n),
            cumulative_regret: Vec::with_capacity(n),
            ..Self::default()
        }
    }

    pub(crate) fn push(&mut self, action: usize, reward: f64, regret: f64) {
        let prev = self.cumulative_regret.last().copied().unwrap_or(0.0);
        self.actions.push(action);
        self.rewards.push(reward);
        self.instant_regret.push(regret);
        self.cumulative_regret.push(prev + regret);
    }

    pub fn rounds(&self) -> usize {
        self.actions.len()
    }

    pub fn final_regret(&self) -> f64 {
        self.cumulative_regret.last().copied().unwrap_or(0.0)
    }

    /// Episode (from 1) of round `t` (from 1); 0 when there are no episodes.
    pub fn episode_of(&self, t: usize) -> usize {
        self.episode_boundaries.partition_point(|&start| start <= t)
    }
}
