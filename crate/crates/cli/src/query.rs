use misspec_lab_core::design::near_optimal_design;
use misspec_lab_core::hypothesis::{lambda_q, LambdaSearch, MisspecifiedReward};
use misspec_lab_core::query::{design_learner, probe_and_fit_subset, random_probe_learner, QueryEnvironment};
use misspec_lab_core::{stream_rng, FeatureMatrix, SimRng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{non_negative, positive};
use crate::output::{num, Table};
use crate::plot;
use crate::{invalid, CliError, Result, RunContext};

pub const HELP: &str = "\
[query] keys (defaults):
  needle_k = [5, 11]        sizes of uniform needle instances
  needle_trials = 100000    trials per size for the random probe learner
  lambda_instances = 5      random Gaussian feature matrices
  lambda_k = 8, lambda_d = 2
  lambda_q = [2, 3, 4]      subset sizes, each in [1, lambda_k)
  lambda_search = \"auto\"    exhaustive | auto (exhaustive up to 1e6 subsets) | greedy
  estimator_trials = 200    noiseless design-learner trials
  estimator_k = 100, estimator_d = 5
  epsilon = 0.1             misspecification of the random reward vectors
  worst_case = true         Delta at +-epsilon instead of uniform in [-epsilon, epsilon]
Streams: needle size i uses stream i, lambda instance j stream 2^32 + j,
estimator trial t stream 2^33 + t.
Writes needle.csv, lambda.csv (with the probe-and-fit error against
epsilon (1 + 2 lambda_q)), estimator.csv (error against epsilon (1 + sqrt(2d)))
and estimator_hist.svg.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Search {
    Exhaustive,
    #[default]
    Auto,
    Greedy,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    pub needle_k: Vec<usize>,
    pub needle_trials: usize,
    pub lambda_instances: usize,
    pub lambda_k: usize,
    pub lambda_d: usize,
    pub lambda_q: Vec<usize>,
    pub lambda_search: Search,
    pub estimator_trials: usize,
    pub estimator_k: usize,
    pub estimator_d: usize,
    pub epsilon: f64,
    pub worst_case: bool,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            needle_k: vec![5, 11],
            needle_trials: 100_000,
            lambda_instances: 5,
            lambda_k: 8,
            lambda_d: 2,
            lambda_q: vec![2, 3, 4],
            lambda_search: Search::Auto,
            estimator_trials: 200,
            estimator_k: 100,
            estimator_d: 5,
            epsilon: 0.1,
            worst_case: true,
        }
    }
}

impl QueryConfig {
    pub fn resolved(self) -> Result<Self> {
        if self.needle_k.contains(&0) {
            return invalid("query.needle_k entries must be at least 1");
        }
        if !self.needle_k.is_empty() {
            positive("query.needle_trials", self.needle_trials)?;
        }
        if self.lambda_instances > 0 {
            positive("query.lambda_d", self.lambda_d)?;
            if self.lambda_k < self.lambda_d.max(2) {
                return invalid(format!("query.lambda_k = {} must be at least max(lambda_d, 2)", self.lambda_k));
            }
            if let Some(&q) = self.lambda_q.iter().find(|&&q| q == 0 || q >= self.lambda_k) {
                return invalid(format!("query.lambda_q = {q} must lie in [1, lambda_k = {})", self.lambda_k));
            }
        }
        if self.estimator_trials > 0 {
            positive("query.estimator_d", self.estimator_d)?;
            if self.estimator_k < self.estimator_d {
                return invalid(format!("query.estimator_k = {} must be at least estimator_d", self.estimator_k));
            }
        }
        non_negative("query.epsilon", self.epsilon)?;
        Ok(self)
    }
}

fn gaussian_features(k: usize, d: usize, rng: &mut SimRng) -> Result<FeatureMatrix> {
    for _ in 0..100 {
        let rows = DMatrix::from_fn(k, d, |_, _| StandardNormal.sample(&mut *rng));
        if let Ok(phi) = FeatureMatrix::new(rows) {
            return Ok(phi);
        }
    }
    Err(CliError::Runtime("could not draw a full-rank feature matrix".into()))
}

pub fn run(cfg: &QueryConfig, ctx: &RunContext) -> Result<()> {
    let needles: Vec<(usize, f64)> = cfg
        .needle_k
        .par_iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut rng = stream_rng(ctx.seed, i as u64);
            let mut total = 0usize;
            for _ in 0..cfg.needle_trials {
                let mut mu = DVector::zeros(k);
                mu[rng.random_range(0..k)] = 1.0;
                let mut env = QueryEnvironment::new(mu);
                total += random_probe_learner(&mut env, &mut rng).map_err(CliError::runtime)?.queries_used;
            }
            Ok((k, total as f64 / cfg.needle_trials as f64))
        })
        .collect::<Result<_>>()?;
    let mut table = Table::create(&ctx.path("needle.csv"), &["k", "trials", "mean_queries", "expected", "relative_error"])?;
    for (k, mean) in needles {
        let expected = (k as f64 + 1.0) / 2.0;
        table.row([k.to_string(), cfg.needle_trials.to_string(), num(mean), num(expected), num((mean - expected).abs() / expected)])?;
    }
    table.finish()?;

    let search = match cfg.lambda_search {
        Search::Exhaustive => LambdaSearch::Exhaustive,
        Search::Auto => LambdaSearch::Auto,
        Search::Greedy => LambdaSearch::Greedy,
    };
    let lambda_rows: Vec<Vec<[String; 7]>> = (0..cfg.lambda_instances)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(ctx.seed, (1 << 32) + j as u64);
            let phi = gaussian_features(cfg.lambda_k, cfg.lambda_d, &mut rng)?;
            let reward = MisspecifiedReward::random(phi.matrix(), cfg.epsilon, cfg.worst_case, &mut rng).map_err(CliError::runtime)?;
            cfg.lambda_q
                .iter()
                .map(|&q| {
                    let lambda = lambda_q(&phi, q, search).map_err(CliError::runtime)?;
                    let (error, bound) = if lambda.value.is_finite() {
                        let mut env = QueryEnvironment::new(reward.mu().clone());
                        let out = probe_and_fit_subset(&phi, &lambda.subset, cfg.epsilon, &mut env).map_err(CliError::runtime)?;
                        (out.error(reward.mu()), cfg.epsilon * (1.0 + 2.0 * lambda.value))
                    } else {
                        (f64::NAN, f64::INFINITY)
                    };
                    let subset = lambda.subset.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
                    Ok([j.to_string(), q.to_string(), num(lambda.value), lambda.exact.to_string(), subset, num(error), num(bound)])
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut table = Table::create(&ctx.path("lambda.csv"), &["instance", "q", "lambda", "exact", "subset", "probe_error", "error_bound"])?;
    for row in lambda_rows.into_iter().flatten() {
        table.row(row)?;
    }
    table.finish()?;

    let errors: Vec<(f64, f64)> = (0..cfg.estimator_trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(ctx.seed, (1 << 33) + t as u64);
            let phi = gaussian_features(cfg.estimator_k, cfg.estimator_d, &mut rng)?;
            let reward = MisspecifiedReward::random(phi.matrix(), cfg.epsilon, cfg.worst_case, &mut rng).map_err(CliError::runtime)?;
            let (rho, _) = near_optimal_design(&phi).map_err(CliError::runtime)?;
            let mut env = QueryEnvironment::new(reward.mu().clone());
            let out = design_learner(&phi, &rho, &mut env).map_err(CliError::runtime)?;
            Ok((out.error(reward.mu()), cfg.epsilon * (1.0 + (2.0 * cfg.estimator_d as f64).sqrt())))
        })
        .collect::<Result<_>>()?;
    let mut table = Table::create(&ctx.path("estimator.csv"), &["trial", "error", "bound", "ratio", "within_bound"])?;
    for (t, &(e, b)) in errors.iter().enumerate() {
        table.row([t.to_string(), num(e), num(b), num(e / b), (e <= b + 1e-9).to_string()])?;
    }
    table.finish()?;

    if ctx.plots && !errors.is_empty() {
        let ratios: Vec<f64> = errors.iter().map(|(e, b)| e / b).collect();
        plot::attempt(
            "estimator_hist.svg",
            plot::histogram(&ctx.path("estimator_hist.svg"), "Design-learner error / bound", "ratio", &ratios, 30),
        );
    }
    Ok(())
}
