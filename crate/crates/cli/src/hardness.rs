use misspec_lab_core::hypothesis::{hardness_count, jl_dimension, HypothesisError, HARDNESS_CAP};
use serde::{Deserialize, Serialize};

use crate::config::{in_open_unit, non_empty, positive};
use crate::output::{num, Table};
use crate::{invalid, CliError, Result, RunContext};

pub const HELP: &str = "\
[hardness] keys (defaults):
  d = [10, 50, 100, 200]    dimensions
  epsilon = [0.1]           misspecification levels
  delta = [0.1, 0.2, 0.5]   accuracy levels; pairs with epsilon > delta are skipped
  cap = 1099511627776       largest reported count (2^40)
  jl_k = [100, 1000, 10000] action counts for the embedding dimension table
  jl_epsilon = [0.5, 0.25]  inner-product bounds for the embedding table
Counts are floor(exp((d - 1) / 8 (epsilon / delta)^2)) with natural logs;
dimensions are ceil(8 ln k / epsilon^2). No randomness is used.
Writes hardness.csv (d, epsilon, delta, count, status) and jl.csv (k, epsilon, d).";

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardnessConfig {
    pub d: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub delta: Vec<f64>,
    pub cap: u64,
    pub jl_k: Vec<usize>,
    pub jl_epsilon: Vec<f64>,
}

impl Default for HardnessConfig {
    fn default() -> Self {
        Self {
            d: vec![10, 50, 100, 200],
            epsilon: vec![0.1],
            delta: vec![0.1, 0.2, 0.5],
            cap: HARDNESS_CAP,
            jl_k: vec![100, 1_000, 10_000],
            jl_epsilon: vec![0.5, 0.25],
        }
    }
}

impl HardnessConfig {
    pub fn resolved(self) -> Result<Self> {
        non_empty("hardness.d", &self.d)?;
        non_empty("hardness.epsilon", &self.epsilon)?;
        non_empty("hardness.delta", &self.delta)?;
        for &d in &self.d {
            positive("hardness.d", d)?;
        }
        if self.epsilon.iter().chain(&self.delta).any(|&v| !(v > 0.0 && v.is_finite())) {
            return invalid("hardness.epsilon and hardness.delta entries must be positive");
        }
        if self.cap > i64::MAX as u64 {
            return invalid("hardness.cap does not fit a TOML integer");
        }
        if self.jl_k.iter().any(|&k| k < 2) {
            return invalid("hardness.jl_k entries must be at least 2");
        }
        for &e in &self.jl_epsilon {
            in_open_unit("hardness.jl_epsilon", e)?;
        }
        Ok(self)
    }
}

pub fn run(cfg: &HardnessConfig, ctx: &RunContext) -> Result<()> {
    let mut table = Table::create(&ctx.path("hardness.csv"), &["d", "epsilon", "delta", "count", "status"])?;
    for &d in &cfg.d {
        for &eps in &cfg.epsilon {
            for &delta in &cfg.delta {
                if eps > delta {
                    continue;
                }
                let (count, status) = match hardness_count(d, eps, delta, cfg.cap) {
                    Ok(c) => (c.to_string(), "ok"),
                    Err(HypothesisError::Overflow { .. }) => (String::new(), "above_cap"),
                    Err(e) => return Err(CliError::runtime(e)),
                };
                table.row([d.to_string(), num(eps), num(delta), count, status.to_string()])?;
            }
        }
    }
    table.finish()?;
    let mut table = Table::create(&ctx.path("jl.csv"), &["k", "epsilon", "d"])?;
    for &k in &cfg.jl_k {
        for &eps in &cfg.jl_epsilon {
            table.row([k.to_string(), num(eps), jl_dimension(k, eps).to_string()])?;
        }
    }
    table.finish()
}
