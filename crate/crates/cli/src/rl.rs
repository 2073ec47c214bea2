use std::path::PathBuf;

use misspec_lab_core::io::{read_mdp, write_features_file, write_mdp};
use misspec_lab_core::rl::{
    api_core_set, build_q_features, exact_optimal, exact_policy_eval, ApiDiagnostics, ApiOverrides, FeatureMode,
    InitialPolicy, Policy, TabularMDP,
};
use misspec_lab_core::stream_rng;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{in_open_unit, positive};
use crate::output::{num, Table};
use crate::plot::{self, Series};
use crate::{invalid, CliError, Result, RunContext};

pub const HELP: &str = "\
[rl] keys (defaults):
  mdp = \"random\"            random | file
  path                      MDP directory (transitions.csv, rewards.csv, metadata.txt) for mdp = \"file\"
  states = 4, actions = 2   random MDP size
  gamma = 0.9               discount, strictly between 0 and 1
  features = \"projected\"    tabular | projected (d random orthonormal columns)
  d = 4                     projected feature dimension, at most states * actions
  epsilon                   accuracy used in the parameter formulas; default: measured misspecification
  alpha = 0.1               failure probability
  k, m, n                   overrides for iterations, rollouts per pair and rollout length
  initial_policy = \"constant\"   constant (action 0) | random
  runs = 1                  independent runs
Run r takes its root from the first draw of stream r of the seed; from that root
the MDP uses stream 0, the features root + 1 and the rollouts root + 2.
Writes iterations.csv, value_gap.csv, result.csv (including the sample ledger
k m n |C|), mdp_<r>/ and features_<r>.csv per run, and rl_errors.svg.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MdpSource {
    #[default]
    Random,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    Tabular,
    #[default]
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Initial {
    #[default]
    Constant,
    Random,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub mdp: MdpSource,
    pub path: Option<PathBuf>,
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
    pub features: Features,
    pub d: usize,
    pub epsilon: Option<f64>,
    pub alpha: f64,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub initial_policy: Initial,
    pub runs: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            mdp: MdpSource::Random,
            path: None,
            states: 4,
            actions: 2,
            gamma: 0.9,
            features: Features::Projected,
            d: 4,
            epsilon: None,
            alpha: 0.1,
            k: None,
            m: None,
            n: None,
            initial_policy: Initial::Constant,
            runs: 1,
        }
    }
}

impl RlConfig {
    pub fn resolved(mut self, ctx: &RunContext) -> Result<Self> {
        match self.mdp {
            MdpSource::Random => {
                positive("rl.states", self.states)?;
                positive("rl.actions", self.actions)?;
                in_open_unit("rl.gamma", self.gamma)?;
            }
            MdpSource::File => {
                let Some(path) = &self.path else {
                    return invalid("rl.path is required when mdp = \"file\"");
                };
                let path = ctx.resolve(path);
                let mdp = read_mdp(&path).map_err(|e| CliError::Validation(format!("rl.path {}: {e}", path.display())))?;
                (self.states, self.actions, self.gamma) = (mdp.states(), mdp.actions(), mdp.gamma());
                self.path = Some(path.canonicalize()?);
            }
        }
        in_open_unit("rl.alpha", self.alpha)?;
        positive("rl.runs", self.runs)?;
        let sa = self.states * self.actions;
        match self.features {
            Features::Tabular => self.d = sa,
            Features::Projected => {
                if self.d == 0 || self.d > sa {
                    return invalid(format!("rl.d = {} must be between 1 and states * actions = {sa}", self.d));
                }
            }
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return invalid(format!("rl.epsilon = {e} must be positive"));
            }
        }
        for (name, v) in [("rl.k", self.k), ("rl.m", self.m), ("rl.n", self.n)] {
            if let Some(v) = v {
                positive(name, v)?;
            }
        }
        Ok(self)
    }

    fn overrides(&self) -> ApiOverrides {
        ApiOverrides { k: self.k, m: self.m, n: self.n }
    }
}

struct RunOutcome {
    measured: f64,
    exhaustive: bool,
    epsilon: f64,
    diag: ApiDiagnostics,
    v_star: Vec<f64>,
    v_pi: Vec<f64>,
}

fn run_once(cfg: &RlConfig, run: usize, ctx: &RunContext) -> Result<RunOutcome> {
    let root = stream_rng(ctx.seed, run as u64).next_u64();
    let mdp = match cfg.mdp {
        MdpSource::Random => TabularMDP::random(cfg.states, cfg.actions, cfg.gamma, &mut stream_rng(root, 0)).map_err(CliError::runtime)?,
        MdpSource::File => read_mdp(cfg.path.as_ref().expect("resolved")).map_err(CliError::runtime)?,
    };
    if cfg.mdp == MdpSource::Random {
        write_mdp(&ctx.path(&format!("mdp_{run}")), &mdp).map_err(CliError::runtime)?;
    }
    let mode = match cfg.features {
        Features::Tabular => FeatureMode::Tabular,
        Features::Projected => FeatureMode::Projected { d: cfg.d, seed: root.wrapping_add(1) },
    };
    let (phi, measured) = build_q_features(&mdp, mode).map_err(CliError::runtime)?;
    write_features_file(&ctx.path(&format!("features_{run}.csv")), phi.matrix(), None).map_err(CliError::runtime)?;
    let epsilon = match cfg.epsilon {
        Some(e) => e,
        None if measured.value > 0.0 => measured.value,
        None => return Err(CliError::Runtime("measured misspecification is 0; set rl.epsilon to the target accuracy".into())),
    };
    let initial = match cfg.initial_policy {
        Initial::Constant => InitialPolicy::Constant,
        Initial::Random => InitialPolicy::Random,
    };
    let (pi, diag): (Policy, ApiDiagnostics) =
        api_core_set(&mdp, &phi, epsilon, cfg.alpha, root.wrapping_add(2), cfg.overrides(), initial).map_err(CliError::runtime)?;
    let (_, v_star, _) = exact_optimal(&mdp);
    let (v_pi, _) = exact_policy_eval(&mdp, &pi);
    Ok(RunOutcome {
        measured: measured.value,
        exhaustive: measured.exhaustive,
        epsilon,
        diag,
        v_star: v_star.iter().copied().collect(),
        v_pi: v_pi.iter().copied().collect(),
    })
}

pub fn run(cfg: &RlConfig, ctx: &RunContext) -> Result<()> {
    let outcomes: Vec<Result<RunOutcome>> = (0..cfg.runs).into_par_iter().map(|r| run_once(cfg, r, ctx)).collect();

    let mut iterations = Table::create(
        &ctx.path("iterations.csv"),
        &[
            "run",
            "iteration",
            "core_error",
            "misspecification",
            "extrapolation_error",
            "extrapolation_bound",
            "bound_slack",
            "policy_error",
        ],
    )?;
    let mut gaps = Table::create(&ctx.path("value_gap.csv"), &["run", "state", "v_star", "v_policy", "gap"])?;
    let mut result = Table::create(
        &ctx.path("result.csv"),
        &[
            "run",
            "status",
            "epsilon",
            "measured_epsilon",
            "measured_exhaustive",
            "d",
            "core_size",
            "design_g",
            "k",
            "m",
            "n",
            "overridden",
            "samples",
            "expected_samples",
            "value_gap",
            "delta",
            "guarantee",
            "within_guarantee",
            "measured_delta",
            "final_policy_error",
            "convergence_bound",
            "per_event_alpha",
        ],
    )?;
    let mut failures = 0;
    for (r, outcome) in outcomes.iter().enumerate() {
        let o = match outcome {
            Ok(o) => o,
            Err(e) => {
                eprintln!("warning: run {r} failed: {e}");
                failures += 1;
                let mut row = vec![r.to_string(), "failed".to_string()];
                row.resize(22, String::new());
                result.row(row)?;
                continue;
            }
        };
        for it in &o.diag.iterations {
            iterations.row([
                r.to_string(),
                it.iteration.to_string(),
                num(it.core_error),
                num(it.misspecification),
                num(it.extrapolation_error),
                num(it.extrapolation_bound),
                num(it.extrapolation_bound - it.extrapolation_error),
                num(it.policy_error),
            ])?;
        }
        for (s, (vs, vp)) in o.v_star.iter().zip(&o.v_pi).enumerate() {
            gaps.row([r.to_string(), s.to_string(), num(*vs), num(*vp), num(vs - vp)])?;
        }
        let d = &o.diag;
        result.row([
            r.to_string(),
            "ok".to_string(),
            num(o.epsilon),
            num(o.measured),
            o.exhaustive.to_string(),
            cfg.d.to_string(),
            d.core_set.len().to_string(),
            num(d.design_g),
            d.params.k.to_string(),
            d.params.m.to_string(),
            d.params.n.to_string(),
            d.overridden.to_string(),
            d.samples.to_string(),
            d.expected_samples.to_string(),
            num(d.value_gap),
            num(d.delta),
            num(d.guarantee),
            d.within_guarantee().to_string(),
            num(d.measured_delta),
            num(d.final_policy_error),
            num(d.convergence_bound),
            num(d.per_event_alpha),
        ])?;
    }
    iterations.finish()?;
    gaps.finish()?;
    result.finish()?;
    if failures == cfg.runs {
        let first = outcomes.into_iter().find_map(|o| o.err()).expect("all failed");
        return Err(first);
    }

    if ctx.plots {
        if let Some(Ok(o)) = outcomes.first() {
            let pts = |f: fn(&misspec_lab_core::rl::ApiIteration) -> f64| {
                o.diag.iterations.iter().map(|it| (it.iteration as f64, f(it))).collect::<Vec<_>>()
            };
            let series = vec![
                Series { name: "|Q* - Q^pi_i|".into(), points: pts(|it| it.policy_error), dashed: false },
                Series { name: "|Q_i - Q^pi_i|".into(), points: pts(|it| it.extrapolation_error), dashed: false },
                Series { name: "extrapolation bound".into(), points: pts(|it| it.extrapolation_bound), dashed: true },
            ];
            plot::attempt("rl_errors.svg", plot::line_chart(&ctx.path("rl_errors.svg"), "Run 0 errors", "iteration", "max-norm error", &series));
        }
    }
    Ok(())
}
