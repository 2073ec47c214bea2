use std::collections::BTreeMap;

use misspec_lab_core::bandit::{
    failure_instance, linucb, linucb_modified, lower_bound_features, lower_bound_instance, phased_elimination,
    phased_elimination_known_eps, random_contexts, realizable_instance, BanditInstance, BanditTrace, ContextSequence,
    ContextSet, NoiseModel,
};
use misspec_lab_core::hypothesis::MisspecifiedReward;
use misspec_lab_core::io::{write_summary, write_trace, SummaryRow};
use misspec_lab_core::{stream_rng, SimRng};
use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{non_empty, non_negative, positive};
use crate::output::{num, Table};
use crate::plot::{self, Series};
use crate::{invalid, CliError, Result, RunContext};

pub const HELP: &str = "\
[bandit] keys (defaults):
  instance = \"realizable\"   realizable | misspecified | lower_bound | failure | contextual
  algos = [\"phased_elimination\", \"linucb\"]
                            phased_elimination | phased_elimination_known_eps | linucb | linucb_modified
  n = [10000, 20000, 40000] horizons
  epsilon = [0.0]           misspecification levels
  seeds = 5                 seeds per (n, epsilon)
  k = 100, d = 5            actions and dimension
  min_gap = 0.1             best-vs-second gap of realizable and misspecified instances
  alpha                     confidence level of phased elimination; default 1/(k n)
  noise = \"gaussian\"        gaussian | uniform | zero
  noise_scale = 1.0         standard deviation (gaussian) or half-width (uniform)
  pool_size = 100           contexts in the pool (contextual)
  context_size = 10         actions per context (contextual)
Instances: realizable has unit rows and reward range 1; misspecified adds
Delta uniform in [-epsilon, epsilon] to it; lower_bound hides one needle among
near-orthogonal rows; failure is the two-phase LinUCB counterexample (k = d = 2,
even n, epsilon > 0); contextual draws random contexts in the unit ball.
Streams: the instance for (epsilon index e, seed s) uses stream e * 2^32 + s of
the seed; cell number c of the grid (n, epsilon, seed, algo order) runs on
stream c of seed + 1. Logs are natural.
Writes traces/*.csv, summary.csv (seed, n, k, d, epsilon, algo, final_regret),
envelope.csv, regret_vs_n.svg and regret_curves.svg. Failed cells are reported
on stderr and appear in summary.csv with final_regret = NaN.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    #[default]
    Realizable,
    Misspecified,
    LowerBound,
    Failure,
    Contextual,
}

impl InstanceKind {
    fn name(self) -> &'static str {
        match self {
            InstanceKind::Realizable => "realizable",
            InstanceKind::Misspecified => "misspecified",
            InstanceKind::LowerBound => "lower_bound",
            InstanceKind::Failure => "failure",
            InstanceKind::Contextual => "contextual",
        }
    }

    fn contextual(self) -> bool {
        matches!(self, InstanceKind::Failure | InstanceKind::Contextual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    PhasedElimination,
    PhasedEliminationKnownEps,
    Linucb,
    LinucbModified,
}

impl Algo {
    fn name(self) -> &'static str {
        match self {
            Algo::PhasedElimination => "phased_elimination",
            Algo::PhasedEliminationKnownEps => "phased_elimination_known_eps",
            Algo::Linucb => "linucb",
            Algo::LinucbModified => "linucb_modified",
        }
    }

    fn elimination(self) -> bool {
        matches!(self, Algo::PhasedElimination | Algo::PhasedEliminationKnownEps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    Uniform,
    Zero,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct BanditConfig {
    pub instance: InstanceKind,
    pub algos: Vec<Algo>,
    pub n: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub seeds: usize,
    pub k: usize,
    pub d: usize,
    pub min_gap: f64,
    pub alpha: Option<f64>,
    pub noise: NoiseKind,
    pub noise_scale: f64,
    pub pool_size: usize,
    pub context_size: usize,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            instance: InstanceKind::Realizable,
            algos: vec![Algo::PhasedElimination, Algo::Linucb],
            n: vec![10_000, 20_000, 40_000],
            epsilon: vec![0.0],
            seeds: 5,
            k: 100,
            d: 5,
            min_gap: 0.1,
            alpha: None,
            noise: NoiseKind::Gaussian,
            noise_scale: 1.0,
            pool_size: 100,
            context_size: 10,
        }
    }
}

impl BanditConfig {
    pub fn resolved(mut self) -> Result<Self> {
        non_empty("bandit.n", &self.n)?;
        non_empty("bandit.epsilon", &self.epsilon)?;
        non_empty("bandit.algos", &self.algos)?;
        positive("bandit.seeds", self.seeds)?;
        for &n in &self.n {
            positive("bandit.n", n)?;
        }
        for &e in &self.epsilon {
            non_negative("bandit.epsilon", e)?;
        }
        non_negative("bandit.noise_scale", self.noise_scale)?;
        non_negative("bandit.min_gap", self.min_gap)?;
        if let Some(a) = self.alpha {
            crate::config::in_open_unit("bandit.alpha", a)?;
        }
        if self.seeds > u32::MAX as usize || self.epsilon.len() > u32::MAX as usize {
            return invalid("bandit.seeds is too large");
        }
        let kind = self.instance;
        if kind.contextual() {
            if let Some(a) = self.algos.iter().find(|a| a.elimination()) {
                return invalid(format!("{} needs a fixed action set; instance = \"{}\" only supports linucb algos", a.name(), kind.name()));
            }
        }
        match kind {
            InstanceKind::Realizable => {
                if self.epsilon.iter().any(|&e| e != 0.0) {
                    return invalid("instance = \"realizable\" requires epsilon = [0.0]; use \"misspecified\" for epsilon > 0");
                }
                self.check_actions()?;
            }
            InstanceKind::Misspecified => self.check_actions()?,
            InstanceKind::LowerBound => {
                if self.k < 2 || self.d < 2 {
                    return invalid("instance = \"lower_bound\" needs k >= 2 and d >= 2");
                }
                if self.epsilon.iter().any(|&e| e <= 0.0) {
                    return invalid("instance = \"lower_bound\" needs every epsilon > 0");
                }
            }
            InstanceKind::Failure => {
                if self.epsilon.iter().any(|&e| e <= 0.0) {
                    return invalid("instance = \"failure\" needs every epsilon > 0");
                }
                if self.n.iter().any(|n| n % 2 != 0) {
                    return invalid("instance = \"failure\" needs even horizons");
                }
                (self.k, self.d) = (2, 2);
            }
            InstanceKind::Contextual => {
                positive("bandit.pool_size", self.pool_size)?;
                positive("bandit.context_size", self.context_size)?;
                positive("bandit.d", self.d)?;
                self.k = self.context_size;
            }
        }
        Ok(self)
    }

    fn check_actions(&self) -> Result<()> {
        if self.d == 0 || self.k < self.d.max(2) {
            return invalid(format!("need k >= max(d, 2) and d >= 1, got k = {}, d = {}", self.k, self.d));
        }
        if self.min_gap >= 1.0 {
            return invalid(format!("bandit.min_gap = {} cannot be met with reward range 1", self.min_gap));
        }
        Ok(())
    }

    fn noise(&self) -> NoiseModel {
        match self.noise {
            NoiseKind::Gaussian => NoiseModel::Gaussian { sigma: self.noise_scale },
            NoiseKind::Uniform => NoiseModel::Uniform { half_width: self.noise_scale },
            NoiseKind::Zero => NoiseModel::Zero,
        }
    }
}

/// Either a fixed action set or a context sequence.
enum Environment {
    Fixed(BanditInstance),
    Contextual(ContextSequence),
}

fn build_environment(cfg: &BanditConfig, n: usize, eps: f64, rng: &mut SimRng) -> Result<Environment> {
    let noise = cfg.noise();
    let env = match cfg.instance {
        InstanceKind::Realizable => Environment::Fixed(realizable_instance(cfg.k, cfg.d, cfg.min_gap, noise, rng).map_err(CliError::runtime)?),
        InstanceKind::Misspecified => {
            let base = realizable_instance(cfg.k, cfg.d, cfg.min_gap, noise, rng).map_err(CliError::runtime)?;
            let delta = DVector::from_fn(cfg.k, |_, _| eps * (2.0 * rng.random::<f64>() - 1.0));
            let reward = MisspecifiedReward::new(base.phi().matrix(), base.reward().theta().clone(), delta, eps).map_err(CliError::runtime)?;
            Environment::Fixed(BanditInstance::new(base.phi().clone(), reward, noise).map_err(CliError::runtime)?)
        }
        InstanceKind::LowerBound => {
            let rows = lower_bound_features(cfg.k, cfg.d, rng).map_err(CliError::runtime)?;
            let star = rng.random_range(0..cfg.k);
            Environment::Fixed(lower_bound_instance(&rows, star, eps, noise).map_err(CliError::runtime)?)
        }
        InstanceKind::Failure => Environment::Contextual(failure_instance(eps, n).map_err(CliError::runtime)?),
        InstanceKind::Contextual => Environment::Contextual(
            random_contexts(cfg.pool_size, cfg.context_size, cfg.d, n, eps, rng).map_err(CliError::runtime)?,
        ),
    };
    Ok(env)
}

fn as_contexts(inst: &BanditInstance, n: usize) -> Result<ContextSequence> {
    let pool = vec![ContextSet { phi: inst.phi().matrix().clone(), delta: inst.reward().delta().clone() }];
    ContextSequence::new(pool, vec![0; n], inst.reward().theta().clone()).map_err(CliError::runtime)
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    index: usize,
    n: usize,
    eps_index: usize,
    eps: f64,
    seed: usize,
    algo: Algo,
}

fn run_cell(cfg: &BanditConfig, cell: &Cell, root: u64) -> Result<BanditTrace> {
    let mut inst_rng = stream_rng(root, ((cell.eps_index as u64) << 32) | cell.seed as u64);
    let env = build_environment(cfg, cell.n, cell.eps, &mut inst_rng)?;
    let mut rng = stream_rng(root.wrapping_add(1), cell.index as u64);
    let noise = cfg.noise();
    let alpha = cfg.alpha.unwrap_or(1.0 / (cfg.k as f64 * cell.n as f64));
    let trace = match (&env, cell.algo) {
        (Environment::Fixed(inst), Algo::PhasedElimination) => phased_elimination(inst, cell.n, alpha, &mut rng),
        (Environment::Fixed(inst), Algo::PhasedEliminationKnownEps) => {
            phased_elimination_known_eps(inst, cell.n, alpha, cell.eps, &mut rng)
        }
        (Environment::Fixed(inst), Algo::Linucb) => linucb(&as_contexts(inst, cell.n)?, cell.n, noise, &mut rng).map(|r| r.0),
        (Environment::Fixed(inst), Algo::LinucbModified) => {
            linucb_modified(&as_contexts(inst, cell.n)?, cell.n, cell.eps, noise, &mut rng).map(|r| r.0)
        }
        (Environment::Contextual(seq), Algo::Linucb) => linucb(seq, cell.n, noise, &mut rng).map(|r| r.0),
        (Environment::Contextual(seq), Algo::LinucbModified) => {
            linucb_modified(seq, cell.n, cell.eps, noise, &mut rng).map(|r| r.0)
        }
        (Environment::Contextual(_), algo) => return invalid(format!("{} needs a fixed action set", algo.name())),
    };
    trace.map_err(CliError::runtime)
}

/// `sqrt(d n ln(n k)) + epsilon n sqrt(d) ln(n)`.
pub fn envelope(n: usize, k: usize, d: usize, eps: f64) -> f64 {
    let (n, k, d) = (n as f64, k as f64, d as f64);
    (d * n * (n * k).ln()).sqrt() + eps * n * d.sqrt() * n.ln()
}

pub fn run(cfg: &BanditConfig, ctx: &RunContext) -> Result<()> {
    let mut cells = Vec::new();
    for &n in &cfg.n {
        for (eps_index, &eps) in cfg.epsilon.iter().enumerate() {
            for seed in 0..cfg.seeds {
                for &algo in &cfg.algos {
                    cells.push(Cell { index: cells.len(), n, eps_index, eps, seed, algo });
                }
            }
        }
    }
    let traces_dir = ctx.path("traces");
    std::fs::create_dir_all(&traces_dir)?;
    let curve_n = *cfg.n.iter().max().expect("non-empty");

    let results: Vec<(f64, Option<Vec<f64>>)> = cells
        .par_iter()
        .map(|cell| {
            let name = format!("{}_{}_n{}_eps{}_seed{}.csv", cfg.instance.name(), cell.algo.name(), cell.n, cell.eps, cell.seed);
            let outcome = run_cell(cfg, cell, ctx.seed).and_then(|trace| {
                let file = std::fs::File::create(traces_dir.join(&name))?;
                write_trace(std::io::BufWriter::new(file), &trace).map_err(CliError::runtime)?;
                Ok(trace)
            });
            match outcome {
                Ok(trace) => {
                    let curve = (cell.n == curve_n && cell.seed == 0 && cell.eps_index == 0).then(|| trace.cumulative_regret.clone());
                    (trace.final_regret(), curve)
                }
                Err(e) => {
                    eprintln!("warning: cell {name} failed: {e}");
                    (f64::NAN, None)
                }
            }
        })
        .collect();

    let rows: Vec<SummaryRow> = cells
        .iter()
        .zip(&results)
        .map(|(c, &(regret, _))| SummaryRow {
            seed: c.seed as u64,
            n: c.n,
            k: cfg.k,
            d: cfg.d,
            epsilon: c.eps,
            algo: c.algo.name().to_string(),
            final_regret: regret,
        })
        .collect();
    let summary = std::fs::File::create(ctx.path("summary.csv"))?;
    write_summary(summary, &rows).map_err(CliError::runtime)?;

    // Mean regret per (algo, epsilon, n) over successful cells.
    let mut groups: BTreeMap<(Algo, usize, usize), (f64, usize)> = BTreeMap::new();
    for (c, &(regret, _)) in cells.iter().zip(&results) {
        let entry = groups.entry((c.algo, c.eps_index, c.n)).or_insert((0.0, 0));
        if regret.is_finite() {
            entry.0 += regret;
            entry.1 += 1;
        }
    }
    let mut table = Table::create(
        &ctx.path("envelope.csv"),
        &["algo", "epsilon", "n", "cells", "mean_regret", "envelope", "envelope_ratio"],
    )?;
    for (&(algo, e, n), &(total, count)) in &groups {
        let mean = if count > 0 { total / count as f64 } else { f64::NAN };
        let env = envelope(n, cfg.k, cfg.d, cfg.epsilon[e]);
        table.row([
            algo.name().to_string(),
            num(cfg.epsilon[e]),
            n.to_string(),
            count.to_string(),
            num(mean),
            num(env),
            num(mean / env),
        ])?;
    }
    table.finish()?;

    let failed = results.iter().filter(|r| r.0.is_nan()).count();
    if failed == cells.len() {
        return Err(CliError::Runtime(format!("all {failed} cells failed")));
    }

    if ctx.plots {
        let mut series = Vec::new();
        for (e, &eps) in cfg.epsilon.iter().enumerate() {
            for &algo in &cfg.algos {
                let points = groups
                    .iter()
                    .filter(|(&(a, ei, _), _)| a == algo && ei == e)
                    .map(|(&(_, _, n), &(total, count))| (n as f64, total / count.max(1) as f64))
                    .collect();
                series.push(Series { name: format!("{} eps={eps}", algo.name()), points, dashed: false });
            }
            let mut ns = cfg.n.clone();
            ns.sort_unstable();
            let points = ns.iter().map(|&n| (n as f64, envelope(n, cfg.k, cfg.d, eps))).collect();
            series.push(Series { name: format!("envelope eps={eps}"), points, dashed: true });
        }
        plot::attempt("regret_vs_n.svg", plot::line_chart(&ctx.path("regret_vs_n.svg"), "Mean regret", "n", "regret", &series));

        let curves: Vec<Series> = cells
            .iter()
            .zip(&results)
            .filter_map(|(c, (_, curve))| {
                let curve = curve.as_ref()?;
                let stride = (curve.len() / 2_000).max(1);
                let points = curve.iter().enumerate().step_by(stride).map(|(t, &r)| ((t + 1) as f64, r)).collect();
                Some(Series { name: c.algo.name().to_string(), points, dashed: false })
            })
            .collect();
        let title = format!("Cumulative regret, n = {curve_n}, eps = {}", cfg.epsilon[0]);
        plot::attempt("regret_curves.svg", plot::line_chart(&ctx.path("regret_curves.svg"), &title, "round", "regret", &curves));
    }
    Ok(())
}
