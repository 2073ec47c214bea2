//! Exit criteria. Each test writes one `PASS`/`FAIL` line to stdout (bypassing
//! the test harness capture) and then asserts.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use misspec_lab_core::bandit::{
    failure_instance, linucb, linucb_modified, lower_bound_features, lower_bound_instance, phased_elimination,
    realizable_instance, NoiseModel,
};
use misspec_lab_core::design::{core_set_bound, default_max_iters, frank_wolfe_design, g_value};
use misspec_lab_core::hypothesis::{embed_unit_vectors, jl_feature_matrix, lambda_q, LambdaSearch, MisspecifiedReward};
use misspec_lab_core::io::{write_features, write_trace};
use misspec_lab_core::query::{design_learner, probe_and_fit, random_probe_learner, QueryEnvironment};
use misspec_lab_core::rl::{
    api_core_set, build_q_features, exact_optimal, exact_policy_eval, greedy_policy, ApiOverrides, FeatureMode,
    InitialPolicy, TabularMDP,
};
use misspec_lab_core::{stream_rng, Design, FeatureMatrix, SimRng};

const ROOT: u64 = 20_240_601;

fn report(id: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{verdict} criterion {id:>2} [{name}] {}", detail.as_ref());
}

fn rng(criterion: u64, stream: u64) -> SimRng {
    stream_rng(ROOT + criterion, stream)
}

fn gaussian(k: usize, d: usize, rng: &mut SimRng) -> DMatrix<f64> {
    DMatrix::from_fn(k, d, |_, _| StandardNormal.sample(rng))
}

#[test]
fn criterion_01_design_quality() {
    let start = Instant::now();
    let (d, k) = (10, 500);
    let support_cap = 49;
    assert_eq!(core_set_bound(d), support_cap);
    let random: Vec<(f64, usize)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let phi = FeatureMatrix::new(gaussian(k, d, &mut rng(1, i))).unwrap();
            match frank_wolfe_design(&phi, 2.0 * d as f64, support_cap, default_max_iters(d)) {
                Ok((rho, cert)) => (cert.g_value, rho.support_size()),
                Err(_) => (f64::INFINITY, usize::MAX),
            }
        })
        .collect();
    let random_ok = random.iter().all(|&(g, s)| g <= 2.0 * d as f64 && s <= support_cap);
    let worst_g = random.iter().map(|r| r.0).fold(0.0, f64::max);
    let worst_support = random.iter().map(|r| r.1).max().unwrap();

    let mut identity_ok = true;
    for d in 1..=20 {
        let phi = FeatureMatrix::identity(d).unwrap();
        let (rho, cert) = frank_wolfe_design(&phi, 2.0 * d as f64, core_set_bound(d), default_max_iters(d)).unwrap();
        let uniform = rho.support_size() == d && (0..d).all(|i| (rho.weight(i) - 1.0 / d as f64).abs() <= 1e-8);
        identity_ok &= uniform && (cert.g_value - d as f64).abs() <= 1e-8;
    }
    let elapsed = start.elapsed();
    let pass = random_ok && identity_ok && elapsed < Duration::from_secs(10);
    report(
        1,
        "design quality",
        pass,
        format!("max g = {worst_g:.4} (<= 20), max support = {worst_support} (<= 49), identity uniform = {identity_ok}, {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_estimator_bound() {
    let start = Instant::now();
    let results: Vec<(f64, f64)> = (0..1_000u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng(2, i);
            let d = r.random_range(1..=10);
            let k = r.random_range(d.max(2)..=300);
            let phi = FeatureMatrix::new(gaussian(k, d, &mut r)).unwrap();
            let eps = r.random_range(0.01..1.0);
            let reward = MisspecifiedReward::random(phi.matrix(), eps, true, &mut r).unwrap();
            let (rho, _) = misspec_lab_core::design::near_optimal_design(&phi).unwrap();
            let mut env = QueryEnvironment::new(reward.mu().clone());
            let out = design_learner(&phi, &rho, &mut env).unwrap();
            (out.error(reward.mu()), eps * (1.0 + (2.0 * d as f64).sqrt()))
        })
        .collect();
    let violations = results.iter().filter(|(err, bound)| *err > bound + 1e-9).count();
    let worst = results.iter().map(|(e, b)| e / b).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = violations == 0 && elapsed < Duration::from_secs(30);
    report(2, "estimator bound", pass, format!("violations = {violations}/1000, max error/bound = {worst:.4}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_03_hard_instance() {
    let start = Instant::now();
    let inst = jl_feature_matrix(100, 0.5, &mut rng(3, 0)).unwrap();
    let rewards = embed_unit_vectors(&inst).unwrap();
    let max_ip = inst.max_inner_product();
    let embed_ok = rewards.len() == 100
        && rewards.iter().enumerate().all(|(i, r)| {
            r.delta().amax() <= 0.5 && (0..100).all(|j| r.mu()[j] == if i == j { 1.0 } else { 0.0 })
        });
    let elapsed = start.elapsed();
    let pass = inst.d() == 148 && max_ip <= 0.5 && embed_ok && elapsed < Duration::from_secs(10);
    report(3, "hard instance", pass, format!("d = {}, max |a^T b| = {max_ip:.4}, embeddings certified = {embed_ok}, {elapsed:.2?}", inst.d()));
    assert!(pass);
}

#[test]
fn criterion_04_needle_mean_queries() {
    let mut pass = true;
    let mut detail = Vec::new();
    for k in [5usize, 11] {
        let mut r = rng(4, k as u64);
        let trials = 100_000;
        let mut total = 0usize;
        for _ in 0..trials {
            let mut mu = DVector::zeros(k);
            mu[r.random_range(0..k)] = 1.0;
            let mut env = QueryEnvironment::new(mu);
            total += random_probe_learner(&mut env, &mut r).unwrap().queries_used;
        }
        let mean = total as f64 / trials as f64;
        let target = (k as f64 + 1.0) / 2.0;
        pass &= (mean - target).abs() <= 0.02 * target;
        detail.push(format!("k = {k}: mean {mean:.4} vs {target}"));
    }
    report(4, "needle mean queries", pass, detail.join(", "));
    assert!(pass);
}

#[test]
fn criterion_05_regret_scaling() {
    let start = Instant::now();
    let (k, d, seeds) = (100, 5, 50u64);
    let horizons = [25_000usize, 50_000, 100_000, 200_000];
    let runs: Vec<Vec<f64>> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let inst = realizable_instance(k, d, 0.1, NoiseModel::default(), &mut rng(5, s)).unwrap();
            horizons
                .iter()
                .enumerate()
                .map(|(h, &n)| {
                    let mut r = stream_rng(ROOT + 5, 1_000 + s * 10 + h as u64);
                    phased_elimination(&inst, n, 1.0 / (k as f64 * n as f64), &mut r).unwrap().final_regret()
                })
                .collect()
        })
        .collect();
    let mean: Vec<f64> = (0..horizons.len()).map(|h| runs.iter().map(|r| r[h]).sum::<f64>() / seeds as f64).collect();
    let normalized: Vec<f64> = horizons
        .iter()
        .zip(&mean)
        .map(|(&n, &r)| r / (d as f64 * n as f64 * (n as f64 * k as f64).ln()).sqrt())
        .collect();
    let spread = normalized.iter().cloned().fold(0.0, f64::max) / normalized.iter().cloned().fold(f64::INFINITY, f64::min);
    let growth: Vec<f64> = mean.windows(2).map(|w| w[1] / w[0]).collect();
    let elapsed = start.elapsed();
    let pass = spread <= 2.0 && growth.iter().all(|&g| g <= 1.6) && elapsed < Duration::from_secs(600);
    report(
        5,
        "regret scaling",
        pass,
        format!("mean R_n = {mean:.1?}, normalized = {normalized:.4?}, max/min = {spread:.3}, R_2n/R_n = {growth:.3?}, {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_linucb_failure_and_fix() {
    let (eps, n) = (0.2, 100_000);
    let seq = failure_instance(eps, n).unwrap();
    let (plain, _) = linucb(&seq, n, NoiseModel::Zero, &mut rng(6, 0)).unwrap();
    let (fixed, _) = linucb_modified(&seq, n, eps, NoiseModel::Zero, &mut rng(6, 0)).unwrap();
    let plain_ok = plain.final_regret() >= n as f64 / 2.0;
    let fixed_ok = fixed.final_regret() <= n as f64 / 10.0;
    let pass = plain_ok && fixed_ok;
    report(
        6,
        "linucb failure vs fix",
        pass,
        format!(
            "plain regret = {:.1} (need >= {}), modified regret = {:.1} (need <= {})",
            plain.final_regret(),
            n / 2,
            fixed.final_regret(),
            n / 10
        ),
    );
    assert!(plain_ok, "unmodified LinUCB regret {} < n/2", plain.final_regret());
    assert!(fixed_ok);
}

#[test]
fn criterion_07_lower_bound_instance() {
    let start = Instant::now();
    let (k, d, eps, n) = (200, 50, 0.5, 5_000);
    let scale = ((d as f64 - 1.0) / (8.0 * (k as f64).ln())).sqrt();
    let bound = 0.25 * eps * (n as f64).min((k as f64 - 1.0) / 2.0) * scale;
    let regrets: Vec<Option<f64>> = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let mut r = rng(7, s);
            let rows = lower_bound_features(k, d, &mut r).ok()?;
            let star = r.random_range(0..k);
            let inst = lower_bound_instance(&rows, star, eps, NoiseModel::default()).ok()?;
            Some(phased_elimination(&inst, n, 1.0 / (k as f64 * n as f64), &mut r).ok()?.final_regret())
        })
        .collect();
    let certified = regrets.iter().all(Option::is_some);
    let mean = regrets.iter().flatten().sum::<f64>() / regrets.len() as f64;
    let elapsed = start.elapsed();
    let pass = certified && mean >= bound && elapsed < Duration::from_secs(300);
    report(7, "lower-bound instance", pass, format!("certified = {certified}, mean regret = {mean:.2} (>= {bound:.2}), {elapsed:.2?}"));
    assert!(pass);
}

/// Random MDP whose optimal `Q` separates the best action in every state by
/// at least `gap`.
fn separated_mdp(states: usize, actions: usize, gamma: f64, gap: f64, r: &mut SimRng) -> TabularMDP {
    loop {
        let mdp = TabularMDP::random(states, actions, gamma, r).unwrap();
        let (pi, _, q) = exact_optimal(&mdp);
        let mut min_gap = f64::INFINITY;
        for s in 0..states {
            let best = q[mdp.index(s, pi.action(s))];
            for a in (0..actions).filter(|&a| a != pi.action(s)) {
                min_gap = min_gap.min(best - q[mdp.index(s, a)]);
            }
        }
        if min_gap >= gap {
            return mdp;
        }
    }
}

#[test]
fn criterion_08_rl_guarantee() {
    let start = Instant::now();
    let alpha = 0.1;
    let projected: Vec<_> = (0..10u64)
        .map(|i| {
            let mdp = TabularMDP::random(20, 4, 0.9, &mut rng(8, i)).unwrap();
            let (phi, eps) = build_q_features(&mdp, FeatureMode::Projected { d: 12, seed: ROOT + i }).unwrap();
            let (_, diag) =
                api_core_set(&mdp, &phi, eps.value, alpha, ROOT + i, ApiOverrides::default(), InitialPolicy::Constant).unwrap();
            (eps.value, diag)
        })
        .collect();
    let within = projected.iter().filter(|(_, d)| d.within_guarantee()).count();
    let ledgers = projected.iter().all(|(_, d)| d.ledger_ok());
    let eps_range = projected.iter().map(|p| p.0).fold((f64::INFINITY, 0.0f64), |(lo, hi), e| (lo.min(e), hi.max(e)));
    let worst_gap = projected.iter().map(|(_, d)| d.value_gap).fold(0.0, f64::max);
    let smallest_bound = projected.iter().map(|(_, d)| d.guarantee).fold(f64::INFINITY, f64::min);

    let mut optimal = 0;
    let tabular_runs = 10u64;
    for i in 0..tabular_runs {
        let mdp = separated_mdp(4, 2, 0.7, 0.2, &mut rng(8, 100 + i));
        let (phi, _) = build_q_features(&mdp, FeatureMode::Tabular).unwrap();
        let (pi, diag) =
            api_core_set(&mdp, &phi, 0.05, alpha, ROOT + 100 + i, ApiOverrides::default(), InitialPolicy::Constant).unwrap();
        let (star, _, _) = exact_optimal(&mdp);
        if pi == star && diag.value_gap == 0.0 && diag.ledger_ok() {
            optimal += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = within >= 9 && ledgers && optimal == tabular_runs && elapsed < Duration::from_secs(900);
    report(
        8,
        "rl guarantee",
        pass,
        format!(
            "projected within bound {within}/10 (measured eps in [{:.3}, {:.3}], max gap {worst_gap:.4}, smallest bound {smallest_bound:.1}), tabular optimal {optimal}/{tabular_runs}, ledgers ok = {ledgers}, {elapsed:.2?}",
            eps_range.0, eps_range.1
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_lambda_sandwich() {
    let (k, d, eps) = (8, 2, 0.1);
    let mut violations = 0;
    let mut non_monotone = 0;
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let mut r = rng(9, i);
        let phi = FeatureMatrix::new(gaussian(k, d, &mut r)).unwrap();
        let lambdas: Vec<f64> =
            (2..k).map(|q| lambda_q(&phi, q, LambdaSearch::Exhaustive).unwrap().value).collect();
        if lambdas.windows(2).any(|w| w[1] > w[0] + 1e-9) {
            non_monotone += 1;
        }
        let reward = MisspecifiedReward::random(phi.matrix(), eps, i % 2 == 0, &mut r).unwrap();
        for q in [2usize, 3] {
            let mut env = QueryEnvironment::new(reward.mu().clone());
            let (out, _) = probe_and_fit(&phi, q, eps, &mut env).unwrap();
            let bound = eps * (1.0 + 2.0 * lambdas[q - 2]);
            let err = out.error(reward.mu());
            worst = worst.max(err / bound);
            if err > bound + 1e-9 {
                violations += 1;
            }
        }
    }
    let pass = violations == 0 && non_monotone == 0;
    report(
        9,
        "lambda sandwich",
        pass,
        format!("bound violations = {violations}/40, max error/bound = {worst:.4}, non-monotone instances = {non_monotone}/20"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_property_suites() {
    // Kiefer-Wolfowitz floor.
    let kw_failures = (0..1_000u64)
        .into_par_iter()
        .filter(|&i| {
            let mut r = rng(10, i);
            let d = r.random_range(1..=8);
            let k = r.random_range(d..=60);
            let phi = FeatureMatrix::new(gaussian(k, d, &mut r)).unwrap();
            let mut rows: Vec<usize> = (0..k).collect();
            rows.shuffle(&mut r);
            rows.truncate(r.random_range(d..=k));
            let weights: Vec<f64> = rows.iter().map(|_| r.random_range(0.05..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let rho = Design::new(rows.into_iter().zip(weights.into_iter().map(|w| w / total))).unwrap();
            g_value(&phi, &rho).unwrap() < d as f64 - 1e-8
        })
        .count();

    // Greedy value loss.
    let greedy_failures = (0..1_000u64)
        .into_par_iter()
        .filter(|&i| {
            let mut r = rng(10, 10_000 + i);
            let (states, actions) = (r.random_range(2..=8), r.random_range(2..=4));
            let gamma = r.random_range(0.5..0.99);
            let mdp = TabularMDP::random(states, actions, gamma, &mut r).unwrap();
            let (_, v_star, q_star) = exact_optimal(&mdp);
            let scale = r.random_range(0.0..3.0);
            let q = DVector::from_fn(mdp.pairs(), |j, _| q_star[j] + scale * (2.0 * r.random::<f64>() - 1.0));
            let (v_pi, _) = exact_policy_eval(&mdp, &greedy_policy(&mdp, &q));
            let bound = 2.0 / (1.0 - gamma) * (&q - &q_star).amax();
            (0..states).any(|s| v_pi[s] < v_star[s] - bound - 1e-9)
        })
        .count();

    // Sample ledger on every run.
    let ledger_failures = (0..20u64)
        .into_par_iter()
        .filter(|&i| {
            let mut r = rng(10, 20_000 + i);
            let mdp = TabularMDP::random(r.random_range(2..=6), r.random_range(1..=3), 0.8, &mut r).unwrap();
            let mode = if i % 2 == 0 { FeatureMode::Tabular } else { FeatureMode::Projected { d: mdp.pairs().min(3), seed: i } };
            let (phi, _) = build_q_features(&mdp, mode).unwrap();
            let over = ApiOverrides { k: Some(r.random_range(1..=4)), m: Some(r.random_range(1..=40)), n: Some(r.random_range(1..=20)) };
            let (_, diag) = api_core_set(&mdp, &phi, 0.3, 0.1, i, over, InitialPolicy::Random).unwrap();
            let expected = (diag.params.k * diag.params.m * diag.params.n * diag.core_set.len()) as u64;
            !(diag.ledger_ok() && diag.samples == expected)
        })
        .count();

    // Byte-identical reruns.
    let run_bytes = || {
        let mut bytes = Vec::new();
        let inst = realizable_instance(30, 4, 0.0, NoiseModel::default(), &mut rng(10, 30_000)).unwrap();
        let trace = phased_elimination(&inst, 5_000, 1e-3, &mut rng(10, 30_001)).unwrap();
        write_trace(&mut bytes, &trace).unwrap();
        let jl = jl_feature_matrix(20, 0.5, &mut rng(10, 30_002)).unwrap();
        write_features(&mut bytes, jl.rows(), None).unwrap();
        let mdp = TabularMDP::random(5, 2, 0.9, &mut rng(10, 30_003)).unwrap();
        let (phi, _) = build_q_features(&mdp, FeatureMode::Projected { d: 4, seed: 7 }).unwrap();
        let over = ApiOverrides { k: Some(3), m: Some(30), n: Some(10) };
        let (pi, diag) = api_core_set(&mdp, &phi, 0.2, 0.1, 5, over, InitialPolicy::Random).unwrap();
        bytes.extend(format!("{pi:?}{diag:?}").into_bytes());
        bytes
    };
    let deterministic = run_bytes() == run_bytes();

    let pass = kw_failures == 0 && greedy_failures == 0 && ledger_failures == 0 && deterministic;
    report(
        10,
        "property suites",
        pass,
        format!(
            "kw floor failures = {kw_failures}/1000, greedy loss failures = {greedy_failures}/1000, ledger mismatches = {ledger_failures}/20, byte-identical reruns = {deterministic}"
        ),
    );
    assert!(pass);
}
