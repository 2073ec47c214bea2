use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use misspec_lab_core::io::write_mdp;
use misspec_lab_core::rl::TabularMDP;
use nalgebra::{DMatrix, DVector};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_misspec-lab"));
    c.env_remove("MISSPEC_LAB_OUT");
    c
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(sub)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn ok(output: &Output) {
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(csv_files(&p));
        } else if p.extension().is_some_and(|e| e == "csv" || e == "txt") {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn assert_same_csvs(a: &Path, b: &Path) {
    let fa = csv_files(a);
    let fb = csv_files(b);
    assert_eq!(fa.len(), fb.len());
    assert!(!fa.is_empty());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(a).unwrap(), y.strip_prefix(b).unwrap());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{} differs", x.display());
    }
}

#[test]
fn identity_design_is_uniform() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[design]\ngenerator = \"identity\"\nd = 6\n");
    ok(&run("design", &cfg, &tmp.path().join("out"), &["--no-plots"]));
    let dir = tmp.path().join("out/design");
    let rows = read_csv(&dir.join("design.csv"));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!((r[1].parse::<f64>().unwrap() - 1.0 / 6.0).abs() < 1e-12);
        assert!((r[2].parse::<f64>().unwrap() - 6.0).abs() < 1e-9);
    }
    let cert = read_csv(&dir.join("certificate.csv"));
    assert!((cert[0][0].parse::<f64>().unwrap() - 6.0).abs() < 1e-9);
    assert!(!dir.join("leverage.svg").exists());
}

#[test]
fn jl_design_meets_target_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 11\n[design]\ngenerator = \"jl\"\nk = 300\nepsilon = 0.5\n");
    ok(&run("design", &cfg, &tmp.path().join("a"), &["--jobs", "1"]));
    ok(&run("design", &cfg, &tmp.path().join("b"), &["--jobs", "4"]));
    let cert = read_csv(&tmp.path().join("a/design/certificate.csv"));
    // d = ceil(8 ln 300 / 0.25) = 183 < k, so the features have full rank.
    assert!(cert[0][0].parse::<f64>().unwrap() <= 2.0 * 183.0);
    assert_same_csvs(&tmp.path().join("a/design"), &tmp.path().join("b/design"));
    assert!(tmp.path().join("a/design/leverage.svg").exists());
}

#[test]
fn design_from_file() {
    let tmp = tempfile::tempdir().unwrap();
    let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    misspec_lab_core::io::write_features_file(&tmp.path().join("phi.csv"), &phi, None).unwrap();
    let cfg = write_config(tmp.path(), "[design]\ngenerator = \"file\"\npath = \"phi.csv\"\n");
    ok(&run("design", &cfg, &tmp.path().join("out"), &["--no-plots"]));
    assert_eq!(read_csv(&tmp.path().join("out/design/design.csv")).len(), 3);
}

#[test]
fn validation_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cases = [
        ("bandit", "[bandit]\nn = []\n"),
        ("bandit", "[bandit]\nalgos = []\n"),
        ("rl", "[rl]\ngamma = 1.0\n"),
        ("rl", "[rl]\ngamma = 0.0\n"),
        ("design", "[design]\nunknown = 1\n"),
        ("query", "[query]\nlambda_q = [8]\n"),
        ("hardness", "[hardness]\nd = []\n"),
    ];
    for (sub, text) in cases {
        let cfg = write_config(tmp.path(), text);
        let res = run(sub, &cfg, &out, &[]);
        assert_eq!(res.status.code(), Some(2), "{sub}: {text}");
        assert!(String::from_utf8_lossy(&res.stderr).contains("invalid configuration"));
    }
    let missing = run("design", &tmp.path().join("nope.toml"), &out, &[]);
    assert_eq!(missing.status.code(), Some(2));
    // Nothing is written for rejected configurations.
    assert!(!out.exists());
}

#[test]
fn runtime_failure_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    // Tabular features are exact, so without an accuracy target the run fails.
    let cfg = write_config(tmp.path(), "[rl]\nfeatures = \"tabular\"\n");
    let res = run("rl", &cfg, &tmp.path().join("out"), &["--no-plots"]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn bandit_sweep_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "seed = 5\n[bandit]\nk = 20\nd = 3\nn = [2000, 4000]\nseeds = 2\nalgos = [\"phased_elimination\", \"linucb\", \"linucb_modified\"]\n",
    );
    ok(&run("bandit", &cfg, &tmp.path().join("a"), &["--jobs", "1"]));
    ok(&run("bandit", &cfg, &tmp.path().join("b"), &["--jobs", "3", "--no-plots"]));
    let dir = tmp.path().join("a/bandit");
    let summary = read_csv(&dir.join("summary.csv"));
    assert_eq!(summary.len(), 2 * 2 * 3);
    let header = csv::Reader::from_path(dir.join("summary.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(header.iter().collect::<Vec<_>>(), ["seed", "n", "k", "d", "epsilon", "algo", "final_regret"]);
    for row in read_csv(&dir.join("envelope.csv")) {
        let ratio: f64 = row[6].parse().unwrap();
        assert!((0.0..10.0).contains(&ratio), "{row:?}");
    }
    let trace = dir.join("traces/realizable_phased_elimination_n2000_eps0_seed1.csv");
    let rows = read_csv(&trace);
    assert_eq!(rows.len(), 2000);
    assert_eq!(rows[0][0], "1");
    assert!(dir.join("regret_vs_n.svg").exists());
    assert_same_csvs(&dir, &tmp.path().join("b/bandit"));
}

#[test]
fn failure_preset_contrasts_algorithms() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[bandit]\ninstance = \"failure\"\nalgos = [\"linucb\", \"linucb_modified\"]\nn = [4000]\nepsilon = [0.2]\nseeds = 1\nnoise = \"zero\"\n",
    );
    ok(&run("bandit", &cfg, &tmp.path().join("out"), &[]));
    let summary = read_csv(&tmp.path().join("out/bandit/summary.csv"));
    assert_eq!(summary.len(), 2);
    assert_eq!((summary[0][2].as_str(), summary[0][3].as_str()), ("2", "2"));
    assert!(tmp.path().join("out/bandit/regret_curves.svg").exists());
}

/// Two actions per state; action 0 pays 1 and action 1 pays 0 with the same
/// uniform transitions, so every optimal action leads by 1.
fn separated_mdp(dir: &Path) {
    let p = DMatrix::from_element(8, 4, 0.25);
    let r = DVector::from_fn(8, |i, _| if i % 2 == 0 { 1.0 } else { 0.0 });
    write_mdp(dir, &TabularMDP::new(2, p, r, 0.7).unwrap()).unwrap();
}

#[test]
fn tabular_rl_recovers_optimal_policy() {
    let tmp = tempfile::tempdir().unwrap();
    separated_mdp(&tmp.path().join("mdp"));
    let cfg = write_config(
        tmp.path(),
        "[rl]\nmdp = \"file\"\npath = \"mdp\"\nfeatures = \"tabular\"\nepsilon = 0.1\ninitial_policy = \"random\"\n",
    );
    ok(&run("rl", &cfg, &tmp.path().join("out"), &[]));
    let dir = tmp.path().join("out/rl");
    for row in read_csv(&dir.join("value_gap.csv")) {
        assert_eq!(row[4].parse::<f64>().unwrap(), 0.0, "{row:?}");
    }
    let result = read_csv(&dir.join("result.csv"));
    // samples == expected_samples == k m n |C|
    let r = &result[0];
    let (k, m, n, core): (u64, u64, u64, u64) = (r[8].parse().unwrap(), r[9].parse().unwrap(), r[10].parse().unwrap(), r[6].parse().unwrap());
    assert_eq!(r[12], r[13]);
    assert_eq!(r[12].parse::<u64>().unwrap(), k * m * n * core);
    assert_eq!(core, 8);
    assert!(!read_csv(&dir.join("iterations.csv")).is_empty());
}

#[test]
fn rl_runs_are_reproducible_from_the_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 2\n[rl]\nstates = 5\nactions = 3\nd = 6\nruns = 3\nm = 200\n");
    ok(&run("rl", &cfg, &tmp.path().join("a"), &["--no-plots"]));
    let echo = tmp.path().join("a/rl/config.resolved.toml");
    ok(&run("rl", &echo, &tmp.path().join("b"), &["--jobs", "2"]));
    let a = tmp.path().join("a/rl");
    let b = tmp.path().join("b/rl");
    for name in ["iterations.csv", "value_gap.csv", "result.csv", "features_1.csv", "mdp_2/transitions.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    for row in read_csv(&a.join("result.csv")) {
        assert_eq!(row[12], row[13]);
    }
}

#[test]
fn query_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "seed = 1\n[query]\nneedle_k = [5]\nneedle_trials = 100000\nlambda_instances = 4\nlambda_q = [2, 3, 4, 5, 6, 7]\nlambda_search = \"exhaustive\"\nestimator_trials = 100\nestimator_k = 60\n",
    );
    ok(&run("query", &cfg, &tmp.path().join("out"), &[]));
    let dir = tmp.path().join("out/query");
    let needle = read_csv(&dir.join("needle.csv"));
    let mean: f64 = needle[0][2].parse().unwrap();
    assert!((mean - 3.0).abs() <= 0.06, "{mean}");

    let lambda = read_csv(&dir.join("lambda.csv"));
    for inst in 0..4 {
        let values: Vec<f64> = lambda.iter().filter(|r| r[0] == inst.to_string()).map(|r| r[2].parse().unwrap()).collect();
        assert_eq!(values.len(), 6);
        assert!(values.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{values:?}");
    }
    for r in &lambda {
        let (err, bound): (f64, f64) = (r[5].parse().unwrap(), r[6].parse().unwrap());
        assert!(err <= bound + 1e-9, "{r:?}");
    }
    let est = read_csv(&dir.join("estimator.csv"));
    assert_eq!(est.len(), 100);
    assert!(est.iter().all(|r| r[4] == "true"));
    assert!(dir.join("estimator_hist.svg").exists());
}

#[test]
fn hardness_tables_and_env_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[hardness]\nd = [10, 100000]\nepsilon = [0.1]\ndelta = [0.1]\njl_k = [100]\njl_epsilon = [0.5]\n");
    let env_root = tmp.path().join("env-root");
    let res = bin().arg("hardness").arg("--config").arg(&cfg).env("MISSPEC_LAB_OUT", &env_root).output().unwrap();
    ok(&res);
    let rows = read_csv(&env_root.join("hardness/hardness.csv"));
    // floor(exp(9 / 8)) = 3
    assert_eq!(rows[0], ["10", "0.1", "0.1", "3", "ok"]);
    assert_eq!(rows[1][4], "above_cap");
    assert_eq!(read_csv(&env_root.join("hardness/jl.csv"))[0], ["100", "0.5", "148"]);
    assert!(env_root.join("hardness/config.resolved.toml").exists());
}

#[test]
fn help_documents_defaults() {
    let out = bin().args(["bandit", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("noise_scale = 1.0"));
    assert!(text.contains("MISSPEC_LAB_OUT"));
}
