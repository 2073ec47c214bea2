//! CSV layouts for feature matrices, MDPs, bandit traces and sweep summaries.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file
//! read back gives bit-identical values and reruns give identical bytes.
//!
//! Feature files start with a `d=<d> k=<k>` line followed by `k` rows of `d`
//! features and an optional trailing `mu` column. An MDP directory holds
//! `transitions.csv` (`s,a,s_next,prob`, nonzero entries only), `rewards.csv`
//! (`s,a,r`) and `metadata.txt` (`gamma=<g> states=<S> actions=<A>`).

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::bandit::BanditTrace;
use crate::rl::{RlError, TabularMDP};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("{0}")]
    Mdp(#[from] RlError),
}

fn format_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Format { line, message: message.into() }
}

fn parse_f64(field: &str, line: usize) -> Result<f64, IoError> {
    field.trim().parse().map_err(|_| format_err(line, format!("not a number: {field:?}")))
}

fn parse_usize(field: &str, line: usize) -> Result<usize, IoError> {
    field.trim().parse().map_err(|_| format_err(line, format!("not an index: {field:?}")))
}

/// Parses `key=value` pairs separated by whitespace.
fn parse_header(text: &str, keys: &[&str], line: usize) -> Result<Vec<String>, IoError> {
    let pairs: Vec<(&str, &str)> = text.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
    keys.iter()
        .map(|k| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.to_string())
                .ok_or_else(|| format_err(line, format!("missing `{k}=` in {text:?}")))
        })
        .collect()
}

pub fn write_features<W: Write>(out: W, phi: &DMatrix<f64>, mu: Option<&DVector<f64>>) -> Result<(), IoError> {
    let (k, d) = phi.shape();
    if let Some(mu) = mu {
        if mu.len() != k {
            return Err(format_err(0, format!("mu has {} entries for {k} rows", mu.len())));
        }
    }
    let mut out = out;
    writeln!(out, "d={d} k={k}")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..k {
        let mut record: Vec<String> = phi.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(mu) = mu {
            record.push(mu[i].to_string());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features<R: Read>(input: R) -> Result<(DMatrix<f64>, Option<DVector<f64>>), IoError> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let dims = parse_header(&first, &["d", "k"], 1)?;
    let d = parse_usize(&dims[0], 1)?;
    let k = parse_usize(&dims[1], 1)?;
    if d == 0 || k == 0 {
        return Err(format_err(1, "d and k must be positive"));
    }
    let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut values = Vec::with_capacity(k * d);
    let mut mu = Vec::new();
    let mut has_mu = None;
    let mut rows = 0;
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let with_mu = match record.len() {
            n if n == d => false,
            n if n == d + 1 => true,
            n => return Err(format_err(line, format!("expected {d} or {} fields, found {n}", d + 1))),
        };
        if *has_mu.get_or_insert(with_mu) != with_mu {
            return Err(format_err(line, "mu column present on some rows only"));
        }
        for f in record.iter().take(d) {
            values.push(parse_f64(f, line)?);
        }
        if with_mu {
            mu.push(parse_f64(&record[d], line)?);
        }
        rows += 1;
    }
    if rows != k {
        return Err(format_err(1, format!("header says k = {k}, found {rows} rows")));
    }
    let phi = DMatrix::from_row_slice(k, d, &values);
    Ok((phi, has_mu.filter(|&m| m).map(|_| DVector::from_vec(mu))))
}

pub fn write_features_file(path: &Path, phi: &DMatrix<f64>, mu: Option<&DVector<f64>>) -> Result<(), IoError> {
    write_features(File::create(path)?, phi, mu)
}

pub fn read_features_file(path: &Path) -> Result<(DMatrix<f64>, Option<DVector<f64>>), IoError> {
    read_features(File::open(path)?)
}

pub const TRACE_HEADER: [&str; 6] = ["round", "action_index", "reward", "instant_regret", "cum_regret", "episode"];

/// One row per round, rounds from 1. `episode` is 0 for non-episodic runs.
pub fn write_trace<W: Write>(out: W, trace: &BanditTrace) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for t in 1..=trace.rounds() {
        w.write_record([
            t.to_string(),
            trace.actions[t - 1].to_string(),
            trace.rewards[t - 1].to_string(),
            trace.instant_regret[t - 1].to_string(),
            trace.cumulative_regret[t - 1].to_string(),
            trace.episode_of(t).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub epsilon: f64,
    pub algo: String,
    pub final_regret: f64,
}

pub const SUMMARY_HEADER: [&str; 7] = ["seed", "n", "k", "d", "epsilon", "algo", "final_regret"];

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.n.to_string(),
            r.k.to_string(),
            r.d.to_string(),
            r.epsilon.to_string(),
            r.algo.clone(),
            r.final_regret.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_mdp(dir: &Path, mdp: &TabularMDP) -> Result<(), IoError> {
    std::fs::create_dir_all(dir)?;
    let mut t = csv::Writer::from_path(dir.join("transitions.csv"))?;
    t.write_record(["s", "a", "s_next", "prob"])?;
    let mut r = csv::Writer::from_path(dir.join("rewards.csv"))?;
    r.write_record(["s", "a", "r"])?;
    for i in 0..mdp.pairs() {
        let (s, a) = mdp.pair(i);
        for (next, &p) in mdp.transitions().row(i).iter().enumerate() {
            if p != 0.0 {
                t.write_record([s.to_string(), a.to_string(), next.to_string(), p.to_string()])?;
            }
        }
        r.write_record([s.to_string(), a.to_string(), mdp.rewards()[i].to_string()])?;
    }
    t.flush()?;
    r.flush()?;
    let mut meta = File::create(dir.join("metadata.txt"))?;
    writeln!(meta, "gamma={} states={} actions={}", mdp.gamma(), mdp.states(), mdp.actions())?;
    Ok(())
}

pub fn read_mdp(dir: &Path) -> Result<TabularMDP, IoError> {
    let meta = std::fs::read_to_string(dir.join("metadata.txt"))?;
    let fields = parse_header(&meta, &["gamma", "states", "actions"], 1)?;
    let gamma = parse_f64(&fields[0], 1)?;
    let states = parse_usize(&fields[1], 1)?;
    let actions = parse_usize(&fields[2], 1)?;
    if states == 0 || actions == 0 {
        return Err(format_err(1, "states and actions must be positive"));
    }
    let sa = states * actions;
    let locate = |s: usize, a: usize, line: usize| {
        if s >= states || a >= actions {
            Err(format_err(line, format!("pair ({s}, {a}) outside {states} x {actions}")))
        } else {
            Ok(s * actions + a)
        }
    };

    let mut p = DMatrix::zeros(sa, states);
    let mut t = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(dir.join("transitions.csv"))?;
    for (i, rec) in t.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 4 {
            return Err(format_err(line, "transitions.csv rows are s,a,s_next,prob"));
        }
        let row = locate(parse_usize(&rec[0], line)?, parse_usize(&rec[1], line)?, line)?;
        let next = parse_usize(&rec[2], line)?;
        if next >= states {
            return Err(format_err(line, format!("next state {next} outside {states}")));
        }
        p[(row, next)] += parse_f64(&rec[3], line)?;
    }

    let mut r = DVector::from_element(sa, f64::NAN);
    let mut rr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(dir.join("rewards.csv"))?;
    for (i, rec) in rr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 3 {
            return Err(format_err(line, "rewards.csv rows are s,a,r"));
        }
        let row = locate(parse_usize(&rec[0], line)?, parse_usize(&rec[1], line)?, line)?;
        r[row] = parse_f64(&rec[2], line)?;
    }
    if let Some(missing) = r.iter().position(|v| v.is_nan()) {
        return Err(format_err(0, format!("rewards.csv has no entry for pair {missing}")));
    }
    Ok(TabularMDP::new(actions, p, r, gamma)?)
}
