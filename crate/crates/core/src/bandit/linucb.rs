//! LinUCB on contextual misspecified bandits, with and without the
//! misspecification bonus.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{BanditError, BanditTrace, NoiseModel};
use crate::linalg::argmax_lowest;

/// One feature matrix a round can present, with the misspecification of
/// each of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pub phi: DMatrix<f64>,
    pub delta: DVector<f64>,
}

/// Per-round feature matrices drawn from a pool by a schedule, with shared
/// `theta`. Round `t` (from 1) presents `pool[schedule[t - 1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSequence {
    pool: Vec<ContextSet>,
    schedule: Vec<usize>,
    theta: DVector<f64>,
}

impl ContextSequence {
    pub fn new(pool: Vec<ContextSet>, schedule: Vec<usize>, theta: DVector<f64>) -> Result<Self, BanditError> {
        let d = theta.len();
        for (i, c) in pool.iter().enumerate() {
            if c.phi.ncols() != d || c.phi.nrows() == 0 || c.delta.len() != c.phi.nrows() {
                return Err(BanditError::InvalidParameters(format!("context {i} does not match d = {d}")));
            }
        }
        if let Some(&bad) = schedule.iter().find(|&&s| s >= pool.len()) {
            return Err(BanditError::InvalidParameters(format!("schedule refers to context {bad} of {}", pool.len())));
        }
        Ok(Self { pool, schedule, theta })
    }

    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }

    pub fn d(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn pool(&self) -> &[ContextSet] {
        &self.pool
    }

    /// Context presented in round `t` (from 1).
    pub fn context(&self, t: usize) -> &ContextSet {
        &self.pool[self.schedule[t - 1]]
    }

    /// `<a, theta> + Delta(a)` for every row of the round-`t` context.
    pub fn means(&self, t: usize) -> DVector<f64> {
        let c = self.context(t);
        &c.phi * &self.theta + &c.delta
    }

    /// `max |Delta|` over the pool.
    pub fn epsilon(&self) -> f64 {
        self.pool.iter().map(|c| c.delta.amax()).fold(0.0, f64::max)
    }

    /// Rows with `|a|_2 > 1` or `|<a, theta>| > 1`, as `(context, row)`.
    /// The regret analysis assumes there are none.
    pub fn norm_violations(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, c) in self.pool.iter().enumerate() {
            for r in 0..c.phi.nrows() {
                let a = c.phi.row(r);
                if a.norm() > 1.0 + 1e-12 || a.dot(&self.theta.transpose()).abs() > 1.0 + 1e-12 {
                    out.push((i, r));
                }
            }
        }
        out
    }
}

/// `1 + sqrt(2 ln n + d ln(1 + n/d))`.
pub fn linucb_beta(n: usize, d: usize) -> f64 {
    let (nf, df) = (n as f64, d as f64);
    1.0 + (2.0 * nf.ln() + df * (1.0 + nf / df).ln()).sqrt()
}

/// Per-run accounting of the misspecification bonus.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinUcbStats {
    /// `sum_t sum_{s<t} |X_t^T G_{t-1}^-1 X_s|`.
    pub cross_sum: f64,
    /// `n sqrt(sum_t |X_t|^2_{G_{t-1}^-1})`.
    pub cross_bound: f64,
    pub beta: f64,
}

/// LinUCB with `G_t = I + sum X_s X_s^T`.
pub fn linucb<R: Rng + ?Sized>(
    contexts: &ContextSequence,
    n: usize,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<(BanditTrace, LinUcbStats), BanditError> {
    run_linucb(contexts, n, 0.0, noise, rng)
}

/// LinUCB whose index adds `epsilon sum_{s<=t} |a^T G_t^-1 X_s|`.
pub fn linucb_modified<R: Rng + ?Sized>(
    contexts: &ContextSequence,
    n: usize,
    epsilon: f64,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<(BanditTrace, LinUcbStats), BanditError> {
    if !(epsilon >= 0.0) {
        return Err(BanditError::InvalidParameters(format!("epsilon = {epsilon}")));
    }
    run_linucb(contexts, n, epsilon, noise, rng)
}

fn run_linucb<R: Rng + ?Sized>(
    contexts: &ContextSequence,
    n: usize,
    epsilon: f64,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<(BanditTrace, LinUcbStats), BanditError> {
    if n == 0 || n > contexts.len() {
        return Err(BanditError::InvalidParameters(format!("n = {n} but the sequence has {} rounds", contexts.len())));
    }
    let d = contexts.d();
    let beta = linucb_beta(n, d);
    let mut g_inv = DMatrix::<f64>::identity(d, d);
    let mut b = DVector::<f64>::zeros(d);
    // Past features grouped by value: the bonus sums over distinct vectors.
    let mut history: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut history_index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut trace = BanditTrace::with_capacity(n);
    let mut cross_sum = 0.0;
    let mut leverage_sum = 0.0;

    for t in 1..=n {
        let ctx = contexts.context(t);
        let means = contexts.means(t);
        let theta_hat = &g_inv * &b;
        let gx = &ctx.phi * &g_inv;
        let index: Vec<f64> = (0..ctx.phi.nrows())
            .map(|r| {
                let w = gx.row(r);
                let width = w.dot(&ctx.phi.row(r)).max(0.0).sqrt();
                let bonus = if epsilon > 0.0 {
                    epsilon * history.iter().map(|(x, c)| c * w.dot(&x.transpose()).abs()).sum::<f64>()
                } else {
                    0.0
                };
                ctx.phi.row(r).dot(&theta_hat.transpose()) + beta * width + bonus
            })
            .collect();
        let choice = argmax_lowest(index.iter().copied()).expect("contexts are non-empty");
        let x = ctx.phi.row(choice).transpose();

        let w = &g_inv * &x;
        cross_sum += history.iter().map(|(h, c)| c * w.dot(h).abs()).sum::<f64>();
        let lev = x.dot(&w);
        leverage_sum += lev;

        let y = means[choice] + noise.sample(rng);
        trace.push(choice, y, means.max() - means[choice]);

        // Sherman-Morrison: (G + x x^T)^-1 = G^-1 - w w^T / (1 + x^T w).
        g_inv.ger(-1.0 / (1.0 + lev), &w, &w, 1.0);
        b.axpy(y, &x, 1.0);
        let key: Vec<u64> = x.iter().map(|v| (v + 0.0).to_bits()).collect();
        match history_index.get(&key) {
            Some(&i) => history[i].1 += 1.0,
            None => {
                history_index.insert(key, history.len());
                history.push((x, 1.0));
            }
        }
    }
    let stats = LinUcbStats { cross_sum, cross_bound: n as f64 * leverage_sum.sqrt(), beta };
    Ok((trace, stats))
}
