//! Instance constructors for the bandit experiments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{BanditError, BanditInstance, ContextSequence, ContextSet, NoiseModel};
use crate::design::FeatureMatrix;
use crate::hypothesis::{near_orthogonal_rows, HardInstance, MisspecifiedReward};

/// Attempts made by [`realizable_instance`] before giving up.
pub const INSTANCE_ATTEMPTS: usize = 10_000;

/// Contextual instance on which LinUCB without the misspecification bonus
/// is meant to stop playing the good action.
///
/// Rounds `t <= n/2` offer the single action `(epsilon, 0)` in odd rounds and
/// `(0, epsilon)` in even rounds; later rounds offer `(2, 1)` and `(0, 0)`.
/// `theta = (1/2, -1/2)`, `Delta((epsilon, 0)) = -epsilon`,
/// `Delta((0, epsilon)) = epsilon` and `Delta = 0` on the last two rows.
pub fn failure_instance(epsilon: f64, n: usize) -> Result<ContextSequence, BanditError> {
    if !(epsilon > 0.0) || n == 0 || !n.is_multiple_of(2) {
        return Err(BanditError::InvalidParameters(format!("need epsilon > 0 and even n, got {epsilon}, {n}")));
    }
    let pool = vec![
        ContextSet { phi: DMatrix::from_row_slice(1, 2, &[epsilon, 0.0]), delta: DVector::from_element(1, -epsilon) },
        ContextSet { phi: DMatrix::from_row_slice(1, 2, &[0.0, epsilon]), delta: DVector::from_element(1, epsilon) },
        ContextSet { phi: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 0.0]), delta: DVector::zeros(2) },
    ];
    let schedule = (1..=n)
        .map(|t| match (t <= n / 2, t % 2) {
            (true, 1) => 0,
            (true, _) => 1,
            (false, _) => 2,
        })
        .collect();
    ContextSequence::new(pool, schedule, DVector::from_vec(vec![0.5, -0.5]))
}

/// Unit rows in `R^d` with pairwise `|a^T b| <= sqrt(8 ln k / (d - 1))`.
pub fn lower_bound_features<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<HardInstance, BanditError> {
    if k < 2 || d < 2 {
        return Err(BanditError::InvalidParameters(format!("need k, d >= 2, got k = {k}, d = {d}")));
    }
    let bound = (8.0 * (k as f64).ln() / (d as f64 - 1.0)).sqrt();
    Ok(near_orthogonal_rows(k, d, bound, rng)?)
}

/// The needle instance `mu = epsilon delta e_{star}` with
/// `delta = sqrt((d - 1) / (8 ln k))`, written as `Phi theta + Delta` with
/// `theta = epsilon delta a_star`. The inner-product bound of the rows gives
/// `|Delta|_inf <= epsilon`, which is certified here.
pub fn lower_bound_instance(
    rows: &HardInstance,
    star: usize,
    epsilon: f64,
    noise: NoiseModel,
) -> Result<BanditInstance, BanditError> {
    let (k, d) = (rows.k(), rows.d());
    if star >= k || !(epsilon > 0.0) {
        return Err(BanditError::InvalidParameters(format!("star = {star} of {k}, epsilon = {epsilon}")));
    }
    let delta = ((d as f64 - 1.0) / (8.0 * (k as f64).ln())).sqrt();
    let theta = rows.rows().row(star).transpose() * (epsilon * delta);
    let mut mu = DVector::zeros(k);
    mu[star] = epsilon * delta;
    // Slack for rounding in Phi theta.
    let reward = MisspecifiedReward::from_mu(rows.rows(), theta, mu, epsilon * (1.0 + 1e-12))?;
    BanditInstance::new(FeatureMatrix::new(rows.rows().clone())?, reward, noise)
}

/// Random realizable instance: unit rows, `theta` scaled so that
/// `max mu - min mu = 1`, redrawn until the best action leads the second by
/// at least `min_gap`.
pub fn realizable_instance<R: Rng + ?Sized>(
    k: usize,
    d: usize,
    min_gap: f64,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<BanditInstance, BanditError> {
    if k < d || d == 0 || k < 2 {
        return Err(BanditError::InvalidParameters(format!("need k >= max(d, 2), got k = {k}, d = {d}")));
    }
    for _ in 0..INSTANCE_ATTEMPTS {
        let mut rows = DMatrix::from_fn(k, d, |_, _| StandardNormal.sample(rng));
        for mut r in rows.row_iter_mut() {
            let norm = r.norm();
            r /= norm;
        }
        let raw: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let proj = &rows * &raw;
        let range = proj.max() - proj.min();
        let theta = raw / range;
        let mu = &rows * &theta;
        let mut sorted: Vec<f64> = mu.iter().copied().collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] < min_gap {
            continue;
        }
        let Ok(phi) = FeatureMatrix::new(rows) else { continue };
        let reward = MisspecifiedReward::new(phi.matrix(), theta, DVector::zeros(k), 0.0)?;
        return BanditInstance::new(phi, reward, noise);
    }
    Err(BanditError::InstanceSearch { min_gap, attempts: INSTANCE_ATTEMPTS })
}

/// Pool of `pool_size` random contexts of `k_t` rows in the unit ball with a
/// unit `theta`, scheduled uniformly at random for `n` rounds. `Delta` is
/// drawn uniformly in `[-epsilon, epsilon]`.
pub fn random_contexts<R: Rng + ?Sized>(
    pool_size: usize,
    k_t: usize,
    d: usize,
    n: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<ContextSequence, BanditError> {
    if pool_size == 0 || k_t == 0 || d == 0 {
        return Err(BanditError::InvalidParameters("pool, context and dimension sizes must be positive".into()));
    }
    let mut theta: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    theta /= theta.norm();
    let pool = (0..pool_size)
        .map(|_| {
            let mut phi = DMatrix::from_fn(k_t, d, |_, _| StandardNormal.sample(rng));
            for mut r in phi.row_iter_mut() {
                let scale = r.norm() / rng.random::<f64>().powf(1.0 / d as f64);
                r /= scale;
            }
            let delta = DVector::from_fn(k_t, |_, _| epsilon * (2.0 * rng.random::<f64>() - 1.0));
            ContextSet { phi, delta }
        })
        .collect();
    let schedule = (0..n).map(|_| rng.random_range(0..pool_size)).collect();
    ContextSequence::new(pool, schedule, theta)
}
