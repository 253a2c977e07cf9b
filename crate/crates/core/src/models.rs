//! Click-probability and potential-reward regressors fit from logged data,
//! plus controlled-noise stand-ins for the ablations.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{sigmoid, EnvironmentModel};
use crate::error::{Error, Result};
use crate::rng::{keyed_unit_noise, RngStream};
use crate::types::{ActionId, ContextVector, LoggedDataset};

/// Lower clamp applied to estimated click probabilities.
pub const P_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain full-batch gradient descent.
    Gd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClickModelConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub init_scale: f64,
    pub p_min: f64,
    pub optimizer: Optimizer,
}

impl Default for ClickModelConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 150,
            learning_rate: 0.02,
            init_scale: 0.1,
            p_min: P_MIN,
            optimizer: Optimizer::Adam,
        }
    }
}

impl ClickModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("click_model.hidden", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "click_model.learning_rate",
                "must be positive",
            ));
        }
        if !(self.p_min > 0.0 && self.p_min < 0.5) {
            return Err(Error::config("click_model.p_min", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Design matrix and targets: one row per logged slot, features
/// `x ⊕ onehot(A(k)) ⊕ onehot(k)`.
#[derive(Clone, Debug)]
pub struct ClickTrainingSet {
    pub inputs: Array2<f64>,
    pub targets: Array1<f64>,
}

impl ClickTrainingSet {
    pub fn from_dataset(data: &LoggedDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (d, n_a, k) = (data.context_dim, data.action_count, data.ranking_length);
        let rows = data.len() * k;
        let mut inputs = Array2::zeros((rows, d + n_a + k));
        let mut targets = Array1::zeros(rows);
        for (i, rec) in data.records.iter().enumerate() {
            for (slot, a) in rec.ranking.slots().iter().enumerate() {
                let r = i * k + slot;
                encode(
                    &mut inputs.row_mut(r),
                    &rec.context.values,
                    n_a,
                    a.index(),
                    slot,
                );
                targets[r] = rec.clicks[slot] as u8 as f64;
            }
        }
        Ok(Self { inputs, targets })
    }
}

fn encode(row: &mut ndarray::ArrayViewMut1<f64>, x: &[f64], n_a: usize, a: usize, slot: usize) {
    let d = x.len();
    for (j, v) in x.iter().enumerate() {
        row[j] = *v;
    }
    row[d + a] = 1.0;
    row[d + n_a + slot] = 1.0;
}

/// A two-hidden-layer tanh network with a logistic output, trained by
/// full-batch descent on mean binary cross-entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickRegressor {
    pub config: ClickModelConfig,
    pub context_dim: usize,
    pub action_count: usize,
    pub ranking_length: usize,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array1<f64>,
    pub b3: f64,
    pub final_loss: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
}

struct Forward {
    h1: Array2<f64>,
    h2: Array2<f64>,
    z: Array1<f64>,
}

/// Gradients in the same layout as the parameters.
struct Grads {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array1<f64>,
    b3: f64,
}

/// `tanh` through a single `exp`; libm's `tanh` dominates training time otherwise.
fn tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

fn bce(z: &Array1<f64>, y: &Array1<f64>) -> f64 {
    // log(1 + e^z) - y z, computed stably
    let total: f64 = z
        .iter()
        .zip(y)
        .map(|(&z, &y)| z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z)
        .sum();
    total / z.len() as f64
}

impl ClickRegressor {
    /// Untrained network with weights `U[−s, s]`.
    pub fn init(
        context_dim: usize,
        action_count: usize,
        ranking_length: usize,
        config: &ClickModelConfig,
        rng: &RngStream,
    ) -> Self {
        let mut rng = rng.derive("click-model-init");
        let s = config.init_scale;
        let h = config.hidden;
        let input = context_dim + action_count + ranking_length;
        let mut draw =
            |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-s..=s));
        let w1 = draw(input, h);
        let b1 = draw(1, h).remove_axis(Axis(0));
        let w2 = draw(h, h);
        let b2 = draw(1, h).remove_axis(Axis(0));
        let w3 = draw(h, 1).remove_axis(Axis(1));
        let b3 = draw(1, 1)[[0, 0]];
        Self {
            config: config.clone(),
            context_dim,
            action_count,
            ranking_length,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            final_loss: f64::NAN,
            loss_history: Vec::new(),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Forward {
        let h1 = (x.dot(&self.w1) + &self.b1).mapv_into(tanh);
        let h2 = (h1.dot(&self.w2) + &self.b2).mapv_into(tanh);
        let z = h2.dot(&self.w3) + self.b3;
        Forward { h1, h2, z }
    }

    fn backward(&self, x: &Array2<f64>, y: &Array1<f64>, f: &Forward) -> Grads {
        let n = y.len() as f64;
        let dz = (f.z.mapv(sigmoid) - y) / n;
        let w3 = f.h2.t().dot(&dz);
        let b3 = dz.sum();
        let dz2 = dz.view().insert_axis(Axis(1));
        let mut da2 = dz2.dot(&self.w3.view().insert_axis(Axis(0)));
        da2.zip_mut_with(&f.h2, |g, h| *g *= 1.0 - h * h);
        let w2 = f.h1.t().dot(&da2);
        let b2 = da2.sum_axis(Axis(0));
        let mut da1 = da2.dot(&self.w2.t());
        da1.zip_mut_with(&f.h1, |g, h| *g *= 1.0 - h * h);
        let w1 = x.t().dot(&da1);
        let b1 = da1.sum_axis(Axis(0));
        Grads {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }

    /// Mean binary cross-entropy on `set`.
    pub fn loss(&self, set: &ClickTrainingSet) -> f64 {
        bce(&self.forward(&set.inputs).z, &set.targets)
    }

    /// Loss and its gradient, flattened in [`ClickRegressor::parameters`] order.
    pub fn loss_and_gradient(&self, set: &ClickTrainingSet) -> (f64, Vec<f64>) {
        let f = self.forward(&set.inputs);
        let g = self.backward(&set.inputs, &set.targets, &f);
        (
            bce(&f.z, &set.targets),
            flatten(&g.w1, &g.b1, &g.w2, &g.b2, &g.w3, g.b3),
        )
    }

    pub fn parameters(&self) -> Vec<f64> {
        flatten(&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, self.b3)
    }

    pub fn set_parameters(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.w3.iter_mut())
        {
            *v = it.next().expect("parameter vector too short");
        }
        self.b3 = it.next().expect("parameter vector too short");
    }

    /// Fits on every logged slot of `data`.
    pub fn fit(data: &LoggedDataset, config: &ClickModelConfig, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        let set = ClickTrainingSet::from_dataset(data)?;
        let mut model = Self::init(
            data.context_dim,
            data.action_count,
            data.ranking_length,
            config,
            rng,
        );
        model.train(&set)?;
        Ok(model)
    }

    fn train(&mut self, set: &ClickTrainingSet) -> Result<()> {
        let lr = self.config.learning_rate;
        let mut params = self.parameters();
        let (mut m, mut v) = (vec![0.0; params.len()], vec![0.0; params.len()]);
        let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.loss_history.clear();
        for epoch in 0..self.config.epochs {
            let (loss, grad) = self.loss_and_gradient(set);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(self.divergence(epoch, loss));
            }
            self.loss_history.push(loss);
            match self.config.optimizer {
                Optimizer::Gd => {
                    for (p, g) in params.iter_mut().zip(&grad) {
                        *p -= lr * g;
                    }
                }
                Optimizer::Adam => {
                    let t = (epoch + 1) as i32;
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for i in 0..params.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
            self.set_parameters(&params);
        }
        self.final_loss = self.loss(set);
        if !self.final_loss.is_finite() {
            return Err(self.divergence(self.config.epochs, self.final_loss));
        }
        Ok(())
    }

    fn divergence(&self, epoch: usize, loss: f64) -> Error {
        Error::Divergence {
            epoch,
            loss,
            config: serde_json::to_string(&self.config).unwrap_or_default(),
        }
    }

    /// Raw logits for a batch of encoded rows.
    pub fn logits(&self, inputs: &Array2<f64>) -> Array1<f64> {
        self.forward(inputs).z
    }

    fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.config.p_min, 1.0 - self.config.p_min)
    }

    /// `p̂_c(x, a, k)`.
    pub fn predict(&self, x: &ContextVector, a: ActionId, k: usize) -> Result<f64> {
        self.check(x)?;
        if a.index() >= self.action_count || k == 0 || k > self.ranking_length {
            return Err(Error::InvalidPrefix(format!(
                "({a}, k={k}) outside the model's domain"
            )));
        }
        let mut row = Array2::zeros((1, self.w1.nrows()));
        encode(
            &mut row.row_mut(0),
            &x.values,
            self.action_count,
            a.index(),
            k - 1,
        );
        Ok(self.clamp(sigmoid(self.logits(&row)[0])))
    }

    /// `p̂_c(x, a, k)` for every `(k, a)`: `out[k-1][a]`.
    pub fn predict_grid(&self, x: &ContextVector) -> Result<Vec<Vec<f64>>> {
        self.check(x)?;
        let (n_a, k) = (self.action_count, self.ranking_length);
        let mut rows = Array2::zeros((n_a * k, self.w1.nrows()));
        for slot in 0..k {
            for a in 0..n_a {
                encode(&mut rows.row_mut(slot * n_a + a), &x.values, n_a, a, slot);
            }
        }
        let z = self.logits(&rows);
        Ok((0..k)
            .map(|slot| {
                z.slice(s![slot * n_a..(slot + 1) * n_a])
                    .iter()
                    .map(|&v| self.clamp(sigmoid(v)))
                    .collect()
            })
            .collect())
    }

    fn check(&self, x: &ContextVector) -> Result<()> {
        if x.dim() != self.context_dim {
            return Err(Error::DimensionMismatch {
                what: "click model context",
                expected: self.context_dim,
                found: x.dim(),
            });
        }
        Ok(())
    }
}

fn flatten(
    w1: &Array2<f64>,
    b1: &Array1<f64>,
    w2: &Array2<f64>,
    b2: &Array1<f64>,
    w3: &Array1<f64>,
    b3: f64,
) -> Vec<f64> {
    w1.iter()
        .chain(b1.iter())
        .chain(w2.iter())
        .chain(b2.iter())
        .chain(w3.iter())
        .copied()
        .chain(std::iter::once(b3))
        .collect()
}

/// Anything that predicts `q̂_r(x, a)`.
pub trait RewardPredictor: Send + Sync {
    fn name(&self) -> &str;
    /// `q̂_r(x, a)` for every action.
    fn predict_all(&self, x: &ContextVector) -> Result<Vec<f64>>;

    fn predict(&self, x: &ContextVector, a: ActionId) -> Result<f64> {
        self.predict_all(x)?
            .get(a.index())
            .copied()
            .ok_or(Error::DimensionMismatch {
                what: "reward prediction action",
                expected: 0,
                found: a.index(),
            })
    }
}

/// `q̂_r ≡ 0`; turns the doubly robust estimator into plain click weighting.
#[derive(Clone, Copy, Debug)]
pub struct ZeroReward {
    pub action_count: usize,
}

impl RewardPredictor for ZeroReward {
    fn name(&self) -> &str {
        "zero"
    }

    fn predict_all(&self, _x: &ContextVector) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.action_count])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardModelConfig {
    pub ridge: f64,
    /// Add `x ⊗ onehot(a)` features.
    pub interactions: bool,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-3,
            interactions: false,
        }
    }
}

/// Ridge regression of observed rewards on `x ⊕ onehot(a)` (optionally with
/// interactions), fit on clicked slots only. The intercept is not penalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRegressor {
    pub config: RewardModelConfig,
    pub context_dim: usize,
    pub action_count: usize,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl RewardRegressor {
    fn feature_count(d: usize, n_a: usize, interactions: bool) -> usize {
        d + n_a + if interactions { d * n_a } else { 0 }
    }

    fn features(&self, x: &[f64], a: usize) -> Vec<f64> {
        featurize(x, a, self.action_count, self.config.interactions)
    }

    pub fn fit(data: &LoggedDataset, config: &RewardModelConfig) -> Result<Self> {
        if !(config.ridge >= 0.0 && config.ridge.is_finite()) {
            return Err(Error::config(
                "reward_model.ridge",
                "must be finite and >= 0",
            ));
        }
        let (d, n_a) = (data.context_dim, data.action_count);
        let p = Self::feature_count(d, n_a, config.interactions);
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for rec in &data.records {
            for (slot, a) in rec.ranking.slots().iter().enumerate() {
                if rec.clicks[slot] {
                    rows.push(featurize(
                        &rec.context.values,
                        a.index(),
                        n_a,
                        config.interactions,
                    ));
                    ys.push(rec.observed_rewards[slot]);
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::NoClickedRecords(format!(
                "none of the {} records has a click, so no reward is observed",
                data.len()
            )));
        }
        let m = rows.len();
        let x = DMatrix::from_fn(m, p, |i, j| rows[i][j]);
        let y = DVector::from_vec(ys);
        let means = DVector::from_fn(p, |j, _| x.column(j).mean());
        let y_mean = y.mean();
        let mut xc = x;
        for j in 0..p {
            xc.column_mut(j).add_scalar_mut(-means[j]);
        }
        let yc = y.add_scalar(-y_mean);
        let mut gram = xc.transpose() * &xc;
        for j in 0..p {
            gram[(j, j)] += config.ridge;
        }
        let rhs = xc.transpose() * yc;
        let beta = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            // Singular without ridge: fall back to the pseudo-inverse.
            None => {
                gram.pseudo_inverse(1e-12)
                    .map_err(|e| Error::config("reward_model", e.to_string()))?
                    * rhs
            }
        };
        let intercept = y_mean - beta.dot(&means);
        Ok(Self {
            config: *config,
            context_dim: d,
            action_count: n_a,
            coefficients: beta.iter().copied().collect(),
            intercept,
        })
    }
}

fn featurize(x: &[f64], a: usize, n_a: usize, interactions: bool) -> Vec<f64> {
    let d = x.len();
    let mut f = vec![0.0; RewardRegressor::feature_count(d, n_a, interactions)];
    f[..d].copy_from_slice(x);
    f[d + a] = 1.0;
    if interactions {
        let base = d + n_a + a * d;
        f[base..base + d].copy_from_slice(x);
    }
    f
}

impl RewardPredictor for RewardRegressor {
    fn name(&self) -> &str {
        "ridge"
    }

    fn predict_all(&self, x: &ContextVector) -> Result<Vec<f64>> {
        if x.dim() != self.context_dim {
            return Err(Error::DimensionMismatch {
                what: "reward model context",
                expected: self.context_dim,
                found: x.dim(),
            });
        }
        Ok((0..self.action_count)
            .map(|a| {
                let f = self.features(&x.values, a);
                self.intercept
                    + f.iter()
                        .zip(&self.coefficients)
                        .map(|(u, w)| u * w)
                        .sum::<f64>()
            })
            .collect())
    }
}

/// True click probabilities perturbed by a fixed `U[−δ, δ]` draw per
/// `(x, a, k)`, then clamped to `[p_min, 1 − p_min]`. `δ = 0` returns the
/// truth unclamped.
#[derive(Clone, Debug)]
pub struct NoisyClickOracle {
    pub env: Arc<dyn EnvironmentModel>,
    pub delta: f64,
    pub p_min: f64,
    pub key: u64,
}

impl NoisyClickOracle {
    pub fn new(env: Arc<dyn EnvironmentModel>, delta: f64, key: u64) -> Self {
        Self {
            env,
            delta,
            p_min: P_MIN,
            key,
        }
    }

    /// Noisy `p_c` at each slot of `ranking`.
    pub fn ranking_probs(
        &self,
        x: &ContextVector,
        ranking: &crate::types::Ranking,
    ) -> Result<Vec<f64>> {
        let truth = self.env.click_probs(&self.env.context_terms(x)?, ranking)?;
        if self.delta == 0.0 {
            return Ok(truth);
        }
        let xk = x.key();
        Ok(truth
            .iter()
            .zip(ranking.slots())
            .enumerate()
            .map(|(slot, (q, a))| {
                let u = keyed_unit_noise([self.key, xk, a.0 as u64, slot as u64]);
                (q + self.delta * u).clamp(self.p_min, 1.0 - self.p_min)
            })
            .collect())
    }
}

/// True base rewards plus a fixed `U[−amplitude, amplitude]` draw per `(x, a)`.
#[derive(Clone, Debug)]
pub struct NoisyRewardOracle {
    pub env: Arc<dyn EnvironmentModel>,
    pub amplitude: f64,
    pub key: u64,
}

impl RewardPredictor for NoisyRewardOracle {
    fn name(&self) -> &str {
        "noisy-oracle"
    }

    fn predict_all(&self, x: &ContextVector) -> Result<Vec<f64>> {
        let terms = self.env.context_terms(x)?;
        let xk = x.key();
        Ok((0..self.env.action_count())
            .map(|a| {
                let truth = self.env.base_reward(&terms, ActionId::from(a));
                if self.amplitude == 0.0 {
                    truth
                } else {
                    truth + self.amplitude * keyed_unit_noise([self.key, xk, a as u64])
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{
        build_logging_policy, build_synthetic, generate_logged_dataset, ContextSource,
        SyntheticConfig, SyntheticEnvironment,
    };
    use approx::assert_abs_diff_eq;

    fn env(lambda: f64) -> SyntheticEnvironment {
        build_synthetic(
            &SyntheticConfig {
                context_dim: 3,
                action_count: 4,
                ranking_length: 3,
                lambda,
                reward_sigma: 1.0,
            },
            &RngStream::new(10),
        )
        .unwrap()
    }

    fn data(env: &SyntheticEnvironment, n: usize, alpha: f64, seed: u64) -> LoggedDataset {
        let rng = RngStream::new(seed);
        let logging = build_logging_policy(env, alpha, &rng).unwrap();
        generate_logged_dataset(env, &logging, n, ContextSource::Environment, &rng).unwrap()
    }

    fn small_config() -> ClickModelConfig {
        ClickModelConfig {
            hidden: 6,
            epochs: 5,
            ..Default::default()
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let e = env(0.5);
        let d = data(&e, 30, f64::NEG_INFINITY, 1);
        let set = ClickTrainingSet::from_dataset(&d).unwrap();
        let cfg = ClickModelConfig {
            init_scale: 0.8,
            ..small_config()
        };
        let mut model = ClickRegressor::init(3, 4, 3, &cfg, &RngStream::new(2));
        let (_, grad) = model.loss_and_gradient(&set);
        let base = model.parameters();
        let mut pick = RngStream::new(3);
        let h = 1e-5;
        for _ in 0..20 {
            let i = pick.random_range(0..base.len());
            let mut p = base.clone();
            p[i] += h;
            model.set_parameters(&p);
            let up = model.loss(&set);
            p[i] -= 2.0 * h;
            model.set_parameters(&p);
            let down = model.loss(&set);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn forward_matches_matrix_arithmetic() {
        let cfg = ClickModelConfig {
            init_scale: 0.5,
            ..small_config()
        };
        let m = ClickRegressor::init(3, 4, 3, &cfg, &RngStream::new(7));
        let x = ContextVector::new(vec![0.3, -1.2, 0.8]);
        let input: Vec<f64> = [0.3, -1.2, 0.8, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0].to_vec();
        let h = cfg.hidden;
        let mut h1 = vec![0.0; h];
        for j in 0..h {
            let mut s = m.b1[j];
            for (i, v) in input.iter().enumerate() {
                s += v * m.w1[[i, j]];
            }
            h1[j] = s.tanh();
        }
        let mut z = m.b3;
        for j in 0..h {
            let mut s = m.b2[j];
            for i in 0..h {
                s += h1[i] * m.w2[[i, j]];
            }
            z += s.tanh() * m.w3[j];
        }
        let p = 1.0 / (1.0 + (-z).exp());
        assert_abs_diff_eq!(m.predict(&x, ActionId(2), 2).unwrap(), p, epsilon = 1e-10);
        let grid = m.predict_grid(&x).unwrap();
        assert_abs_diff_eq!(grid[1][2], p, epsilon = 1e-12);
    }

    #[test]
    fn all_clicks_drive_predictions_up() {
        let e = env(0.5);
        let mut d = data(&e, 40, f64::NEG_INFINITY, 4);
        for rec in &mut d.records {
            rec.clicks.fill(true);
        }
        let cfg = ClickModelConfig {
            hidden: 8,
            epochs: 300,
            learning_rate: 0.5,
            ..Default::default()
        };
        let m = ClickRegressor::fit(&d, &cfg, &RngStream::new(5)).unwrap();
        for rec in &d.records {
            for row in m.predict_grid(&rec.context).unwrap() {
                for p in row {
                    assert!(p >= 0.9 && p <= 1.0 - P_MIN);
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let e = env(0.5);
        let d = data(&e, 50, f64::INFINITY, 6);
        let a = ClickRegressor::fit(&d, &small_config(), &RngStream::new(1)).unwrap();
        let b = ClickRegressor::fit(&d, &small_config(), &RngStream::new(1)).unwrap();
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        let back: ClickRegressor = serde_json::from_str(&json).unwrap();
        assert_eq!(back.parameters(), a.parameters());
    }

    #[test]
    fn bias_shift_is_monotone() {
        let m = ClickRegressor::init(3, 4, 3, &small_config(), &RngStream::new(2));
        let mut shifted = m.clone();
        shifted.b3 += 0.3;
        let x = ContextVector::new(vec![1.0, 2.0, -0.5]);
        let (a, b) = (
            m.predict_grid(&x).unwrap(),
            shifted.predict_grid(&x).unwrap(),
        );
        for (ra, rb) in a.iter().zip(&b) {
            for (pa, pb) in ra.iter().zip(rb) {
                assert!(pb > pa);
            }
        }
    }

    #[test]
    fn divergence_is_reported_with_config() {
        let e = env(0.5);
        let d = data(&e, 20, f64::INFINITY, 6);
        let cfg = ClickModelConfig {
            learning_rate: f64::MAX,
            epochs: 10,
            hidden: 4,
            ..Default::default()
        };
        match ClickRegressor::fit(&d, &cfg, &RngStream::new(1)) {
            Err(Error::Divergence { config, .. }) => assert!(config.contains("learning_rate")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    fn linear_env() -> SyntheticEnvironment {
        let mut e = env(0.0);
        for row in &mut e.m_r {
            row.fill(0.0);
        }
        e
    }

    #[test]
    fn ridge_recovers_linear_rewards() {
        let mut e = linear_env();
        e.config.reward_sigma = 1e-9;
        let d = data(&e, 3000, f64::NEG_INFINITY, 8);
        let model = RewardRegressor::fit(&d, &RewardModelConfig::default()).unwrap();
        let mut rng = RngStream::new(9);
        for _ in 0..20 {
            let x = e.sample_context(&mut rng);
            let truth = e.reward_base(&x);
            for (p, t) in model.predict_all(&x).unwrap().iter().zip(&truth) {
                assert!((p - t).abs() < 1e-2, "{p} vs {t}");
            }
        }
    }

    #[test]
    fn huge_ridge_predicts_the_mean() {
        let e = env(0.0);
        let d = data(&e, 300, f64::NEG_INFINITY, 8);
        let cfg = RewardModelConfig {
            ridge: 1e12,
            interactions: false,
        };
        let model = RewardRegressor::fit(&d, &cfg).unwrap();
        let clicked: Vec<f64> = d
            .records
            .iter()
            .flat_map(|r| {
                r.clicks
                    .iter()
                    .zip(&r.observed_rewards)
                    .filter(|(c, _)| **c)
                    .map(|(_, v)| *v)
            })
            .collect();
        let mean = clicked.iter().sum::<f64>() / clicked.len() as f64;
        assert!(model.coefficients.iter().all(|c| c.abs() < 1e-6));
        assert_abs_diff_eq!(model.intercept, mean, epsilon = 1e-6);
    }

    #[test]
    fn normal_equations_match_gradient_descent() {
        let e = env(0.0);
        let d = data(&e, 200, f64::NEG_INFINITY, 3);
        let cfg = RewardModelConfig {
            ridge: 0.5,
            interactions: false,
        };
        let model = RewardRegressor::fit(&d, &cfg).unwrap();
        // Minimize 0.5·||y − b − Xw||² + 0.5·ridge·||w||² by plain descent.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in &d.records {
            for (slot, a) in r.ranking.slots().iter().enumerate() {
                if r.clicks[slot] {
                    xs.push(featurize(&r.context.values, a.index(), 4, false));
                    ys.push(r.observed_rewards[slot]);
                }
            }
        }
        let p = xs[0].len();
        let (mut w, mut b) = (vec![0.0; p], 0.0);
        let step = 1.0 / (xs.len() as f64 * 20.0);
        for _ in 0..100_000 {
            let mut gw = vec![0.0; p];
            let mut gb = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                let r = b + x.iter().zip(&w).map(|(u, v)| u * v).sum::<f64>() - y;
                gb += r;
                for j in 0..p {
                    gw[j] += r * x[j];
                }
            }
            for j in 0..p {
                w[j] -= step * (gw[j] + cfg.ridge * w[j]);
            }
            b -= step * gb;
        }
        for (a, b) in model.coefficients.iter().zip(&w) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(model.intercept, b, epsilon = 1e-6);
    }

    #[test]
    fn no_clicks_is_an_explicit_error() {
        let e = env(0.0);
        let mut d = data(&e, 20, f64::INFINITY, 3);
        for r in &mut d.records {
            r.clicks.fill(false);
            r.observed_rewards.fill(0.0);
        }
        let err = RewardRegressor::fit(&d, &RewardModelConfig::default()).unwrap_err();
        assert!(err.to_string().contains("no reward is observed"));
    }

    #[test]
    fn action_coefficient_isolation() {
        let model = RewardRegressor {
            config: RewardModelConfig::default(),
            context_dim: 2,
            action_count: 3,
            coefficients: vec![0.5, -1.0, 0.1, 0.2, 0.7],
            intercept: 2.0,
        };
        let x = ContextVector::new(vec![1.0, 3.0]);
        let p = model.predict_all(&x).unwrap();
        assert_abs_diff_eq!(p[2] - p[0], 0.7 - 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 2.0 + 0.5 - 3.0 + 0.2, epsilon = 1e-12);
    }

    #[test]
    fn noisy_click_oracle_bounds() {
        let e: Arc<dyn EnvironmentModel> = Arc::new(env(0.5));
        let truth = NoisyClickOracle::new(e.clone(), 0.0, 1);
        let noisy = NoisyClickOracle::new(e.clone(), 0.1, 1);
        let mut rng = RngStream::new(4);
        let r = crate::types::Ranking::from_indices(&[3, 1, 0]);
        for _ in 0..50 {
            let x = e.sample_context(&mut rng);
            let t = e.click_probs(&e.context_terms(&x).unwrap(), &r).unwrap();
            assert_eq!(truth.ranking_probs(&x, &r).unwrap(), t);
            for (n, q) in noisy.ranking_probs(&x, &r).unwrap().iter().zip(&t) {
                assert!((n - q).abs() <= 0.1 + 1e-12);
                assert!(*n >= P_MIN && *n <= 1.0 - P_MIN);
            }
        }
    }

    #[test]
    fn zero_amplitude_reward_oracle_is_truth() {
        let inner = env(0.0);
        let x = ContextVector::new(vec![0.2, 0.4, -0.1]);
        let truth = inner.reward_base(&x);
        let e: Arc<dyn EnvironmentModel> = Arc::new(inner);
        let exact = NoisyRewardOracle {
            env: e.clone(),
            amplitude: 0.0,
            key: 3,
        };
        assert_eq!(exact.predict_all(&x).unwrap(), truth);
        let noisy = NoisyRewardOracle {
            env: e,
            amplitude: 2.0,
            key: 3,
        };
        for (n, t) in noisy.predict_all(&x).unwrap().iter().zip(&truth) {
            assert!((n - t).abs() <= 2.0);
        }
    }
}
