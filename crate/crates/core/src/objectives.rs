//! Normalisation, cosine similarity, the contrastive NCE loss and AdamW.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Gradients, Graph, ParamStore, Var};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("row {0} has zero norm and cannot be normalised")]
    ZeroRow(usize),
    #[error("loss over an empty batch")]
    EmptyBatch,
    #[error("target {target} of row {row} is out of range for {cols} columns")]
    TargetOutOfRange { row: usize, target: usize, cols: usize },
    #[error("symmetric loss needs a square matrix whose targets are a permutation")]
    NotSymmetric,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    /// Add the text→video direction and average the two.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: DEFAULT_TEMPERATURE, symmetric: false }
    }
}

/// L2-normalise each row; zero rows are an error.
pub fn l2_normalize<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var, ObjectiveError> {
    check_rows(g.value(x))?;
    let sq = g.mul(x, x);
    let ss = g.row_sum(sq);
    let norm = g.sqrt(ss);
    let inv = g.recip(norm);
    Ok(g.mul_col(x, inv))
}

fn check_rows<T: Scalar>(x: &Tensor<T>) -> Result<(), ObjectiveError> {
    for i in 0..x.rows() {
        if x.row(i).iter().all(|v| *v == T::zero()) {
            return Err(ObjectiveError::ZeroRow(i));
        }
    }
    Ok(())
}

/// Tensor version of [`l2_normalize`], identical arithmetic.
pub fn l2_normalize_tensor<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, ObjectiveError> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = l2_normalize(&mut g, v)?;
    Ok(g.value(y).clone())
}

/// `S[i, j] = ⟨V_i, C_j⟩` for row-normalised inputs.
pub fn similarity_matrix<T: Scalar>(g: &mut Graph<T>, videos: Var, classes: Var) -> Var {
    let ct = g.transpose(classes);
    g.matmul(videos, ct)
}

pub fn similarity_tensor<T: Scalar>(videos: &Tensor<T>, classes: &Tensor<T>) -> Tensor<T> {
    videos.matmul(&classes.transpose())
}

/// Mean over rows of the cross-entropy of `S / τ` against `targets`.
///
/// With `symmetric`, the same loss on `Sᵀ` (targets inverted) is averaged in.
pub fn nce_loss<T: Scalar>(
    g: &mut Graph<T>,
    sims: Var,
    targets: &[usize],
    config: &LossConfig,
) -> Result<Var, ObjectiveError> {
    if config.temperature <= 0.0 || !config.temperature.is_finite() {
        return Err(ObjectiveError::Config(format!("temperature {} must be positive", config.temperature)));
    }
    let (n, m) = g.value(sims).dims2();
    if n == 0 || targets.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    assert_eq!(targets.len(), n, "one target per row");
    for (row, &target) in targets.iter().enumerate() {
        if target >= m {
            return Err(ObjectiveError::TargetOutOfRange { row, target, cols: m });
        }
    }
    let forward = directional_ce(g, sims, targets, config.temperature);
    if !config.symmetric {
        return Ok(forward);
    }
    if n != m {
        return Err(ObjectiveError::NotSymmetric);
    }
    let mut inverse = vec![usize::MAX; m];
    for (i, &t) in targets.iter().enumerate() {
        if inverse[t] != usize::MAX {
            return Err(ObjectiveError::NotSymmetric);
        }
        inverse[t] = i;
    }
    let st = g.transpose(sims);
    let backward = directional_ce(g, st, &inverse, config.temperature);
    let total = g.add(forward, backward);
    Ok(g.scale(total, T::from_f64(0.5)))
}

fn directional_ce<T: Scalar>(g: &mut Graph<T>, sims: Var, targets: &[usize], temperature: f64) -> Var {
    let logits = g.scale(sims, T::from_f64(1.0 / temperature));
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick_per_row(logp, targets);
    let mean = g.mean(picked);
    g.scale(mean, T::from_f64(-1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if v <= 0.0 || !v.is_finite() {
                return Err(ObjectiveError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(ObjectiveError::Config("betas must be below 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(ObjectiveError::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(ObjectiveError::Config("batch_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// AdamW with decoupled weight decay, applied to trainable parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Scalar = f32> {
    pub config: TrainConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: TrainConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    /// One update. Frozen parameters and parameters without a gradient are
    /// left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let lr = T::from_f64(c.learning_rate);
        let decay = T::from_f64(1.0 - c.learning_rate * c.weight_decay);
        let (bc1, bc2, eps) = (T::from_f64(bc1), T::from_f64(bc2), T::from_f64(c.eps));

        for p in store.iter_mut().filter(|p| p.trainable) {
            let Some(grad) = grads.get(&p.name) else { continue };
            let mo = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let theta = p.value.data_mut();
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for i in 0..theta.len() {
                let gi = grad.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] = theta[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Apply one optimizer step after validating the loss.
pub fn train_step<T: Scalar>(
    store: &mut ParamStore<T>,
    optimizer: &mut AdamW<T>,
    loss: f64,
    grads: &Gradients<T>,
) -> Result<(), ObjectiveError> {
    if !loss.is_finite() || !grads.all_finite() {
        return Err(ObjectiveError::NonFiniteLoss { step: optimizer.step, loss });
    }
    optimizer.update(store, grads);
    Ok(())
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// `step,loss,lr` CSV with a header line.
pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.step, r.loss, r.lr);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(s: &[f64], rows: usize, cols: usize, targets: &[usize]) -> f64 {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64_rows(rows, cols, s));
        let l = nce_loss(&mut g, v, targets, &LossConfig::default()).unwrap();
        g.value(l).item()
    }

    #[test]
    fn normalize_three_four_five() {
        let y = l2_normalize_tensor(&Tensor::<f64>::from_f64_rows(1, 2, &[3.0, 4.0])).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let x = Tensor::<f64>::from_f64_rows(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(l2_normalize_tensor(&x).unwrap_err(), ObjectiveError::ZeroRow(1));
    }

    #[test]
    fn single_logit_has_zero_loss() {
        assert_eq!(loss_of(&[0.3], 1, 1, &[0]), 0.0);
    }

    #[test]
    fn target_out_of_range() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            nce_loss(&mut g, v, &[2], &LossConfig::default()),
            Err(ObjectiveError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn symmetric_needs_permutation() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(&[2, 2]));
        let cfg = LossConfig { symmetric: true, ..Default::default() };
        assert_eq!(nce_loss(&mut g, v, &[0, 0], &cfg).unwrap_err(), ObjectiveError::NotSymmetric);
        let v = g.constant(Tensor::from_f64_rows(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let l = nce_loss(&mut g, v, &[0, 1], &cfg).unwrap();
        assert!(g.value(l).item() > 0.0);
    }

    #[test]
    fn frozen_param_untouched_by_adamw() {
        let mut store = ParamStore::<f64>::new();
        store.insert("frozen", Tensor::from_vec(vec![1.0, 2.0]), false);
        store.insert("live", Tensor::from_vec(vec![1.0, 2.0]), true);
        let mut g = Graph::new();
        let a = g.param_from(&store, "frozen");
        let b = g.param_from(&store, "live");
        let s = g.add(a, b);
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("frozen").is_some());
        let mut opt = AdamW::new(TrainConfig::default());
        train_step(&mut store, &mut opt, 1.0, &grads).unwrap();
        assert_eq!(store.tensor("frozen").data(), &[1.0, 2.0]);
        assert_ne!(store.tensor("live").data(), &[1.0, 2.0]);
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let mut store = ParamStore::<f64>::new();
        let mut opt = AdamW::new(TrainConfig::default());
        opt.step = 12;
        let err = train_step(&mut store, &mut opt, f64::NAN, &Gradients::default()).unwrap_err();
        assert!(matches!(err, ObjectiveError::NonFiniteLoss { step: 12, .. }));
    }

    #[test]
    fn csv_header_and_rows() {
        let csv = loss_curve_csv(&[LossRecord { step: 1, loss: 0.5, lr: 1e-4 }]);
        assert_eq!(csv, "step,loss,lr\n1,0.5,0.0001\n");
    }
}
