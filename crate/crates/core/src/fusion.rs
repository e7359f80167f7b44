//! Concatenation of the two pooled vectors, the MLP integration head with
//! its sigmoid regression output, and the regularized cross-entropy loss.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{apply_mask, dropout_mask, HiddenAct};
use crate::error::{Error, Result};
use crate::model::ParamKind;
use crate::tensor::{gelu_grad_scalar, gelu_scalar, linear, linear_backward, sigmoid, Tensor};

/// Probabilities are clamped to `[P_MIN, 1 − P_MIN]` before taking logs.
pub const P_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizeSet {
    AllParams,
    /// Weight matrices and embeddings; biases and norm parameters excluded.
    #[default]
    WeightsOnly,
}

impl RegularizeSet {
    pub fn includes(self, kind: ParamKind) -> bool {
        match self {
            RegularizeSet::AllParams => true,
            RegularizeSet::WeightsOnly => kind == ParamKind::Weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub input_dim: usize,
    pub mlp_dims: Vec<usize>,
    pub activation: HiddenAct,
    pub dropout_prob: f64,
    pub lambda: f64,
    pub regularize_set: RegularizeSet,
}

impl FusionConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            mlp_dims: vec![128, 64, 32],
            activation: HiddenAct::Gelu,
            dropout_prob: 0.1,
            lambda: 1e-4,
            regularize_set: RegularizeSet::WeightsOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp_dims.len() != 3 || self.mlp_dims.contains(&0) || self.input_dim == 0 {
            return Err(Error::invalid("fusion config", "need input_dim > 0 and exactly 3 positive MLP widths"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("fusion config", format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::invalid("fusion config", "dropout_prob outside [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub mlp: Vec<Dense>,
    /// Regression weight vector `W` and bias `b`.
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl FusionWeights {
    pub fn zeros(cfg: &FusionConfig) -> Self {
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.mlp_dims);
        let mlp = dims
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Self {
            mlp,
            out_w: Tensor::zeros(&[*dims.last().unwrap_or(&0), 1]),
            out_b: Tensor::zeros(&[1]),
        }
    }

    pub fn tensors(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = Vec::new();
        for (i, d) in self.mlp.iter().enumerate() {
            out.push((format!("mlp{i}.weight"), ParamKind::Weight, &d.weight));
            out.push((format!("mlp{i}.bias"), ParamKind::Bias, &d.bias));
        }
        out.push(("regression.weight".into(), ParamKind::Weight, &self.out_w));
        out.push(("regression.bias".into(), ParamKind::Bias, &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, d) in self.mlp.iter_mut().enumerate() {
            out.push((format!("mlp{i}.weight"), ParamKind::Weight, &mut d.weight));
            out.push((format!("mlp{i}.bias"), ParamKind::Bias, &mut d.bias));
        }
        out.push(("regression.weight".into(), ParamKind::Weight, &mut self.out_w));
        out.push(("regression.bias".into(), ParamKind::Bias, &mut self.out_b));
        out
    }
}

/// Weight matrices ~ N(0, 1/fan_in), biases 0.
pub fn init_fusion(cfg: &FusionConfig, seed: u64) -> Result<FusionWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = FusionWeights::zeros(cfg);
    for (_, kind, t) in w.tensors_mut() {
        if kind == ParamKind::Weight {
            let std = 1.0 / (t.shape()[0] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    Ok(w)
}

/// `[h_a; h_b]`.
pub fn fuse(h_a: &[f64], h_b: &[f64], input_dim: usize) -> Result<Vec<f64>> {
    if h_a.len() + h_b.len() != input_dim {
        return Err(Error::DimensionMismatch {
            expected: input_dim,
            actual: h_a.len() + h_b.len(),
        });
    }
    let mut h = Vec::with_capacity(input_dim);
    h.extend_from_slice(h_a);
    h.extend_from_slice(h_b);
    Ok(h)
}

#[derive(Debug, Clone)]
/// Intermediate values of one head evaluation, kept for the backward pass.
pub struct HeadCache {
    /// Inputs to each MLP layer and to the regression layer.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    pub logit: f64,
    pub prob: f64,
}

impl FusionWeights {
    pub(crate) fn forward(&self, cfg: &FusionConfig, h: &[f64], mut rng: Option<&mut dyn RngCore>) -> Result<HeadCache> {
        if h.len() != cfg.input_dim {
            return Err(Error::DimensionMismatch {
                expected: cfg.input_dim,
                actual: h.len(),
            });
        }
        let mut inputs = vec![h.to_vec()];
        let mut pre = Vec::with_capacity(self.mlp.len());
        let mut masks = Vec::with_capacity(self.mlp.len());
        for layer in &self.mlp {
            let z = linear(inputs.last().expect("non-empty"), 1, &layer.weight, &layer.bias);
            let mut a: Vec<f64> = z.iter().map(|&v| gelu_scalar(v)).collect();
            let mask = dropout_mask(a.len(), cfg.dropout_prob, &mut rng);
            apply_mask(&mut a, &mask);
            pre.push(z);
            masks.push(mask);
            inputs.push(a);
        }
        let logit = linear(inputs.last().expect("non-empty"), 1, &self.out_w, &self.out_b)[0];
        if !logit.is_finite() {
            return Err(Error::NonFinite("head logit".into()));
        }
        Ok(HeadCache {
            inputs,
            pre,
            masks,
            logit,
            prob: sigmoid(logit),
        })
    }

    /// Accumulate gradients given dLoss/dlogit; returns dLoss/dh.
    pub(crate) fn backward(&self, cache: &HeadCache, d_logit: f64, grads: &mut FusionWeights) -> Vec<f64> {
        let last = cache.inputs.last().expect("non-empty");
        let mut d = vec![0.0; last.len()];
        linear_backward(last, &[d_logit], 1, &self.out_w, &mut grads.out_w, &mut grads.out_b, Some(&mut d));
        for (i, (layer, g)) in self.mlp.iter().zip(grads.mlp.iter_mut()).enumerate().rev() {
            apply_mask(&mut d, &cache.masks[i]);
            d.iter_mut().zip(&cache.pre[i]).for_each(|(a, &z)| *a *= gelu_grad_scalar(z));
            let mut dx = vec![0.0; cache.inputs[i].len()];
            linear_backward(&cache.inputs[i], &d, 1, &layer.weight, &mut g.weight, &mut g.bias, Some(&mut dx));
            d = dx;
        }
        d
    }
}

/// `sigmoid(Wᵀ·MLP(h) + b)`. Dropout is active only when `train_rng` is given.
pub fn head_forward(w: &FusionWeights, cfg: &FusionConfig, h: &[f64], train_rng: Option<&mut dyn RngCore>) -> Result<f64> {
    Ok(w.forward(cfg, h, train_rng)?.prob)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(P_MIN, 1.0 - P_MIN)
}

/// Binary cross-entropy of one prediction, on the clamped probability.
pub fn bce(p: f64, label: u8) -> f64 {
    let p = clamp_prob(p);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// d bce / d logit for `p = sigmoid(logit)`; zero where the clamp is active.
pub(crate) fn bce_grad_logit(p: f64, label: u8) -> f64 {
    if !(P_MIN..=1.0 - P_MIN).contains(&p) {
        return 0.0;
    }
    p - f64::from(label)
}

/// `−Σ[y·log p + (1−y)·log(1−p)] + λ·‖θ‖²`, summed over the batch.
/// `theta` yields the regularized parameter arrays.
pub fn loss<'a>(probs: &[f64], labels: &[u8], theta: impl IntoIterator<Item = &'a [f64]>, lambda: f64) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: probs.len(),
            actual: labels.len(),
        });
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid("probability", format!("{p} outside (0, 1)")));
        }
        if y > 1 {
            return Err(Error::invalid("label", format!("{y} is not binary")));
        }
        total += bce(p, y);
    }
    let reg: f64 = theta.into_iter().flat_map(|t| t.iter()).map(|v| v * v).sum();
    Ok(total + lambda * reg)
}
