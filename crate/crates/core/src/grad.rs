//! Reverse-mode gradients of the regularized loss, finite-difference
//! verification, optimizers and the training loop.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::fusion::{bce, bce_grad_logit, P_MIN};
use crate::tensor::sigmoid;
use crate::corpus::PairExample;
use crate::model::{DropoutRngs, DualPathModel, EncodedPair, ModelConfig, ParamSet, Tokenizers};
use crate::seed;

/// Examples per gradient accumulation chunk. Chunk sums are combined in
/// order, so the result does not depend on the execution mode.
pub const GRAD_CHUNK: usize = 8;

/// Where the dropout streams of a batch come from. Example `i` of the batch
/// uses streams keyed by `(seed, epoch, offset + i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutSchedule {
    pub seed: u64,
    pub epoch: u64,
    pub offset: u64,
}

impl DropoutSchedule {
    fn rngs(&self, i: usize) -> DropoutRngs {
        DropoutRngs::for_example(self.seed, self.epoch, self.offset + i as u64)
    }
}

#[derive(Debug, Clone)]
pub struct BatchGrad {
    /// Σ BCE over the batch plus λ‖θ‖².
    pub loss: f64,
    pub probs: Vec<f64>,
    pub grads: ParamSet,
}

/// Loss and exact gradients of the batch objective with respect to every
/// parameter. Dropout is active iff `dropout` is given.
pub fn backward(
    model: &DualPathModel,
    batch: &[EncodedPair],
    dropout: Option<DropoutSchedule>,
    mode: ExecMode,
) -> Result<BatchGrad> {
    let chunks = exec::map_chunks(mode, batch, GRAD_CHUNK, |offset, chunk| -> Result<_> {
        let mut grads = ParamSet::zeros(&model.config);
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(chunk.len());
        for (j, x) in chunk.iter().enumerate() {
            let mut rngs = dropout.map(|d| d.rngs(offset + j));
            let cache = model.forward(x, rngs.as_mut())?;
            let p = cache.head.prob;
            loss += bce(p, x.label);
            probs.push(p);
            model.backward(&cache, bce_grad_logit(p, x.label), &mut grads);
        }
        Ok((loss, probs, grads))
    });
    let mut grads = ParamSet::zeros(&model.config);
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(batch.len());
    for c in chunks {
        let (l, p, g) = c?;
        loss += l;
        probs.extend(p);
        grads.add_assign(&g);
    }
    let set = model.config.fusion.regularize_set;
    let lambda = model.config.fusion.lambda;
    for ((_, kind, g), (_, _, w)) in grads.named_mut().into_iter().zip(model.params.named()) {
        if set.includes(kind) {
            g.data_mut().iter_mut().zip(w.data()).for_each(|(g, w)| *g += 2.0 * lambda * w);
        }
    }
    loss += model.regularizer();
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("loss or gradients".into()));
    }
    Ok(BatchGrad { loss, probs, grads })
}

/// Objective over a whole dataset in inference mode.
pub fn dataset_loss(model: &DualPathModel, pairs: &[EncodedPair], mode: ExecMode) -> Result<f64> {
    let parts = exec::map_chunks(mode, pairs, 64, |_, chunk| -> Result<f64> {
        let mut s = 0.0;
        for x in chunk {
            s += bce(model.predict_proba(x)?, x.label);
        }
        Ok(s)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total + model.regularizer())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Minimum number of coordinates checked in each parameter group
    /// (encoder A, encoder B, head), spread over all of the group's tensors.
    /// Groups with fewer coordinates are checked exhaustively.
    pub coords_per_group: usize,
    pub seed: u64,
    /// Check with dropout active (fixed masks) instead of inference mode.
    pub train_mode: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_group: 1000,
            seed: 0,
            train_mode: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    /// Index into [`GradCheckReport::tensors`].
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub tensors: Vec<TensorCheck>,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Max relative error over coordinates whose analytic or numeric
    /// gradient reaches `min_abs` in magnitude.
    pub fn max_rel_error_above(&self, min_abs: f64) -> f64 {
        self.coords
            .iter()
            .filter(|c| c.analytic.abs().max(c.numeric.abs()) >= min_abs)
            .map(|c| relative_error(c.analytic, c.numeric))
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients with central finite differences.
pub fn grad_check(model: &DualPathModel, batch: &[EncodedPair], cfg: &GradCheckConfig, mode: ExecMode) -> Result<GradCheckReport> {
    let analytic = backward(model, batch, check_schedule(cfg), mode)?.grads;
    grad_check_against(model, batch, &analytic, cfg, mode)
}

fn check_schedule(cfg: &GradCheckConfig) -> Option<DropoutSchedule> {
    cfg.train_mode.then_some(DropoutSchedule {
        seed: cfg.seed,
        epoch: 0,
        offset: 0,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Part {
    A,
    B,
    Head,
}

fn part_of(name: &str) -> Part {
    match name.split('.').next() {
        Some("a") => Part::A,
        Some("b") => Part::B,
        _ => Part::Head,
    }
}

/// Per-tensor sample sizes: the smallest uniform cap `k` such that the
/// group's total `Σ min(n_t, k)` reaches `quota`.
fn per_tensor_caps(sizes: &[usize], quota: usize) -> usize {
    let total: usize = sizes.iter().sum();
    if total <= quota {
        return usize::MAX;
    }
    let (mut lo, mut hi) = (1, sizes.iter().copied().max().unwrap_or(1));
    while lo < hi {
        let mid = (lo + hi) / 2;
        if sizes.iter().map(|&n| n.min(mid)).sum::<usize>() >= quota {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// `bce(p⁺) − bce(p⁻)` for `p± = σ(z±)`. Subtracting two O(1) losses would
/// lose everything below one ulp of the loss, so outside the clamp the
/// difference is taken in logit space:
/// softplus(a) − softplus(b) = log1p(σ(b)·expm1(a − b)).
fn loss_difference(zp: f64, pp: f64, zm: f64, pm: f64, label: u8) -> f64 {
    let clamped = |p: f64| p <= P_MIN || p >= 1.0 - P_MIN;
    if clamped(pp) || clamped(pm) {
        return bce(pp, label) - bce(pm, label);
    }
    // bce(σ(z), y) = softplus(z) − y·z
    let dz = zp - zm;
    (sigmoid(zm) * dz.exp_m1()).ln_1p() - f64::from(label) * dz
}

/// Finite-difference check of a caller-supplied gradient (lets tests verify
/// that corrupted gradients are caught).
pub fn grad_check_against(
    model: &DualPathModel,
    batch: &[EncodedPair],
    analytic: &ParamSet,
    cfg: &GradCheckConfig,
    mode: ExecMode,
) -> Result<GradCheckReport> {
    let dropout = check_schedule(cfg);
    let rngs = |i: usize| dropout.map(|d| d.rngs(i));

    // Pooled outputs of the unperturbed model; a coordinate only forces
    // recomputation of the part it belongs to.
    let mut base_a = Vec::with_capacity(batch.len());
    let mut base_b = Vec::with_capacity(batch.len());
    for (i, x) in batch.iter().enumerate() {
        let mut r = rngs(i);
        let pooled = |c: Option<crate::encoder::EncoderCache>| c.map(|c| c.pooled).unwrap_or_default();
        base_a.push(pooled(model.encode_a(&x.a, r.as_mut().map(|r| r.a.as_mut() as _))?));
        base_b.push(pooled(model.encode_b(&x.b, r.as_mut().map(|r| r.b.as_mut() as _))?));
    }
    // Per-example (logit, probability); the regularizer is added analytically.
    let outputs = |m: &DualPathModel, part: Part| -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(batch.len());
        for (i, x) in batch.iter().enumerate() {
            let mut r = rngs(i);
            let a = match part {
                Part::A => m.encode_a(&x.a, r.as_mut().map(|r| r.a.as_mut() as _))?.map(|c| c.pooled),
                _ => None,
            };
            let b = match part {
                Part::B => m.encode_b(&x.b, r.as_mut().map(|r| r.b.as_mut() as _))?.map(|c| c.pooled),
                _ => None,
            };
            let ha = a.as_deref().unwrap_or(&base_a[i]);
            let hb = b.as_deref().unwrap_or(&base_b[i]);
            let head = m.head_from_pooled(ha, hb, r.as_mut().map(|r| r.head.as_mut() as _))?;
            out.push((head.logit, head.prob));
        }
        Ok(out)
    };

    let named = analytic.named();
    let parts: Vec<Part> = named.iter().map(|(n, _, _)| part_of(n)).collect();
    let mut rng = seed::rng_for(cfg.seed, "gradcheck/coords");
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for part in [Part::A, Part::B, Part::Head] {
        let members: Vec<usize> = (0..named.len()).filter(|&t| parts[t] == part).collect();
        let sizes: Vec<usize> = members.iter().map(|&t| named[t].2.len()).collect();
        let cap = per_tensor_caps(&sizes, cfg.coords_per_group);
        for (&t, &n) in members.iter().zip(&sizes) {
            if n <= cap {
                jobs.extend((0..n).map(|c| (t, c)));
            } else {
                let mut picked = sample(&mut rng, n, cap).into_vec();
                picked.sort_unstable();
                jobs.extend(picked.into_iter().map(|c| (t, c)));
            }
        }
    }
    jobs.sort_unstable();

    let step = cfg.step;
    let lambda = model.config.fusion.lambda;
    let set = model.config.fusion.regularize_set;
    let numeric = exec::map_chunks(mode, &jobs, 32, |_, chunk| -> Result<Vec<f64>> {
        let mut m = model.clone();
        let mut out = Vec::with_capacity(chunk.len());
        for &(ti, c) in chunk {
            let kind = m.params.named()[ti].1;
            let orig = m.params.named()[ti].2.data()[c];
            m.params.named_mut()[ti].2.data_mut()[c] = orig + step;
            let plus = outputs(&m, parts[ti])?;
            m.params.named_mut()[ti].2.data_mut()[c] = orig - step;
            let minus = outputs(&m, parts[ti])?;
            m.params.named_mut()[ti].2.data_mut()[c] = orig;
            let diff: f64 = batch
                .iter()
                .zip(plus.iter().zip(&minus))
                .map(|(x, (&(zp, pp), &(zm, pm)))| loss_difference(zp, pp, zm, pm, x.label))
                .sum();
            // λ[(w+h)² − (w−h)²] / 2h = 2λw
            let reg = if set.includes(kind) { 2.0 * lambda * orig } else { 0.0 };
            out.push(diff / (2.0 * step) + reg);
        }
        Ok(out)
    });

    let mut tensors: Vec<TensorCheck> = named
        .iter()
        .map(|(n, _, _)| TensorCheck {
            name: n.clone(),
            coords_checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        })
        .collect();
    let fd_values = numeric.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten();
    let mut coords = Vec::with_capacity(jobs.len());
    for (&(ti, c), fd) in jobs.iter().zip(fd_values) {
        let ga = named[ti].2.data()[c];
        coords.push(CoordCheck {
            tensor: ti,
            index: c,
            analytic: ga,
            numeric: fd,
        });
        let err = relative_error(ga, fd);
        let tc = &mut tensors[ti];
        if tc.coords_checked == 0 || err > tc.max_rel_error {
            tc.max_rel_error = err;
            tc.worst_index = c;
            tc.worst_analytic = ga;
            tc.worst_numeric = fd;
        }
        tc.coords_checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error: tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max),
        coords_checked: jobs.len(),
        tensors,
        coords,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, cfg: &ModelConfig) -> Self {
        let adam = (kind == OptimizerKind::Adam).then(|| AdamState {
            m: ParamSet::zeros(cfg),
            v: ParamSet::zeros(cfg),
            t: 0,
        });
        Self {
            kind,
            learning_rate,
            adam,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        let lr = self.learning_rate;
        match &mut self.adam {
            None => {
                for ((_, _, p), (_, _, g)) in params.named_mut().into_iter().zip(grads.named()) {
                    p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
                }
            }
            Some(state) => {
                state.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
                let iter = params
                    .named_mut()
                    .into_iter()
                    .zip(grads.named())
                    .zip(state.m.named_mut())
                    .zip(state.v.named_mut());
                for ((((_, _, p), (_, _, g)), (_, _, m)), (_, _, v)) in iter {
                    for (((p, g), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-epoch ordering of the training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shuffle {
    Off,
    /// Independent permutation of all pairs.
    Pairs,
    /// Permute sentences; the candidate pairs of one sentence stay adjacent
    /// so that a batch contrasts them against each other.
    #[default]
    Sentences,
}

/// Encoded training pairs plus the lengths of the consecutive runs that
/// belong to one sentence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub pairs: Vec<EncodedPair>,
    pub group_lens: Vec<usize>,
}

impl TrainData {
    /// Every pair is its own group.
    pub fn ungrouped(pairs: Vec<EncodedPair>) -> Self {
        let group_lens = vec![1; pairs.len()];
        Self { pairs, group_lens }
    }

    /// Encode pairs, grouping consecutive pairs with the same sample id.
    pub fn encode(tokenizers: &Tokenizers, pairs: &[PairExample]) -> Result<Self> {
        let mut group_lens: Vec<usize> = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            match group_lens.last_mut() {
                Some(n) if pairs[i - 1].sample_id == p.sample_id => *n += 1,
                _ => group_lens.push(1),
            }
        }
        let pairs = pairs.iter().map(|p| tokenizers.encode_pair(p)).collect::<Result<_>>()?;
        Ok(Self { pairs, group_lens })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn order(&self, shuffle: Shuffle, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng = seed::rng_indexed(seed, "train/shuffle", &[epoch as u64]);
        match shuffle {
            Shuffle::Off => (0..self.len()).collect(),
            Shuffle::Pairs => {
                let mut o: Vec<usize> = (0..self.len()).collect();
                o.shuffle(&mut rng);
                o
            }
            Shuffle::Sentences => {
                let mut starts = Vec::with_capacity(self.group_lens.len());
                let mut at = 0;
                for &n in &self.group_lens {
                    starts.push((at, n));
                    at += n;
                }
                starts.shuffle(&mut rng);
                starts.into_iter().flat_map(|(s, n)| s..s + n).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: Shuffle,
    /// Record dev loss every this many steps as well as after each epoch
    /// (0 = per epoch only).
    pub eval_every: usize,
    /// Apply dropout while training.
    pub dropout: bool,
    /// Fraction of all steps spent linearly warming the learning rate up
    /// from 0.
    pub warmup_fraction: f64,
    /// Decay the learning rate linearly to 0 after warmup.
    pub linear_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            shuffle: Shuffle::Sentences,
            eval_every: 0,
            dropout: false,
            warmup_fraction: 0.1,
            linear_decay: true,
        }
    }

    /// Fine-tuning schedule: learning rate 2e-5 for 5 epochs.
    pub fn paper() -> Self {
        Self {
            learning_rate: 2e-5,
            epochs: 5,
            ..Self::toy()
        }
    }

    /// Learning rate for 1-based `step` out of `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_fraction * total as f64).ceil() as usize;
        let lr = self.learning_rate;
        if step <= warmup {
            return lr * step as f64 / warmup.max(1) as f64;
        }
        if self.linear_decay && total > warmup {
            lr * (total + 1 - step) as f64 / (total + 1 - warmup) as f64
        } else {
            lr
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("train config", "warmup_fraction must be in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "train config",
                "learning_rate must be > 0, epochs and batch_size >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub split: Split,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    pub fn push(&mut self, epoch: usize, step: usize, split: Split, loss: f64) {
        self.records.push(LossRecord { epoch, step, split, loss });
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LossRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,split,loss\n");
        for r in &self.records {
            let split = match r.split {
                Split::Train => "train",
                Split::Dev => "dev",
            };
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.step, split, r.loss);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct BestDev {
    pub epoch: usize,
    pub loss: f64,
    pub params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: LossHistory,
    /// Parameters at the epoch with the lowest dev loss, when a dev set was
    /// supplied.
    pub best_dev: Option<BestDev>,
}

/// Mini-batch training. Epoch 0 carries the dev loss of the initial model.
/// The model is left holding the final parameters.
pub fn train(
    model: &mut DualPathModel,
    train_set: &TrainData,
    dev_set: Option<&[EncodedPair]>,
    cfg: &TrainConfig,
    mode: ExecMode,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training data", "no training pairs"));
    }
    if train_set.group_lens.iter().sum::<usize>() != train_set.len() {
        return Err(Error::invalid("training data", "group lengths do not cover the pairs"));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.config);
    let mut history = LossHistory::default();
    let mut best_dev: Option<BestDev> = None;
    let mut step = 0usize;
    let total_steps = cfg.epochs * train_set.len().div_ceil(cfg.batch_size);

    let record_dev = |model: &DualPathModel, epoch: usize, step: usize, history: &mut LossHistory| -> Result<Option<f64>> {
        let Some(dev) = dev_set.filter(|d| !d.is_empty()) else { return Ok(None) };
        let l = dataset_loss(model, dev, mode)?;
        history.push(epoch, step, Split::Dev, l);
        Ok(Some(l))
    };
    record_dev(model, 0, 0, &mut history)?;

    let dropout_seed = seed::derive_seed(cfg.seed, "train/dropout");
    for epoch in 1..=cfg.epochs {
        let order = train_set.order(cfg.shuffle, cfg.seed, epoch);
        let mut seen = 0u64;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<EncodedPair> = idx.iter().map(|&i| train_set.pairs[i].clone()).collect();
            let dropout = cfg.dropout.then_some(DropoutSchedule {
                seed: dropout_seed,
                epoch: epoch as u64,
                offset: seen,
            });
            seen += batch.len() as u64;
            opt.learning_rate = cfg.learning_rate_at(step + 1, total_steps);
            let bg = backward(model, &batch, dropout, mode).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, step: step + 1, loss: f64::NAN },
                other => other,
            })?;
            step += 1;
            history.push(epoch, step, Split::Train, bg.loss);
            opt.step(&mut model.params, &bg.grads)?;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                record_dev(model, epoch, step, &mut history)?;
            }
        }
        let dev = record_dev(model, epoch, step, &mut history)?;
        let last_train = history.split(Split::Train).last().map_or(f64::NAN, |r| r.loss);
        log::info!("epoch {epoch}: step {step}, last batch loss {last_train:.4}, dev loss {dev:?}");
        if let Some(l) = dev {
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: l });
            }
            if best_dev.as_ref().is_none_or(|b| l < b.loss) {
                best_dev = Some(BestDev {
                    epoch,
                    loss: l,
                    params: model.params.clone(),
                });
            }
        }
    }
    Ok(TrainOutcome { history, best_dev })
}
