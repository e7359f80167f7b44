//! Post-norm transformer encoder with absolute position embeddings and a
//! tanh pooler over the first (CLS) position. The model holds two
//! independent instances of it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamKind;
use crate::tensor::{gelu_grad_scalar, gelu_scalar, gemm, linear, linear_backward, normalize_row, softmax_in_place, Tensor};
use crate::tokenize::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenAct {
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionEmbeddingType {
    Absolute,
}

/// Encoder hyperparameters, named after the usual transformer config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub hidden_act: HiddenAct,
    pub hidden_dropout_prob: f64,
    pub attention_probs_dropout_prob: f64,
    pub max_position_embeddings: usize,
    pub layer_norm_eps: f64,
    pub initializer_range: f64,
    pub position_embedding_type: PositionEmbeddingType,
}

impl EncoderConfig {
    fn base(vocab_size: usize, hidden: usize, layers: usize, heads: usize, eps: f64, max_pos: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: hidden,
            num_hidden_layers: layers,
            num_attention_heads: heads,
            intermediate_size: 4 * hidden,
            hidden_act: HiddenAct::Gelu,
            hidden_dropout_prob: 0.1,
            attention_probs_dropout_prob: 0.1,
            max_position_embeddings: max_pos,
            layer_norm_eps: eps,
            initializer_range: 0.02,
            position_embedding_type: PositionEmbeddingType::Absolute,
        }
    }

    /// Desk-scale general path: hidden 64, 2 layers, 4 heads, eps 1e-5.
    pub fn toy_general(vocab_size: usize) -> Self {
        Self::base(vocab_size, 64, 2, 4, 1e-5, 128)
    }

    /// Desk-scale scientific path: hidden 48, 2 layers, 4 heads, eps 1e-12.
    pub fn toy_scientific(vocab_size: usize) -> Self {
        Self::base(vocab_size, 48, 2, 4, 1e-12, 128)
    }

    /// roberta-large shape.
    pub fn roberta_large() -> Self {
        Self::base(50_265, 1024, 24, 16, 1e-5, 514)
    }

    /// scibert-scivocab shape.
    pub fn scibert_base() -> Self {
        Self::base(31_090, 768, 12, 12, 1e-12, 512)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_attention_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("encoder config", d));
        if self.vocab_size == 0 || self.hidden_size == 0 || self.intermediate_size == 0 {
            return bad("sizes must be positive".into());
        }
        if self.num_attention_heads == 0 || self.hidden_size % self.num_attention_heads != 0 {
            return bad(format!(
                "hidden_size {} not divisible by num_attention_heads {}",
                self.hidden_size, self.num_attention_heads
            ));
        }
        for (name, p) in [
            ("hidden_dropout_prob", self.hidden_dropout_prob),
            ("attention_probs_dropout_prob", self.attention_probs_dropout_prob),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        if !(self.initializer_range >= 0.0) || self.max_position_embeddings == 0 {
            return bad("initializer_range must be >= 0 and max_position_embeddings > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub query_w: Tensor,
    pub query_b: Tensor,
    pub key_w: Tensor,
    pub key_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub attn_out_w: Tensor,
    pub attn_out_b: Tensor,
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub ff_in_w: Tensor,
    pub ff_in_b: Tensor,
    pub ff_out_w: Tensor,
    pub ff_out_b: Tensor,
    pub ff_norm_gain: Tensor,
    pub ff_norm_bias: Tensor,
}

impl LayerWeights {
    fn fields(&self) -> [(&'static str, ParamKind, &Tensor); 16] {
        use ParamKind::*;
        [
            ("attention.query.weight", Weight, &self.query_w),
            ("attention.query.bias", Bias, &self.query_b),
            ("attention.key.weight", Weight, &self.key_w),
            ("attention.key.bias", Bias, &self.key_b),
            ("attention.value.weight", Weight, &self.value_w),
            ("attention.value.bias", Bias, &self.value_b),
            ("attention.output.weight", Weight, &self.attn_out_w),
            ("attention.output.bias", Bias, &self.attn_out_b),
            ("attention.norm.gain", Norm, &self.attn_norm_gain),
            ("attention.norm.bias", Norm, &self.attn_norm_bias),
            ("ffn.input.weight", Weight, &self.ff_in_w),
            ("ffn.input.bias", Bias, &self.ff_in_b),
            ("ffn.output.weight", Weight, &self.ff_out_w),
            ("ffn.output.bias", Bias, &self.ff_out_b),
            ("ffn.norm.gain", Norm, &self.ff_norm_gain),
            ("ffn.norm.bias", Norm, &self.ff_norm_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, ParamKind, &mut Tensor); 16] {
        use ParamKind::*;
        [
            ("attention.query.weight", Weight, &mut self.query_w),
            ("attention.query.bias", Bias, &mut self.query_b),
            ("attention.key.weight", Weight, &mut self.key_w),
            ("attention.key.bias", Bias, &mut self.key_b),
            ("attention.value.weight", Weight, &mut self.value_w),
            ("attention.value.bias", Bias, &mut self.value_b),
            ("attention.output.weight", Weight, &mut self.attn_out_w),
            ("attention.output.bias", Bias, &mut self.attn_out_b),
            ("attention.norm.gain", Norm, &mut self.attn_norm_gain),
            ("attention.norm.bias", Norm, &mut self.attn_norm_bias),
            ("ffn.input.weight", Weight, &mut self.ff_in_w),
            ("ffn.input.bias", Bias, &mut self.ff_in_b),
            ("ffn.output.weight", Weight, &mut self.ff_out_w),
            ("ffn.output.bias", Bias, &mut self.ff_out_b),
            ("ffn.norm.gain", Norm, &mut self.ff_norm_gain),
            ("ffn.norm.bias", Norm, &mut self.ff_norm_bias),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub pooler_w: Tensor,
    pub pooler_b: Tensor,
}

impl EncoderWeights {
    /// All-zero weights with the shapes `cfg` implies.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (h, i) = (cfg.hidden_size, cfg.intermediate_size);
        let layer = || LayerWeights {
            query_w: Tensor::zeros(&[h, h]),
            query_b: Tensor::zeros(&[h]),
            key_w: Tensor::zeros(&[h, h]),
            key_b: Tensor::zeros(&[h]),
            value_w: Tensor::zeros(&[h, h]),
            value_b: Tensor::zeros(&[h]),
            attn_out_w: Tensor::zeros(&[h, h]),
            attn_out_b: Tensor::zeros(&[h]),
            attn_norm_gain: Tensor::zeros(&[h]),
            attn_norm_bias: Tensor::zeros(&[h]),
            ff_in_w: Tensor::zeros(&[h, i]),
            ff_in_b: Tensor::zeros(&[i]),
            ff_out_w: Tensor::zeros(&[i, h]),
            ff_out_b: Tensor::zeros(&[h]),
            ff_norm_gain: Tensor::zeros(&[h]),
            ff_norm_bias: Tensor::zeros(&[h]),
        };
        Self {
            token_embedding: Tensor::zeros(&[cfg.vocab_size, h]),
            position_embedding: Tensor::zeros(&[cfg.max_position_embeddings, h]),
            layers: (0..cfg.num_hidden_layers).map(|_| layer()).collect(),
            pooler_w: Tensor::zeros(&[h, h]),
            pooler_b: Tensor::zeros(&[h]),
        }
    }

    /// Named parameters in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), ParamKind::Weight, &self.token_embedding),
            ("position_embedding".to_string(), ParamKind::Weight, &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.fields().into_iter().map(|(n, k, t)| (format!("layer{l}.{n}"), k, t)));
        }
        out.push(("pooler.weight".to_string(), ParamKind::Weight, &self.pooler_w));
        out.push(("pooler.bias".to_string(), ParamKind::Bias, &self.pooler_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), ParamKind::Weight, &mut self.token_embedding),
            ("position_embedding".to_string(), ParamKind::Weight, &mut self.position_embedding),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.fields_mut().into_iter().map(|(n, k, t)| (format!("layer{l}.{n}"), k, t)));
        }
        out.push(("pooler.weight".to_string(), ParamKind::Weight, &mut self.pooler_w));
        out.push(("pooler.bias".to_string(), ParamKind::Bias, &mut self.pooler_b));
        out
    }
}

/// Weights ~ N(0, initializer_range²), biases 0, layer-norm gains 1.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<EncoderWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.initializer_range).map_err(|e| Error::invalid("encoder config", e.to_string()))?;
    let mut w = EncoderWeights::zeros(cfg);
    for (_, kind, t) in w.tensors_mut() {
        match kind {
            ParamKind::Weight => t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
            ParamKind::Bias => {}
            ParamKind::Norm => {}
        }
    }
    for layer in &mut w.layers {
        layer.attn_norm_gain.data_mut().fill(1.0);
        layer.ff_norm_gain.data_mut().fill(1.0);
    }
    Ok(w)
}

/// Inverted-dropout scale factors, or `None` when dropout is inactive.
pub(crate) fn dropout_mask(n: usize, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Option<Vec<f64>> {
    let rng = rng.as_deref_mut()?;
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some((0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect())
}

pub(crate) fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax outputs, [heads × T × T], before dropout.
    pub(crate) probs: Vec<f64>,
    probs_mask: Option<Vec<f64>>,
    context: Vec<f64>,
    attn_mask: Option<Vec<f64>>,
    norm1_xhat: Vec<f64>,
    norm1_rstd: Vec<f64>,
    norm1_out: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
    ff_mask: Option<Vec<f64>>,
    norm2_xhat: Vec<f64>,
    norm2_rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderCache {
    ids: Vec<u32>,
    emb_mask: Option<Vec<f64>>,
    pub(crate) layers: Vec<LayerCache>,
    cls: Vec<f64>,
    pub(crate) pooled: Vec<f64>,
}

fn check_sequence(cfg: &EncoderConfig, seq: &TokenSequence) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::invalid("token sequence", "empty sequence"));
    }
    if seq.len() > cfg.max_position_embeddings {
        return Err(Error::invalid(
            "token sequence",
            format!("length {} exceeds max_position_embeddings {}", seq.len(), cfg.max_position_embeddings),
        ));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(Error::invalid(
            "token sequence",
            format!("id {bad} out of range for vocab_size {}", cfg.vocab_size),
        ));
    }
    Ok(())
}

/// Normalize rows of `x` in place and apply the affine part; returns
/// (x̂, 1/σ per row).
fn norm_forward(x: &mut [f64], h: usize, gain: &Tensor, bias: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rstd = Vec::with_capacity(x.len() / h);
    for row in x.chunks_mut(h) {
        rstd.push(normalize_row(row, eps));
    }
    let xhat = x.to_vec();
    for row in x.chunks_mut(h) {
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    (xhat, rstd)
}

/// Overwrites `d` (gradient w.r.t. the norm output) with the gradient
/// w.r.t. its input, accumulating gain/bias gradients.
fn norm_backward(d: &mut [f64], h: usize, xhat: &[f64], rstd: &[f64], gain: &Tensor, dgain: &mut Tensor, dbias: &mut Tensor) {
    let n = h as f64;
    for ((drow, xrow), &rs) in d.chunks_mut(h).zip(xhat.chunks(h)).zip(rstd) {
        let mut mean_dx = 0.0;
        let mut mean_dx_x = 0.0;
        for j in 0..h {
            dgain.data_mut()[j] += drow[j] * xrow[j];
            dbias.data_mut()[j] += drow[j];
            drow[j] *= gain.data()[j];
            mean_dx += drow[j];
            mean_dx_x += drow[j] * xrow[j];
        }
        mean_dx /= n;
        mean_dx_x /= n;
        for j in 0..h {
            drow[j] = rs * (drow[j] - mean_dx - xrow[j] * mean_dx_x);
        }
    }
}

fn head_slice(x: &[f64], t: usize, h: usize, head: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * d);
    for r in 0..t {
        out.extend_from_slice(&x[r * h + head * d..r * h + (head + 1) * d]);
    }
    out
}

fn add_head_slice(dst: &mut [f64], src: &[f64], t: usize, h: usize, head: usize, d: usize) {
    for r in 0..t {
        for (a, b) in dst[r * h + head * d..r * h + (head + 1) * d].iter_mut().zip(&src[r * d..(r + 1) * d]) {
            *a += b;
        }
    }
}

impl EncoderWeights {
    pub(crate) fn forward(
        &self,
        cfg: &EncoderConfig,
        seq: &TokenSequence,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<EncoderCache> {
        check_sequence(cfg, seq)?;
        let (t, h) = (seq.len(), cfg.hidden_size);
        let (heads, d) = (cfg.num_attention_heads, cfg.head_dim());
        let scale = 1.0 / (d as f64).sqrt();

        let mut x = Vec::with_capacity(t * h);
        for (pos, &id) in seq.ids.iter().enumerate() {
            let tok = self.token_embedding.row(id as usize);
            let p = self.position_embedding.row(pos);
            x.extend(tok.iter().zip(p).map(|(a, b)| a + b));
        }
        let emb_mask = dropout_mask(t * h, cfg.hidden_dropout_prob, &mut rng);
        apply_mask(&mut x, &emb_mask);

        let mut layers = Vec::with_capacity(self.layers.len());
        for lw in &self.layers {
            let q = linear(&x, t, &lw.query_w, &lw.query_b);
            let k = linear(&x, t, &lw.key_w, &lw.key_b);
            let v = linear(&x, t, &lw.value_w, &lw.value_b);
            let mut probs = vec![0.0; heads * t * t];
            let mut context = vec![0.0; t * h];
            let probs_mask = dropout_mask(heads * t * t, cfg.attention_probs_dropout_prob, &mut rng);
            for head in 0..heads {
                let qh = head_slice(&q, t, h, head, d);
                let kh = head_slice(&k, t, h, head, d);
                let vh = head_slice(&v, t, h, head, d);
                let scores = &mut probs[head * t * t..(head + 1) * t * t];
                gemm(t, d, t, &qh, false, &kh, true, 0.0, scores);
                for row in scores.chunks_mut(t) {
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(row);
                }
                let mut attn = scores.to_vec();
                if let Some(m) = &probs_mask {
                    attn.iter_mut().zip(&m[head * t * t..(head + 1) * t * t]).for_each(|(a, s)| *a *= s);
                }
                let mut ch = vec![0.0; t * d];
                gemm(t, t, d, &attn, false, &vh, false, 0.0, &mut ch);
                add_head_slice(&mut context, &ch, t, h, head, d);
            }
            let mut attn_out = linear(&context, t, &lw.attn_out_w, &lw.attn_out_b);
            let attn_mask = dropout_mask(t * h, cfg.hidden_dropout_prob, &mut rng);
            apply_mask(&mut attn_out, &attn_mask);
            let mut y1: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
            let (norm1_xhat, norm1_rstd) = norm_forward(&mut y1, h, &lw.attn_norm_gain, &lw.attn_norm_bias, cfg.layer_norm_eps);

            let ff_pre = linear(&y1, t, &lw.ff_in_w, &lw.ff_in_b);
            let ff_act: Vec<f64> = ff_pre.iter().map(|&z| gelu_scalar(z)).collect();
            let mut ff_out = linear(&ff_act, t, &lw.ff_out_w, &lw.ff_out_b);
            let ff_mask = dropout_mask(t * h, cfg.hidden_dropout_prob, &mut rng);
            apply_mask(&mut ff_out, &ff_mask);
            let mut y2: Vec<f64> = y1.iter().zip(&ff_out).map(|(a, b)| a + b).collect();
            let (norm2_xhat, norm2_rstd) = norm_forward(&mut y2, h, &lw.ff_norm_gain, &lw.ff_norm_bias, cfg.layer_norm_eps);

            let input = std::mem::replace(&mut x, y2);
            layers.push(LayerCache {
                input,
                q,
                k,
                v,
                probs,
                probs_mask,
                context,
                attn_mask,
                norm1_xhat,
                norm1_rstd,
                norm1_out: y1,
                ff_pre,
                ff_act,
                ff_mask,
                norm2_xhat,
                norm2_rstd,
            });
        }
        let cls = x[..h].to_vec();
        let pooled: Vec<f64> = linear(&cls, 1, &self.pooler_w, &self.pooler_b).into_iter().map(f64::tanh).collect();
        if !pooled.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(EncoderCache {
            ids: seq.ids.clone(),
            emb_mask,
            layers,
            cls,
            pooled,
        })
    }

    /// Accumulate parameter gradients into `grads` given the gradient of the
    /// pooled output.
    pub(crate) fn backward(&self, cfg: &EncoderConfig, cache: &EncoderCache, d_pooled: &[f64], grads: &mut EncoderWeights) {
        let (t, h) = (cache.ids.len(), cfg.hidden_size);
        let (heads, d) = (cfg.num_attention_heads, cfg.head_dim());
        let scale = 1.0 / (d as f64).sqrt();

        let dz: Vec<f64> = d_pooled.iter().zip(&cache.pooled).map(|(g, p)| g * (1.0 - p * p)).collect();
        let mut dcls = vec![0.0; h];
        linear_backward(&cache.cls, &dz, 1, &self.pooler_w, &mut grads.pooler_w, &mut grads.pooler_b, Some(&mut dcls));
        let mut dx = vec![0.0; t * h];
        dx[..h].copy_from_slice(&dcls);

        for ((lw, lg), lc) in self.layers.iter().zip(grads.layers.iter_mut()).zip(&cache.layers).rev() {
            // ffn sublayer
            norm_backward(&mut dx, h, &lc.norm2_xhat, &lc.norm2_rstd, &lw.ff_norm_gain, &mut lg.ff_norm_gain, &mut lg.ff_norm_bias);
            let mut d_ff_out = dx.clone();
            apply_mask(&mut d_ff_out, &lc.ff_mask);
            let mut d_act = vec![0.0; t * cfg.intermediate_size];
            linear_backward(&lc.ff_act, &d_ff_out, t, &lw.ff_out_w, &mut lg.ff_out_w, &mut lg.ff_out_b, Some(&mut d_act));
            d_act.iter_mut().zip(&lc.ff_pre).for_each(|(g, &z)| *g *= gelu_grad_scalar(z));
            let mut d_y1 = vec![0.0; t * h];
            linear_backward(&lc.norm1_out, &d_act, t, &lw.ff_in_w, &mut lg.ff_in_w, &mut lg.ff_in_b, Some(&mut d_y1));
            dx.iter_mut().zip(&d_y1).for_each(|(a, b)| *a += b);

            // attention sublayer
            norm_backward(&mut dx, h, &lc.norm1_xhat, &lc.norm1_rstd, &lw.attn_norm_gain, &mut lg.attn_norm_gain, &mut lg.attn_norm_bias);
            let mut d_attn_out = dx.clone();
            apply_mask(&mut d_attn_out, &lc.attn_mask);
            let mut d_context = vec![0.0; t * h];
            linear_backward(&lc.context, &d_attn_out, t, &lw.attn_out_w, &mut lg.attn_out_w, &mut lg.attn_out_b, Some(&mut d_context));

            let mut dq = vec![0.0; t * h];
            let mut dk = vec![0.0; t * h];
            let mut dv = vec![0.0; t * h];
            for head in 0..heads {
                let span = head * t * t..(head + 1) * t * t;
                let probs = &lc.probs[span.clone()];
                let qh = head_slice(&lc.q, t, h, head, d);
                let kh = head_slice(&lc.k, t, h, head, d);
                let vh = head_slice(&lc.v, t, h, head, d);
                let dch = head_slice(&d_context, t, h, head, d);
                let mut attn = probs.to_vec();
                if let Some(m) = &lc.probs_mask {
                    attn.iter_mut().zip(&m[span.clone()]).for_each(|(a, s)| *a *= s);
                }
                let mut dvh = vec![0.0; t * d];
                gemm(t, t, d, &attn, true, &dch, false, 0.0, &mut dvh);
                let mut dattn = vec![0.0; t * t];
                gemm(t, d, t, &dch, false, &vh, true, 0.0, &mut dattn);
                if let Some(m) = &lc.probs_mask {
                    dattn.iter_mut().zip(&m[span]).for_each(|(a, s)| *a *= s);
                }
                for (drow, prow) in dattn.chunks_mut(t).zip(probs.chunks(t)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    drow.iter_mut().zip(prow).for_each(|(g, p)| *g = p * (*g - dot) * scale);
                }
                let mut dqh = vec![0.0; t * d];
                gemm(t, t, d, &dattn, false, &kh, false, 0.0, &mut dqh);
                let mut dkh = vec![0.0; t * d];
                gemm(t, t, d, &dattn, true, &qh, false, 0.0, &mut dkh);
                add_head_slice(&mut dq, &dqh, t, h, head, d);
                add_head_slice(&mut dk, &dkh, t, h, head, d);
                add_head_slice(&mut dv, &dvh, t, h, head, d);
            }
            let mut tmp = vec![0.0; t * h];
            for (dproj, w, gw, gb) in [
                (&dq, &lw.query_w, &mut lg.query_w, &mut lg.query_b),
                (&dk, &lw.key_w, &mut lg.key_w, &mut lg.key_b),
                (&dv, &lw.value_w, &mut lg.value_w, &mut lg.value_b),
            ] {
                linear_backward(&lc.input, dproj, t, w, gw, gb, Some(&mut tmp));
                dx.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            }
        }

        apply_mask(&mut dx, &cache.emb_mask);
        for (pos, (&id, drow)) in cache.ids.iter().zip(dx.chunks(h)).enumerate() {
            let tok = &mut grads.token_embedding.data_mut()[id as usize * h..(id as usize + 1) * h];
            tok.iter_mut().zip(drow).for_each(|(a, b)| *a += b);
            let p = &mut grads.position_embedding.data_mut()[pos * h..(pos + 1) * h];
            p.iter_mut().zip(drow).for_each(|(a, b)| *a += b);
        }
    }
}

/// Pooled representation of `seq`. Dropout is active only when `train_rng`
/// is given, and then draws exclusively from it.
pub fn encode(
    weights: &EncoderWeights,
    cfg: &EncoderConfig,
    seq: &TokenSequence,
    train_rng: Option<&mut dyn RngCore>,
) -> Result<Vec<f64>> {
    Ok(weights.forward(cfg, seq, train_rng)?.pooled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_hidden_layers: layers,
            max_position_embeddings: 16,
            ..EncoderConfig::toy_general(20)
        }
    }

    #[test]
    fn config_validation() {
        assert_eq!(EncoderConfig::toy_general(10).head_dim(), 16);
        assert!(EncoderConfig::toy_scientific(10).validate().is_ok());
        let bad = EncoderConfig {
            num_attention_heads: 5,
            ..EncoderConfig::toy_general(10)
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            hidden_dropout_prob: 1.0,
            ..EncoderConfig::toy_general(10)
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            layer_norm_eps: 0.0,
            ..EncoderConfig::toy_general(10)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_configured_variance() {
        let cfg = EncoderConfig {
            vocab_size: 2000,
            ..EncoderConfig::toy_general(2000)
        };
        let a = init_encoder(&cfg, 3).unwrap();
        assert_eq!(a, init_encoder(&cfg, 3).unwrap());
        assert_ne!(a, init_encoder(&cfg, 4).unwrap());
        let vals = a.token_embedding.data();
        assert!(vals.len() >= 100_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var - 0.0004).abs() < 0.1 * 0.0004, "variance {var}");
        assert!(a.layers[0].attn_norm_gain.data().iter().all(|&g| g == 1.0));
        assert!(a.layers[0].query_b.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic_and_shaped() {
        let cfg = tiny(2);
        let w = init_encoder(&cfg, 0).unwrap();
        let seq = TokenSequence::new(vec![1, 5, 7, 2]);
        let a = encode(&w, &cfg, &seq, None).unwrap();
        let b = encode(&w, &cfg, &seq, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.hidden_size);
        assert!(a.iter().all(|v| v.is_finite()));

        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let t1 = encode(&w, &cfg, &seq, Some(&mut r1)).unwrap();
        let t2 = encode(&w, &cfg, &seq, Some(&mut r2)).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, a);
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let cfg = tiny(1);
        let w = init_encoder(&cfg, 9).unwrap();
        let seq = TokenSequence::new(vec![3]);
        let cache = w.forward(&cfg, &seq, None).unwrap();
        let lc = &cache.layers[0];
        assert!(lc.probs.iter().all(|&p| p == 1.0));
        let x: Vec<f64> = w
            .token_embedding
            .row(3)
            .iter()
            .zip(w.position_embedding.row(0))
            .map(|(a, b)| a + b)
            .collect();
        let v = linear(&x, 1, &w.layers[0].value_w, &w.layers[0].value_b);
        for (c, e) in lc.context.iter().zip(&v) {
            assert!((c - e).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_positions_matter() {
        let cfg = tiny(2);
        let w = init_encoder(&cfg, 1).unwrap();
        let seq = TokenSequence::new(vec![1, 4, 9, 9, 12, 2]);
        let cache = w.forward(&cfg, &seq, None).unwrap();
        for lc in &cache.layers {
            for row in lc.probs.chunks(seq.len()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let permuted = TokenSequence::new(vec![1, 9, 4, 12, 9, 2]);
        assert_ne!(cache.pooled, encode(&w, &cfg, &permuted, None).unwrap());
    }

    #[test]
    fn rejects_bad_sequences() {
        let cfg = tiny(1);
        let w = init_encoder(&cfg, 0).unwrap();
        assert!(encode(&w, &cfg, &TokenSequence::new(vec![]), None).is_err());
        assert!(encode(&w, &cfg, &TokenSequence::new(vec![20]), None).is_err());
        assert!(encode(&w, &cfg, &TokenSequence::new(vec![1; 17]), None).is_err());
    }

    #[test]
    fn independent_instances_coexist() {
        let a_cfg = EncoderConfig::toy_general(30);
        let b_cfg = EncoderConfig::toy_scientific(40);
        let a = init_encoder(&a_cfg, 0).unwrap();
        let b = init_encoder(&b_cfg, 0).unwrap();
        let seq = TokenSequence::new(vec![1, 2, 3]);
        assert_eq!(encode(&a, &a_cfg, &seq, None).unwrap().len(), 64);
        assert_eq!(encode(&b, &b_cfg, &seq, None).unwrap().len(), 48);
        assert!(encode(&a, &a_cfg, &TokenSequence::new(vec![35]), None).is_err());
        assert!(encode(&b, &b_cfg, &TokenSequence::new(vec![35]), None).is_ok());
    }
}
