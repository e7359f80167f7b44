//! The dual-path classifier: two encoders, the fusion head, and the shared
//! parameter container used for gradients, optimizers and checkpoints.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dictionary, PairExample, SentenceSample};
use crate::encoder::{init_encoder, EncoderCache, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::fusion::{fuse, init_fusion, FusionConfig, FusionWeights, HeadCache};
use crate::seed;
use crate::tensor::Tensor;
use crate::tokenize::{assemble_pair, bpe_train, wp_build_vocab, BpeVocab, TokenSequence, WordPieceVocab};

/// Role of a parameter tensor, used to select the regularized set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

/// Which encoder paths feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    #[default]
    Dual,
    /// Byte-level BPE path only.
    AOnly,
    /// WordPiece path only.
    BOnly,
}

impl PathMode {
    pub fn uses_a(self) -> bool {
        self != PathMode::BOnly
    }

    pub fn uses_b(self) -> bool {
        self != PathMode::AOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub paths: PathMode,
    pub encoder_a: EncoderConfig,
    pub encoder_b: EncoderConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    /// Desk-scale defaults for the given vocabulary sizes.
    pub fn toy(vocab_a: usize, vocab_b: usize, paths: PathMode) -> Self {
        let encoder_a = EncoderConfig::toy_general(vocab_a);
        let encoder_b = EncoderConfig::toy_scientific(vocab_b);
        let mut cfg = Self {
            paths,
            fusion: FusionConfig::new(0),
            encoder_a,
            encoder_b,
        };
        cfg.fusion.input_dim = cfg.expected_input_dim();
        cfg
    }

    pub fn expected_input_dim(&self) -> usize {
        let a = if self.paths.uses_a() { self.encoder_a.hidden_size } else { 0 };
        let b = if self.paths.uses_b() { self.encoder_b.hidden_size } else { 0 };
        a + b
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.uses_a() {
            self.encoder_a.validate()?;
        }
        if self.paths.uses_b() {
            self.encoder_b.validate()?;
        }
        self.fusion.validate()?;
        let expected = self.expected_input_dim();
        if self.fusion.input_dim != expected {
            return Err(Error::invalid(
                "model config",
                format!("fusion input_dim {} != sum of active hidden sizes {expected}", self.fusion.input_dim),
            ));
        }
        Ok(())
    }
}

/// Every trainable tensor of the model (θ). Also used, zero-filled, as the
/// gradient and optimizer-moment containers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub a: Option<EncoderWeights>,
    pub b: Option<EncoderWeights>,
    pub head: FusionWeights,
}

impl ParamSet {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            a: cfg.paths.uses_a().then(|| EncoderWeights::zeros(&cfg.encoder_a)),
            b: cfg.paths.uses_b().then(|| EncoderWeights::zeros(&cfg.encoder_b)),
            head: FusionWeights::zeros(&cfg.fusion),
        }
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            a: match cfg.paths.uses_a() {
                true => Some(init_encoder(&cfg.encoder_a, seed::derive_seed(seed, "init/a"))?),
                false => None,
            },
            b: match cfg.paths.uses_b() {
                true => Some(init_encoder(&cfg.encoder_b, seed::derive_seed(seed, "init/b"))?),
                false => None,
            },
            head: init_fusion(&cfg.fusion, seed::derive_seed(seed, "init/head"))?,
        })
    }

    /// Named tensors in a fixed order (`a.*`, `b.*`, `head.*`).
    pub fn named(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, enc) in [("a", &self.a), ("b", &self.b)] {
            if let Some(e) = enc {
                out.extend(e.tensors().into_iter().map(|(n, k, t)| (format!("{prefix}.{n}"), k, t)));
            }
        }
        out.extend(self.head.tensors().into_iter().map(|(n, k, t)| (format!("head.{n}"), k, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, enc) in [("a", &mut self.a), ("b", &mut self.b)] {
            if let Some(e) = enc {
                out.extend(e.tensors_mut().into_iter().map(|(n, k, t)| (format!("{prefix}.{n}"), k, t)));
            }
        }
        out.extend(self.head.tensors_mut().into_iter().map(|(n, k, t)| (format!("head.{n}"), k, t)));
        out
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ParamSet) {
        for ((_, _, dst), (_, _, src)) in self.named_mut().into_iter().zip(other.named()) {
            dst.data_mut().iter_mut().zip(src.data()).for_each(|(a, b)| *a += b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, _, t)| t.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.named().iter().map(|(_, _, t)| t.sum_squares()).sum::<f64>().sqrt()
    }
}

/// A pair tokenized for both paths.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedPair {
    pub a: TokenSequence,
    pub b: TokenSequence,
    pub label: u8,
}

/// The two vocabularies plus the sequence length limits of each path.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizers {
    pub bpe: BpeVocab,
    pub wordpiece: WordPieceVocab,
    pub max_len_a: usize,
    pub max_len_b: usize,
}

impl Tokenizers {
    pub fn encode(&self, tokens: &[String], acronym_index: usize, long_form: &str, label: u8) -> Result<EncodedPair> {
        Ok(EncodedPair {
            a: assemble_pair(&self.bpe, tokens, acronym_index, long_form, self.max_len_a)?,
            b: assemble_pair(&self.wordpiece, tokens, acronym_index, long_form, self.max_len_b)?,
            label,
        })
    }

    pub fn encode_pair(&self, p: &PairExample) -> Result<EncodedPair> {
        self.encode(&p.tokens, p.acronym_index, &p.candidate_long_form, p.label)
    }

    /// Train both vocabularies on the sentences of `samples` plus every long
    /// form in `dict`.
    pub fn train(samples: &[SentenceSample], dict: &Dictionary, opts: &TokenizerOptions) -> Result<Self> {
        let lines = tokenizer_corpus(samples, dict);
        Ok(Self {
            bpe: bpe_train(&bpe_word_corpus(&lines), opts.bpe_merges)?,
            wordpiece: wp_build_vocab(&lines, opts.wordpiece_size)?,
            max_len_a: opts.max_len,
            max_len_b: opts.max_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerOptions {
    pub bpe_merges: usize,
    pub wordpiece_size: usize,
    /// Maximum assembled pair length on either path.
    pub max_len: usize,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        Self {
            bpe_merges: 1024,
            wordpiece_size: 2048,
            max_len: 64,
        }
    }
}

/// One line per sentence and one per dictionary long form.
pub fn tokenizer_corpus(samples: &[SentenceSample], dict: &Dictionary) -> Vec<String> {
    let mut lines: Vec<String> = samples.iter().map(|s| s.tokens.join(" ")).collect();
    lines.extend(dict.iter().flat_map(|(_, lfs)| lfs.iter().cloned()));
    lines
}

/// Byte-level BPE sees each word as its own sequence with a leading space,
/// matching how pairs are encoded.
pub fn bpe_word_corpus(lines: &[String]) -> Vec<String> {
    lines
        .iter()
        .flat_map(|l| l.split_whitespace().map(|w| format!(" {w}")))
        .collect()
}

/// Dropout streams for one example. Each component draws from its own
/// stream so that any of them can be replayed in isolation.
pub struct DropoutRngs {
    pub a: Box<dyn RngCore + Send>,
    pub b: Box<dyn RngCore + Send>,
    pub head: Box<dyn RngCore + Send>,
}

impl DropoutRngs {
    pub fn for_example(seed: u64, epoch: u64, position: u64) -> Self {
        Self {
            a: Box::new(seed::rng_indexed(seed, "dropout/a", &[epoch, position])),
            b: Box::new(seed::rng_indexed(seed, "dropout/b", &[epoch, position])),
            head: Box::new(seed::rng_indexed(seed, "dropout/head", &[epoch, position])),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub(crate) a: Option<EncoderCache>,
    pub(crate) b: Option<EncoderCache>,
    pub(crate) head: HeadCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualPathModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl DualPathModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamSet::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub(crate) fn encode_a(&self, seq: &TokenSequence, rng: Option<&mut dyn RngCore>) -> Result<Option<EncoderCache>> {
        match &self.params.a {
            Some(w) => w.forward(&self.config.encoder_a, seq, rng).map(Some),
            None => Ok(None),
        }
    }

    pub(crate) fn encode_b(&self, seq: &TokenSequence, rng: Option<&mut dyn RngCore>) -> Result<Option<EncoderCache>> {
        match &self.params.b {
            Some(w) => w.forward(&self.config.encoder_b, seq, rng).map(Some),
            None => Ok(None),
        }
    }

    pub(crate) fn head_from(
        &self,
        a: &Option<EncoderCache>,
        b: &Option<EncoderCache>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<HeadCache> {
        let empty: &[f64] = &[];
        let ha = a.as_ref().map_or(empty, |c| &c.pooled);
        let hb = b.as_ref().map_or(empty, |c| &c.pooled);
        self.head_from_pooled(ha, hb, rng)
    }

    pub(crate) fn head_from_pooled(&self, ha: &[f64], hb: &[f64], rng: Option<&mut dyn RngCore>) -> Result<HeadCache> {
        let h = fuse(ha, hb, self.config.fusion.input_dim)?;
        self.params.head.forward(&self.config.fusion, &h, rng)
    }

    pub(crate) fn forward(&self, x: &EncodedPair, rngs: Option<&mut DropoutRngs>) -> Result<ForwardCache> {
        let (ra, rb, rh): (Option<&mut dyn RngCore>, Option<&mut dyn RngCore>, Option<&mut dyn RngCore>) = match rngs {
            Some(r) => (Some(r.a.as_mut()), Some(r.b.as_mut()), Some(r.head.as_mut())),
            None => (None, None, None),
        };
        let a = self.encode_a(&x.a, ra)?;
        let b = self.encode_b(&x.b, rb)?;
        let head = self.head_from(&a, &b, rh)?;
        Ok(ForwardCache { a, b, head })
    }

    pub(crate) fn backward(&self, cache: &ForwardCache, d_logit: f64, grads: &mut ParamSet) {
        let dh = self.params.head.backward(&cache.head, d_logit, &mut grads.head);
        let split = cache.a.as_ref().map_or(0, |c| c.pooled.len());
        if let (Some(w), Some(c), Some(g)) = (&self.params.a, &cache.a, &mut grads.a) {
            w.backward(&self.config.encoder_a, c, &dh[..split], g);
        }
        if let (Some(w), Some(c), Some(g)) = (&self.params.b, &cache.b, &mut grads.b) {
            w.backward(&self.config.encoder_b, c, &dh[split..], g);
        }
    }

    /// Probability that the pair's candidate is the correct long form
    /// (inference mode, no dropout).
    pub fn predict_proba(&self, x: &EncodedPair) -> Result<f64> {
        Ok(self.forward(x, None)?.head.prob)
    }

    /// λ·‖θ‖² over the configured regularized set.
    pub fn regularizer(&self) -> f64 {
        let set = self.config.fusion.regularize_set;
        let sq: f64 = self
            .params
            .named()
            .iter()
            .filter(|(_, k, _)| set.includes(*k))
            .map(|(_, _, t)| t.sum_squares())
            .sum();
        self.config.fusion.lambda * sq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_shapes() {
        let cfg = ModelConfig::toy(300, 200, PathMode::Dual);
        assert_eq!(cfg.fusion.input_dim, 112);
        cfg.validate().unwrap();
        let a_only = ModelConfig::toy(300, 200, PathMode::AOnly);
        assert_eq!(a_only.fusion.input_dim, 64);
        let m = DualPathModel::new(a_only, 0).unwrap();
        assert!(m.params.b.is_none());
        let mut bad = ModelConfig::toy(300, 200, PathMode::Dual);
        bad.fusion.input_dim = 100;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let m = DualPathModel::new(ModelConfig::toy(300, 200, PathMode::Dual), 1).unwrap();
        let names: Vec<String> = m.params.named().into_iter().map(|(n, _, _)| n).collect();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names[0], "a.token_embedding");
        assert_eq!(names.last().unwrap(), "head.regression.bias");
        assert!(names.iter().any(|n| n == "b.layer1.ffn.norm.gain"));
    }

    #[test]
    fn forward_probability_in_range() {
        let m = DualPathModel::new(ModelConfig::toy(300, 200, PathMode::Dual), 1).unwrap();
        let x = EncodedPair {
            a: TokenSequence::new(vec![1, 40, 4, 50, 5, 2, 60, 2]),
            b: TokenSequence::new(vec![2, 30, 5, 31, 6, 3, 32, 3]),
            label: 1,
        };
        let p = m.predict_proba(&x).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(p, m.predict_proba(&x).unwrap());
    }
}
