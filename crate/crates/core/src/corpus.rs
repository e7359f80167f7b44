//! Dataset ingestion, validation, binary pair construction, corpus
//! statistics and a synthetic corpus generator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::seed;

/// Acronym → ordered candidate long forms.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dictionary {
    entries: BTreeMap<String, Vec<String>>,
}

impl Dictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert an acronym, checking the dictionary invariants.
    pub fn insert(&mut self, acronym: impl Into<String>, long_forms: Vec<String>) -> Result<()> {
        let acronym = acronym.into();
        validate_entry(&acronym, &long_forms)?;
        self.entries.insert(acronym, long_forms);
        Ok(())
    }

    pub fn candidates(&self, acronym: &str) -> Option<&[String]> {
        self.entries.get(acronym).map(Vec::as_slice)
    }

    pub fn contains(&self, acronym: &str) -> bool {
        self.entries.contains_key(acronym)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Canonical JSON (sorted acronyms, candidate order kept, trailing newline).
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("string map serializes");
        s.push('\n');
        s
    }
}

fn validate_entry(acronym: &str, long_forms: &[String]) -> Result<()> {
    if acronym.is_empty() {
        return Err(Error::invalid("dictionary", "empty acronym"));
    }
    if long_forms.is_empty() {
        return Err(Error::invalid(
            "dictionary",
            format!("acronym {acronym:?} has no long forms"),
        ));
    }
    let mut seen = HashSet::new();
    for lf in long_forms {
        if !seen.insert(lf.as_str()) {
            return Err(Error::invalid(
                "dictionary",
                format!("duplicate long form {lf:?} for acronym {acronym:?}"),
            ));
        }
    }
    Ok(())
}

pub fn load_dictionary(bytes: &[u8]) -> Result<Dictionary> {
    let raw: BTreeMap<String, Vec<String>> =
        serde_json::from_slice(bytes).map_err(|e| Error::malformed("dictionary", e.to_string()))?;
    let mut dict = Dictionary::new();
    for (acr, lfs) in raw {
        dict.insert(acr, lfs)?;
    }
    Ok(dict)
}

/// One annotated sentence: tokens, the acronym position and (optionally)
/// the gold long form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSample {
    pub id: String,
    pub tokens: Vec<String>,
    pub acronym_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long_form: Option<String>,
}

impl SentenceSample {
    pub fn acronym(&self) -> &str {
        &self.tokens[self.acronym_index]
    }

    pub fn validate(&self, dict: &Dictionary, require_gold: bool) -> Result<()> {
        if self.acronym_index >= self.tokens.len() {
            return Err(Error::invalid(
                "sample",
                format!(
                    "{}: acronym_index {} out of range for {} tokens",
                    self.id,
                    self.acronym_index,
                    self.tokens.len()
                ),
            ));
        }
        let acr = self.acronym();
        let cands = dict
            .candidates(acr)
            .ok_or_else(|| Error::invalid("sample", format!("{}: token {acr:?} is not a known acronym", self.id)))?;
        match &self.long_form {
            Some(lf) if !cands.contains(lf) => Err(Error::invalid(
                "sample",
                format!("{}: long form {lf:?} is not a candidate of {acr:?}", self.id),
            )),
            None if require_gold => Err(Error::invalid(
                "sample",
                format!("{}: missing gold long form", self.id),
            )),
            _ => Ok(()),
        }
    }
}

/// Maps canonical sample field names to the names used in a source file,
/// e.g. `{"acronym_index": "acronym", "long_form": "expansion"}`.
/// Unmapped fields keep their canonical name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMapping {
    #[serde(flatten)]
    pub fields: BTreeMap<String, String>,
}

const CANONICAL_FIELDS: [&str; 4] = ["id", "tokens", "acronym_index", "long_form"];

impl FieldMapping {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: FieldMapping =
            serde_json::from_slice(bytes).map_err(|e| Error::malformed("field mapping", e.to_string()))?;
        for k in m.fields.keys() {
            if !CANONICAL_FIELDS.contains(&k.as_str()) {
                return Err(Error::invalid("field mapping", format!("unknown canonical field {k:?}")));
            }
        }
        Ok(m)
    }

    fn source<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.fields.get(canonical).map(String::as_str).unwrap_or(canonical)
    }
}

pub fn load_samples(bytes: &[u8], dict: &Dictionary, require_gold: bool) -> Result<Vec<SentenceSample>> {
    load_samples_mapped(bytes, dict, require_gold, &FieldMapping::default())
}

/// Load samples whose field names are given by `mapping`.
pub fn load_samples_mapped(
    bytes: &[u8],
    dict: &Dictionary,
    require_gold: bool,
    mapping: &FieldMapping,
) -> Result<Vec<SentenceSample>> {
    let raw: Vec<Value> =
        serde_json::from_slice(bytes).map_err(|e| Error::malformed("samples", e.to_string()))?;
    let mut out = Vec::with_capacity(raw.len());
    for (i, rec) in raw.into_iter().enumerate() {
        let sample = sample_from_value(rec, mapping)
            .map_err(|detail| Error::malformed("samples", format!("record {i}: {detail}")))?;
        sample.validate(dict, require_gold)?;
        out.push(sample);
    }
    Ok(out)
}

fn sample_from_value(rec: Value, mapping: &FieldMapping) -> std::result::Result<SentenceSample, String> {
    let Value::Object(mut obj) = rec else {
        return Err("expected an object".into());
    };
    let mut take = |field: &str| obj.remove(mapping.source(field));
    let id = match take("id") {
        Some(Value::String(s)) => s,
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err("id must be a string".into()),
        None => return Err("missing id".into()),
    };
    let tokens = match take("tokens") {
        Some(Value::Array(a)) => a
            .into_iter()
            .map(|t| match t {
                Value::String(s) => Ok(s),
                _ => Err(format!("{id}: tokens must be strings")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?,
        _ => return Err(format!("{id}: missing or non-array tokens")),
    };
    let acronym_index = match take("acronym_index") {
        Some(Value::Number(n)) => n
            .as_u64()
            .ok_or_else(|| format!("{id}: acronym_index must be a non-negative integer"))?
            as usize,
        _ => return Err(format!("{id}: missing acronym_index")),
    };
    let long_form = match take("long_form") {
        Some(Value::String(s)) => Some(s),
        Some(Value::Null) | None => None,
        Some(_) => return Err(format!("{id}: long_form must be a string")),
    };
    Ok(SentenceSample {
        id,
        tokens,
        acronym_index,
        long_form,
    })
}

/// Canonical JSON for a sample list.
pub fn samples_to_json(samples: &[SentenceSample]) -> String {
    let mut s = serde_json::to_string_pretty(samples).expect("samples serialize");
    s.push('\n');
    s
}

/// A (sentence, candidate) pair with its binary label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub sample_id: String,
    pub tokens: Vec<String>,
    pub acronym_index: usize,
    pub candidate_long_form: String,
    pub label: u8,
}

/// How positive pairs are replicated when upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// One pair per candidate.
    #[default]
    Off,
    /// Positive replicated to k copies (k = candidate count): 2k−1 pairs.
    ToCandidateCount,
    /// Positive replicated to k−1 copies, matching the negatives: 2k−2 pairs
    /// (k when k = 1).
    Balanced,
}

impl Upsample {
    fn positive_copies(self, k: usize) -> usize {
        match self {
            Upsample::Off => 1,
            Upsample::ToCandidateCount => k,
            Upsample::Balanced => (k - 1).max(1),
        }
    }
}

pub fn build_pairs(samples: &[SentenceSample], dict: &Dictionary, upsample: Upsample) -> Result<Vec<PairExample>> {
    let mut out = Vec::new();
    for s in samples {
        let gold = s
            .long_form
            .as_ref()
            .ok_or_else(|| Error::invalid("sample", format!("{}: missing gold long form", s.id)))?;
        let acr = s
            .tokens
            .get(s.acronym_index)
            .ok_or_else(|| Error::invalid("sample", format!("{}: acronym_index out of range", s.id)))?;
        let cands = dict
            .candidates(acr)
            .ok_or_else(|| Error::UnknownAcronym(acr.clone()))?;
        if !cands.contains(gold) {
            return Err(Error::invalid(
                "sample",
                format!("{}: long form {gold:?} is not a candidate of {acr:?}", s.id),
            ));
        }
        let pair = |lf: &str, label: u8| PairExample {
            sample_id: s.id.clone(),
            tokens: s.tokens.clone(),
            acronym_index: s.acronym_index,
            candidate_long_form: lf.to_string(),
            label,
        };
        for c in cands {
            out.push(pair(c, u8::from(c == gold)));
        }
        for _ in 1..upsample.positive_copies(cands.len()) {
            out.push(pair(gold, 1));
        }
    }
    Ok(out)
}

pub fn pairs_to_json(pairs: &[PairExample]) -> String {
    let mut s = serde_json::to_string_pretty(pairs).expect("pairs serialize");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Distinct dictionary acronyms attested in the samples' acronym slots.
    pub num_acronyms: usize,
    /// Entries in the dictionary, attested or not.
    pub num_dictionary_acronyms: usize,
    pub avg_long_forms_per_acronym: f64,
    /// Fraction of sentences sharing at least one word (case-insensitive,
    /// acronym token excluded) with a candidate long form of their acronym.
    pub overlap_ratio: f64,
    pub avg_sentence_length: f64,
    pub split_sizes: BTreeMap<String, usize>,
}

pub fn compute_stats(samples: &[SentenceSample], dict: &Dictionary) -> Result<CorpusStats> {
    compute_split_stats(&[("all", samples)], dict)
}

/// Statistics over the union of several named splits.
pub fn compute_split_stats(splits: &[(&str, &[SentenceSample])], dict: &Dictionary) -> Result<CorpusStats> {
    let total: usize = splits.iter().map(|(_, s)| s.len()).sum();
    if total == 0 {
        return Err(Error::invalid("corpus", "no samples"));
    }
    let mut attested = BTreeSet::new();
    let mut overlapping = 0usize;
    let mut token_count = 0usize;
    let mut lf_words: HashMap<&str, HashSet<String>> = HashMap::new();
    for s in splits.iter().flat_map(|(_, s)| s.iter()) {
        let acr = s.tokens.get(s.acronym_index).map(String::as_str).unwrap_or_default();
        let cands = dict.candidates(acr).ok_or_else(|| Error::UnknownAcronym(acr.to_string()))?;
        attested.insert(acr);
        token_count += s.tokens.len();
        let words = lf_words.entry(acr).or_insert_with(|| {
            cands
                .iter()
                .flat_map(|lf| lf.split_whitespace())
                .map(str::to_lowercase)
                .collect()
        });
        let hit = s
            .tokens
            .iter()
            .enumerate()
            .any(|(i, t)| i != s.acronym_index && words.contains(&t.to_lowercase()));
        if hit {
            overlapping += 1;
        }
    }
    let lf_total: usize = attested
        .iter()
        .map(|a| dict.candidates(a).map_or(0, <[String]>::len))
        .sum();
    Ok(CorpusStats {
        num_acronyms: attested.len(),
        num_dictionary_acronyms: dict.len(),
        avg_long_forms_per_acronym: lf_total as f64 / attested.len() as f64,
        overlap_ratio: overlapping as f64 / total as f64,
        avg_sentence_length: token_count as f64 / total as f64,
        split_sizes: splits.iter().map(|(n, s)| (n.to_string(), s.len())).collect(),
    })
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_acronyms: usize,
    pub min_long_forms: usize,
    pub max_long_forms: usize,
    pub sentences_per_long_form: usize,
    /// Probability that a sentence carries cue words of its gold long form.
    pub cue_strength: f64,
    /// Train / dev / test fractions.
    pub split: [f64; 3],
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub filler_vocab: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_acronyms: 50,
            min_long_forms: 3,
            max_long_forms: 3,
            sentences_per_long_form: 30,
            cue_strength: 0.9,
            split: [0.8, 0.1, 0.1],
            min_sentence_len: 8,
            max_sentence_len: 14,
            filler_vocab: 300,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::invalid("synthetic config", d.to_string()));
        if self.num_acronyms == 0 || self.sentences_per_long_form == 0 {
            return bad("zero acronyms or sentences");
        }
        if self.min_long_forms < 2 || self.max_long_forms < self.min_long_forms {
            return bad("long-form range must satisfy 2 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.cue_strength) {
            return bad("cue_strength must lie in [0, 1]");
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be in [0, 1] and sum to 1");
        }
        if self.min_sentence_len < 3 || self.max_sentence_len < self.min_sentence_len {
            return bad("sentence length range must satisfy 3 <= min <= max");
        }
        if self.filler_vocab == 0 {
            return bad("filler vocabulary must be non-empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub dictionary: Dictionary,
    pub train: Vec<SentenceSample>,
    pub dev: Vec<SentenceSample>,
    pub test: Vec<SentenceSample>,
}

const ONSETS: &[&str] = &[
    "b", "br", "c", "ch", "d", "dr", "f", "g", "gr", "h", "j", "k", "l", "m", "n", "p", "pr", "r", "s", "st",
    "t", "tr", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ee"];
const CODAS: &[&str] = &["", "", "n", "r", "l", "s", "x", "m", "nd", "rt"];

struct WordForge<'a, R: Rng> {
    rng: &'a mut R,
    used: HashSet<String>,
}

impl<R: Rng> WordForge<'_, R> {
    /// A fresh pseudo-word, unique within this forge. `initial` forces the
    /// first letter.
    fn word(&mut self, initial: Option<char>) -> String {
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[self.rng.random_range(0..ONSETS.len())]);
                w.push_str(VOWELS[self.rng.random_range(0..VOWELS.len())]);
                w.push_str(CODAS[self.rng.random_range(0..CODAS.len())]);
            }
            if let Some(c) = initial {
                w.replace_range(0..1, &c.to_ascii_lowercase().to_string());
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

/// Generate a dictionary and train/dev/test splits. Each long form gets a
/// set of cue words (its own lower-cased words plus two fabricated ones)
/// that appear in no other long form's cue set.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = seed::rng_for(cfg.seed, "synth");
    let mut forge = WordForge {
        rng: &mut rng,
        used: HashSet::new(),
    };
    let filler: Vec<String> = (0..cfg.filler_vocab).map(|_| forge.word(None)).collect();

    let mut dictionary = Dictionary::new();
    // (acronym, long form, cue words)
    let mut senses: Vec<(String, String, Vec<String>)> = Vec::new();
    let mut acronyms = HashSet::new();
    while acronyms.len() < cfg.num_acronyms {
        let len = forge.rng.random_range(2..=4);
        let acr: String = (0..len)
            .map(|_| (b'A' + forge.rng.random_range(0..26u8)) as char)
            .collect();
        if !acronyms.insert(acr.clone()) {
            continue;
        }
        let k = forge.rng.random_range(cfg.min_long_forms..=cfg.max_long_forms);
        let mut lfs = Vec::with_capacity(k);
        for _ in 0..k {
            let words: Vec<String> = acr.chars().map(|c| forge.word(Some(c))).collect();
            let mut cues = words.clone();
            cues.push(forge.word(None));
            cues.push(forge.word(None));
            let lf = words.iter().map(|w| capitalize(w)).collect::<Vec<_>>().join(" ");
            senses.push((acr.clone(), lf.clone(), cues));
            lfs.push(lf);
        }
        dictionary.insert(acr, lfs)?;
    }

    let mut all = Vec::new();
    for (acr, lf, cues) in &senses {
        for _ in 0..cfg.sentences_per_long_form {
            let n = rng.random_range(cfg.min_sentence_len..=cfg.max_sentence_len);
            let mut tokens: Vec<String> = (0..n - 1)
                .map(|_| filler[rng.random_range(0..filler.len())].clone())
                .collect();
            tokens.push(".".to_string());
            let acronym_index = rng.random_range(0..n - 1);
            tokens[acronym_index] = acr.clone();
            if rng.random_bool(cfg.cue_strength) {
                let slots: Vec<usize> = (0..n - 1).filter(|&i| i != acronym_index).collect();
                let ncues = rng.random_range(1..=2).min(slots.len());
                for &slot in slots.choose_multiple(&mut rng, ncues) {
                    tokens[slot] = cues[rng.random_range(0..cues.len())].clone();
                }
            }
            all.push(SentenceSample {
                id: String::new(),
                tokens,
                acronym_index,
                long_form: Some(lf.clone()),
            });
        }
    }
    all.shuffle(&mut rng);

    let n = all.len();
    let n_train = (cfg.split[0] * n as f64).floor() as usize;
    let n_dev = ((cfg.split[1] * n as f64).floor() as usize).min(n - n_train);
    let mut test = all.split_off(n_train + n_dev);
    let mut dev = all.split_off(n_train);
    let mut train = all;
    for (prefix, split) in [("TR", &mut train), ("DEV", &mut dev), ("TE", &mut test)] {
        for (i, s) in split.iter_mut().enumerate() {
            s.id = format!("{prefix}-{i}");
        }
    }
    Ok(SynthCorpus {
        dictionary,
        train,
        dev,
        test,
    })
}
