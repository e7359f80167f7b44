//! Slow, independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use acrodis::corpus::{Dictionary, SentenceSample};

pub struct Macro {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: usize,
}

/// Macro P/R over the union of gold and predicted labels, by direct counting
/// per class.
pub fn macro_metrics(gold: &[String], pred: &[String]) -> Macro {
    let classes: BTreeSet<&String> = gold.iter().chain(pred).collect();
    let (mut ps, mut rs) = (0.0, 0.0);
    for c in &classes {
        let tp = gold.iter().zip(pred).filter(|(g, p)| g == c && p == c).count();
        let predicted = pred.iter().filter(|p| p == c).count();
        let actual = gold.iter().filter(|g| g == c).count();
        ps += if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        rs += if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
    }
    let n = classes.len();
    let (p, r) = (ps / n as f64, rs / n as f64);
    Macro {
        precision: p,
        recall: r,
        f1: if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) },
        n,
    }
}

/// WordPiece segmentation by dynamic programming: for every start position
/// find the furthest end whose piece is in the vocabulary, then follow the
/// chain from the word start. Unreachable ends mean `[UNK]`.
pub fn wordpiece(vocab: &BTreeSet<String>, word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    let piece = |s: usize, e: usize| {
        let body: String = chars[s..e].iter().collect();
        if s == 0 {
            body
        } else {
            format!("##{body}")
        }
    };
    let mut furthest: Vec<Option<usize>> = vec![None; n];
    for (s, slot) in furthest.iter_mut().enumerate() {
        for e in s + 1..=n {
            if vocab.contains(&piece(s, e)) {
                *slot = Some(e);
            }
        }
    }
    let mut out = Vec::new();
    let mut s = 0;
    while s < n {
        match furthest[s] {
            Some(e) => {
                out.push(piece(s, e));
                s = e;
            }
            None => return vec!["[UNK]".to_string()],
        }
    }
    out
}

/// Byte-pair merges by literal simulation. Symbols are (bytes, creation
/// index) so that equal byte strings made by different merges stay distinct.
pub fn bpe_merges(corpus: &[String], num_merges: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    type Sym = (Vec<u8>, usize);
    let mut words: Vec<Vec<Sym>> = corpus
        .iter()
        .map(|s| s.bytes().map(|b| (vec![b], b as usize)).collect())
        .collect();
    let mut merges = Vec::new();
    for round in 0..num_merges {
        let mut counts: BTreeMap<(Sym, Sym), u64> = BTreeMap::new();
        for w in &words {
            for i in 0..w.len().saturating_sub(1) {
                *counts.entry((w[i].clone(), w[i + 1].clone())).or_default() += 1;
            }
        }
        let Some(top) = counts.values().copied().max() else { break };
        // Ties: smallest left bytes, then right bytes, then oldest symbols.
        let mut tied: Vec<&(Sym, Sym)> = counts.iter().filter(|(_, &c)| c == top).map(|(k, _)| k).collect();
        tied.sort_by(|a, b| (&a.0 .0, &a.1 .0, a.0 .1, a.1 .1).cmp(&(&b.0 .0, &b.1 .0, b.0 .1, b.1 .1)));
        let (l, r) = tied[0].clone();
        let mut joined = l.0.clone();
        joined.extend_from_slice(&r.0);
        let new: Sym = (joined, 256 + round);
        for w in &mut words {
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    out.push(new.clone());
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *w = out;
        }
        merges.push((l.0, r.0));
    }
    merges
}

pub struct Stats {
    pub num_acronyms: usize,
    pub avg_long_forms: f64,
    pub overlap_ratio: f64,
    pub avg_len: f64,
}

pub fn stats(samples: &[SentenceSample], dict: &Dictionary) -> Stats {
    let acronyms: BTreeSet<&str> = samples.iter().map(|s| s.tokens[s.acronym_index].as_str()).collect();
    let lfs: usize = acronyms.iter().map(|a| dict.candidates(a).unwrap().len()).sum();
    let mut overlap = 0;
    for s in samples {
        let acr = &s.tokens[s.acronym_index];
        let mut hit = false;
        for lf in dict.candidates(acr).unwrap() {
            for w in lf.split(' ').filter(|w| !w.is_empty()) {
                for (i, t) in s.tokens.iter().enumerate() {
                    if i != s.acronym_index && t.to_lowercase() == w.to_lowercase() {
                        hit = true;
                    }
                }
            }
        }
        overlap += usize::from(hit);
    }
    let tokens: usize = samples.iter().map(|s| s.tokens.len()).sum();
    Stats {
        num_acronyms: acronyms.len(),
        avg_long_forms: lfs as f64 / acronyms.len() as f64,
        overlap_ratio: overlap as f64 / samples.len() as f64,
        avg_len: tokens as f64 / samples.len() as f64,
    }
}
