use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{SpecialIds, TokenSequence};
use crate::error::{Error, Result};

const SPECIALS: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[ACR]", "[/ACR]"];
const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

/// WordPiece vocabulary; line number in the vocab file is the token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPieceVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk: u32,
    specials: SpecialIds,
}

impl WordPieceVocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::invalid("wordpiece vocab", format!("token {i} is empty or contains whitespace")));
            }
            if t == CONTINUATION {
                return Err(Error::invalid("wordpiece vocab", format!("token {i} is a bare continuation marker")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid("wordpiece vocab", format!("duplicate token {t:?}")));
            }
        }
        let id = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::invalid("wordpiece vocab", format!("missing special token {name}")))
        };
        let specials = SpecialIds {
            pad: id("[PAD]")?,
            cls: id("[CLS]")?,
            sep: id("[SEP]")?,
            mask: id("[MASK]")?,
            acr_open: id("[ACR]")?,
            acr_close: id("[/ACR]")?,
        };
        let unk = id("[UNK]")?;
        Ok(Self {
            tokens,
            index,
            unk,
            specials,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk(&self) -> u32 {
        self.unk
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

fn split_units(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
        .collect()
}

fn join_units(left: &str, right: &str) -> String {
    format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(right))
}

/// Build a vocabulary of at most `target_size` tokens from whitespace-split
/// words by repeatedly merging the most frequent adjacent unit pair (ties to
/// the lexicographically smallest pair).
pub fn wp_build_vocab(corpus: &[String], target_size: usize) -> Result<WordPieceVocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("wordpiece training", "empty corpus"));
    }
    let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = word_counts.into_iter().map(|(w, c)| (split_units(w), c)).collect();
    let base: BTreeSet<&String> = words.iter().flat_map(|(u, _)| u.iter()).collect();
    let minimum = SPECIALS.len() + base.len();
    if target_size <= minimum {
        return Err(Error::invalid(
            "wordpiece training",
            format!("target size {target_size} must exceed {minimum} (specials + base units)"),
        ));
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(base.into_iter().cloned());
    let mut present: BTreeSet<String> = tokens.iter().cloned().collect();

    while tokens.len() < target_size {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (units, c) in &words {
            for p in units.windows(2) {
                *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += c;
            }
        }
        let Some(((l, r), _)) = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (l, r) = (l.to_string(), r.to_string());
        let merged = join_units(&l, &r);
        for (units, _) in &mut words {
            let mut out = Vec::with_capacity(units.len());
            let mut i = 0;
            while i < units.len() {
                if i + 1 < units.len() && units[i] == l && units[i + 1] == r {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut units[i]));
                    i += 1;
                }
            }
            *units = out;
        }
        if present.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    WordPieceVocab::from_tokens(tokens)
}

/// Greedy longest-match-first segmentation of one word, or `None` when
/// some suffix cannot be matched.
fn segment_word(vocab: &WordPieceVocab, word: &str, out: &mut Vec<u32>) -> bool {
    let bounds: Vec<usize> = word.char_indices().map(|(i, _)| i).chain([word.len()]).collect();
    let start_len = out.len();
    let mut start = 0;
    let mut buf = String::new();
    while start + 1 < bounds.len() {
        let mut found = None;
        for end in (start + 1..bounds.len()).rev() {
            buf.clear();
            if start > 0 {
                buf.push_str(CONTINUATION);
            }
            buf.push_str(&word[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&buf) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => {
                out.truncate(start_len);
                return false;
            }
        }
    }
    true
}

pub fn wp_encode(vocab: &WordPieceVocab, words: &[impl AsRef<str>]) -> TokenSequence {
    let mut ids = Vec::new();
    for w in words {
        let w = w.as_ref();
        if w.chars().count() > MAX_WORD_CHARS || !segment_word(vocab, w, &mut ids) {
            ids.push(vocab.unk);
        }
    }
    TokenSequence::new(ids)
}
