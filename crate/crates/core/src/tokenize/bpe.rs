use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::{SpecialIds, TokenSequence};
use crate::error::{Error, Result};

const HEADER: &str = "#acrodis-bpe v1";
const SPECIAL_NAMES: [&str; 6] = ["<pad>", "<s>", "</s>", "<mask>", "<acr>", "</acr>"];
const NUM_SPECIALS: u32 = SPECIAL_NAMES.len() as u32;
const FIRST_MERGE: u32 = NUM_SPECIALS + 256;

/// Byte-level BPE vocabulary.
///
/// Id layout: specials `0..6`, raw bytes `6..262`, then one id per merge in
/// rank order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    expansions: Vec<Vec<u8>>,
}

impl BpeVocab {
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut expansions: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|_| Vec::new()).collect();
        expansions.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let next = FIRST_MERGE + rank as u32;
            if l < NUM_SPECIALS || r < NUM_SPECIALS || l >= next || r >= next {
                return Err(Error::invalid(
                    "bpe vocab",
                    format!("merge {rank} references an unavailable token ({l}, {r})"),
                ));
            }
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(Error::invalid("bpe vocab", format!("merge {rank} repeats an earlier pair")));
            }
            let mut bytes = expansions[l as usize].clone();
            bytes.extend_from_slice(&expansions[r as usize]);
            expansions.push(bytes);
        }
        Ok(Self {
            merges,
            ranks,
            expansions,
        })
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.expansions.len()
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds {
            pad: 0,
            cls: 1,
            sep: 2,
            mask: 3,
            acr_open: 4,
            acr_close: 5,
        }
    }

    pub fn byte_id(b: u8) -> u32 {
        NUM_SPECIALS + u32::from(b)
    }

    /// Bytes a token expands to (empty for specials).
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.expansions.get(id as usize).map(Vec::as_slice)
    }

    /// Readable rendering of a token, e.g. `"aa"` or `"\x20the"`.
    pub fn token_str(&self, id: u32) -> Option<String> {
        if id < NUM_SPECIALS {
            return Some(SPECIAL_NAMES[id as usize].to_string());
        }
        self.token_bytes(id).map(escape_bytes)
    }

    fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    /// Serialize as a header line followed by `left<TAB>right` per merge.
    pub fn to_file_string(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for &(l, r) in &self.merges {
            let _ = writeln!(
                s,
                "{}\t{}",
                escape_bytes(&self.expansions[l as usize]),
                escape_bytes(&self.expansions[r as usize])
            );
        }
        s
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == HEADER => {}
            other => {
                return Err(Error::malformed(
                    "bpe vocab",
                    format!("expected header {HEADER:?}, found {other:?}"),
                ))
            }
        }
        let mut by_bytes: HashMap<Vec<u8>, u32> = (0..=255u8).map(|b| (vec![b], Self::byte_id(b))).collect();
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| Error::malformed("bpe vocab", format!("line {lineno}: expected left<TAB>right")))?;
            let lb = unescape_bytes(l).map_err(|e| Error::malformed("bpe vocab", format!("line {lineno}: {e}")))?;
            let rb = unescape_bytes(r).map_err(|e| Error::malformed("bpe vocab", format!("line {lineno}: {e}")))?;
            let lookup = |b: &Vec<u8>| {
                by_bytes
                    .get(b)
                    .copied()
                    .ok_or_else(|| Error::malformed("bpe vocab", format!("line {lineno}: unknown token {}", escape_bytes(b))))
            };
            let (li, ri) = (lookup(&lb)?, lookup(&rb)?);
            merges.push((li, ri));
            let mut joined = lb;
            joined.extend_from_slice(&rb);
            // When two merges produce the same bytes the earliest id wins.
            by_bytes.entry(joined).or_insert(FIRST_MERGE + n as u32);
        }
        Self::from_merges(merges)
    }
}

fn escape_bytes(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'\\' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

fn unescape_bytes(s: &str) -> std::result::Result<Vec<u8>, String> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\\' {
            let hex = s.get(i + 2..i + 4).filter(|_| raw.get(i + 1) == Some(&b'x'));
            let byte = hex
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| format!("bad escape at byte {i}"))?;
            out.push(byte);
            i += 4;
        } else {
            out.push(raw[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty token".into());
    }
    Ok(out)
}

/// Replace every non-overlapping occurrence of `pair` (scanning left to
/// right) with `new_id`.
fn merge_pair(word: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

/// Learn up to `num_merges` merges. Each corpus string is an independent
/// byte sequence; the most frequent adjacent pair is merged each round,
/// ties going to the lexicographically smallest (left, right) byte strings.
/// Stops early once no string has two symbols left.
pub fn bpe_train(corpus: &[String], num_merges: usize) -> Result<BpeVocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("bpe training", "empty corpus"));
    }
    let mut counts: BTreeMap<&[u8], u64> = BTreeMap::new();
    for s in corpus {
        *counts.entry(s.as_bytes()).or_default() += 1;
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(b, c)| (b.iter().map(|&x| BpeVocab::byte_id(x)).collect(), c))
        .collect();

    let mut expansions: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|_| Vec::new()).collect();
    expansions.extend((0..=255u8).map(|b| vec![b]));
    let mut merges = Vec::with_capacity(num_merges);
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    for _ in 0..num_merges {
        pair_counts.clear();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += c;
            }
        }
        let best = pair_counts.iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&expansions[pa.0 as usize], &expansions[pa.1 as usize]);
                let kb = (&expansions[pb.0 as usize], &expansions[pb.1 as usize]);
                // Distinct ids can expand to the same bytes; lower ids win.
                kb.cmp(&ka).then_with(|| pb.cmp(pa))
            })
        });
        let Some((&pair, _)) = best else { break };
        let new_id = expansions.len() as u32;
        let mut bytes = expansions[pair.0 as usize].clone();
        bytes.extend_from_slice(&expansions[pair.1 as usize]);
        expansions.push(bytes);
        merges.push(pair);
        for (w, _) in &mut words {
            merge_pair(w, pair, new_id);
        }
    }
    BpeVocab::from_merges(merges)
}

pub fn bpe_encode(vocab: &BpeVocab, text: &str) -> TokenSequence {
    let mut ids: Vec<u32> = text.bytes().map(BpeVocab::byte_id).collect();
    loop {
        let best = ids
            .windows(2)
            .filter_map(|p| vocab.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
            .min();
        let Some((rank, pair)) = best else { break };
        merge_pair(&mut ids, pair, FIRST_MERGE + rank);
    }
    TokenSequence::new(ids)
}

pub fn bpe_decode(vocab: &BpeVocab, seq: &TokenSequence) -> Result<String> {
    let mut bytes = Vec::new();
    for &id in &seq.ids {
        if BpeVocab::is_special(id) {
            continue;
        }
        let b = vocab
            .token_bytes(id)
            .ok_or_else(|| Error::invalid("token sequence", format!("id {id} outside BPE vocabulary")))?;
        bytes.extend_from_slice(b);
    }
    String::from_utf8(bytes).map_err(|e| Error::invalid("token sequence", format!("not UTF-8: {e}")))
}
