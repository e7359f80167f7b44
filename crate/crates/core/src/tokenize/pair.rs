use super::{bpe_encode, wp_encode, BpeVocab, SpecialIds, TokenSequence, WordPieceVocab};
use crate::error::{Error, Result};

/// Turns pre-split words into subword ids for one vocabulary.
pub trait SubwordEncoder {
    fn specials(&self) -> SpecialIds;
    fn encode_words(&self, words: &[&str]) -> Vec<u32>;
    fn vocab_size(&self) -> usize;
}

/// Each word is encoded with a leading space so that decoding the
/// concatenation restores the space-joined text.
impl SubwordEncoder for BpeVocab {
    fn specials(&self) -> SpecialIds {
        BpeVocab::specials(self)
    }

    fn encode_words(&self, words: &[&str]) -> Vec<u32> {
        let mut buf = String::new();
        let mut out = Vec::new();
        for w in words {
            buf.clear();
            buf.push(' ');
            buf.push_str(w);
            out.extend(bpe_encode(self, &buf).ids);
        }
        out
    }

    fn vocab_size(&self) -> usize {
        BpeVocab::vocab_size(self)
    }
}

impl SubwordEncoder for WordPieceVocab {
    fn specials(&self) -> SpecialIds {
        WordPieceVocab::specials(self)
    }

    fn encode_words(&self, words: &[&str]) -> Vec<u32> {
        wp_encode(self, words).ids
    }

    fn vocab_size(&self) -> usize {
        WordPieceVocab::vocab_size(self)
    }
}

/// Lay out `CLS left [ACR] acronym [/ACR] right SEP long-form SEP`.
///
/// When longer than `max_len`, right context is dropped from its end first,
/// then left context from its start, then long-form subwords from the end.
/// The marked acronym region and the three framing tokens are never removed.
pub fn assemble_pair<E: SubwordEncoder + ?Sized>(
    enc: &E,
    sentence_tokens: &[String],
    acronym_index: usize,
    long_form: &str,
    max_len: usize,
) -> Result<TokenSequence> {
    if acronym_index >= sentence_tokens.len() {
        return Err(Error::invalid(
            "pair",
            format!("acronym_index {acronym_index} out of range for {} tokens", sentence_tokens.len()),
        ));
    }
    let sp = enc.specials();
    let words: Vec<&str> = sentence_tokens.iter().map(String::as_str).collect();
    let mut left = enc.encode_words(&words[..acronym_index]);
    let acr = enc.encode_words(&words[acronym_index..=acronym_index]);
    let mut right = enc.encode_words(&words[acronym_index + 1..]);
    let lf_words: Vec<&str> = long_form.split_whitespace().collect();
    let mut lf = enc.encode_words(&lf_words);

    let fixed = 3 + 2 + acr.len();
    if fixed > max_len {
        return Err(Error::invalid(
            "pair",
            format!("marked acronym region needs {fixed} tokens, max_len is {max_len}"),
        ));
    }
    let mut excess = (fixed + left.len() + right.len() + lf.len()).saturating_sub(max_len);
    let cut = excess.min(right.len());
    right.truncate(right.len() - cut);
    excess -= cut;
    let cut = excess.min(left.len());
    left.drain(..cut);
    excess -= cut;
    lf.truncate(lf.len() - excess);

    let mut ids = Vec::with_capacity(fixed + left.len() + right.len() + lf.len());
    ids.push(sp.cls);
    ids.extend(left);
    ids.push(sp.acr_open);
    ids.extend(acr);
    ids.push(sp.acr_close);
    ids.extend(right);
    ids.push(sp.sep);
    ids.extend(lf);
    ids.push(sp.sep);
    Ok(TokenSequence::new(ids))
}
