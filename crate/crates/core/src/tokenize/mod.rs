//! Subword tokenization: byte-level BPE (path A), WordPiece (path B) and
//! assembly of (sentence, long form) pairs into model input sequences.

mod bpe;
mod pair;
mod wordpiece;

pub use bpe::{bpe_decode, bpe_encode, bpe_train, BpeVocab};
pub use pair::{assemble_pair, SubwordEncoder};
pub use wordpiece::{wp_build_vocab, wp_encode, WordPieceVocab};

use serde::{Deserialize, Serialize};

/// Token ids of the special symbols shared by both vocabularies' layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
    pub acr_open: u32,
    pub acr_close: u32,
}

/// A sequence of token ids for one vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
