//! Acronym disambiguation with a dual-path subword transformer classifier.
//!
//! A sentence containing an ambiguous acronym is paired with each candidate
//! long form from a dictionary. Each pair is tokenized twice (byte-level BPE
//! and WordPiece), encoded by two independent transformer encoders, and the
//! concatenated pooled vectors are scored by an MLP with a sigmoid output.
//! At inference the highest-scoring candidate wins.
//!
//! ```text
//! pair ─┬─ BPE ──────── encoder A ─┐
//!       │                          ├─ concat ─ MLP ×3 ─ sigmoid ─ p
//!       └─ WordPiece ── encoder B ─┘
//! ```

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod grad;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod tokenize;

pub use error::{Error, Result};
