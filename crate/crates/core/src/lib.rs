//! Machine translation of mathematical formulae between presentation
//! languages (LaTeX) and content languages (Mathematica InputForm,
//! semantic LaTeX).
//!
//! The pipeline covers rule-based tokenization, multi-digit number
//! substitution, vocabulary construction, a convolutional
//! encoder-decoder with per-layer attention, token-budget training with
//! exact-match early stopping, beam-search decoding, and an evaluation
//! harness (EM, Levenshtein, BLEU, perplexity, round trips).

pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod tokenizer;
pub mod train;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
