//! Multi-source neural machine translation over incomplete multilingual
//! corpora: one-to-one attentional NMT, multi-encoder NMT and mixtures of
//! NMT experts, with missing source sentences replaced by `<NULL>`.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod moe;
pub mod multiencoder;
pub mod pipeline;
pub mod seq2seq;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
