//! Algorithms for adapting a self-supervised speech model to a low-resource
//! language.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds with `#![no_std]` plus `alloc`. File formats, the trainer loop with
//! checkpointing, and the command line live in the companion `lrasr` crate.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`corpus`] | audio clips, band-limited resampling, silence segmentation |
//! | [`text`] | transcript normalization, kana romanization, vocabularies, typological distance |
//! | [`model`] | reverse-mode tape, feature encoder, quantizer, transformer, losses |
//! | [`ctc`] | CTC loss with exact lattice gradient, best-path decoding |
//! | [`ngram`] | modified Kneser-Ney back-off language models and perplexity |
//! | [`beam`] | CTC prefix beam search with word-level n-gram fusion |
//! | [`train`] | data mixing, batching, Adam, schedules, checkpoint selection |
//! | [`eval`] | Levenshtein alignment, CER/WER with script relaxation |
//! | [`synth`] | a seeded toy language rendered as audio |
#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod beam;
pub mod corpus;
pub mod ctc;
pub mod eval;
pub mod model;
pub mod ngram;
pub mod synth;
pub mod text;
pub mod train;

mod logmath;

pub use logmath::{log_add, log_sum_exp, NEG_INF};
