//! Lightweight fine-tuning laboratory for miniature BERT-style rankers.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds under `no_std` with `alloc`. File formats, checkpoints and the
//! command line live in the `lft-lab` companion crate.
//!
//! Module map:
//! - [`tensor`]: dense tensors, the reverse-mode tape, gradient checking, Adam.
//! - [`encoder`]: the miniature transformer encoder and its surrogate pre-training.
//! - [`lft`]: prompts, prefixes, LoRA / LoRA+, freeze plans and hybrid schedules.
//! - [`towers`]: Siamese, semi-Siamese and heterogeneous tower bindings.
//! - [`rankers`]: mono, twin and late-interaction scoring heads.
//! - [`model`]: a complete ranker (encoder + adapters + head) over one parameter store.
//! - [`eval`]: loss, re-ranking, metrics, folds and significance tests.
//! - [`train`]: the triplet training loop with best-validation checkpointing.
//! - [`corpus`]: synthetic corpora, vocabulary and tokenizer.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lft;
pub mod model;
pub mod rankers;
pub mod tensor;
pub mod towers;
pub mod train;

pub use error::{Error, Result};
