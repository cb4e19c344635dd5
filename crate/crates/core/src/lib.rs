//! Natural-language fine-tuning on desk-scale language models.
//!
//! A response to a question is scored under three prompt conditions
//! (question only, question plus a natural-language judgment, question plus
//! the reference solution). Per-token probability contrasts between those
//! conditions select saliency tokens and per-token loss scales, which then
//! weight a likelihood / unlikelihood objective during fine-tuning.

pub mod collect;
pub mod corpus;
pub mod counters;
pub mod error;
pub mod eval;
pub mod judge;
pub mod lm;
pub mod prompts;
pub mod saliency;
pub mod scale;
pub mod train;

pub use error::{Error, Result};
