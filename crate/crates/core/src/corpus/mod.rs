//! Tokenization, the dataset model, answer extraction and the synthetic
//! arithmetic task generator.

mod answer;
mod dataset;
mod synthetic;
mod tokenize;

pub use answer::{
    check_correctness, extract_answer, extract_answer_detailed, format_rational, parse_number,
    ExtractedAnswer, ANSWER_MARKER,
};
pub use dataset::{write_atomic, Dataset, Provenance, ReasoningExample};
pub use synthetic::{
    flawed_solution, generate_synthetic, generator_pieces, task_vocabulary, Difficulty, Op, SOURCE_NAME,
};
pub use tokenize::{
    detokenize, normalize, pretokenize, tokenize, TokenId, TokenSequence, TokenizerMode, Vocab,
    BOS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN,
};
