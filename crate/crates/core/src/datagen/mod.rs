//! Synthetic short-to-long preference data: documents with planted key/value
//! facts, chunk sampling, templated instructions, and chosen/rejected
//! responses decoded greedily by a short-context model.

mod docs;
mod generate;

pub use docs::{make_docs, sample_chunks, Chunk, Fact, SyntheticDoc, TokenLayout};
pub use generate::{
    assemble_multiturn, gen_dataset, gen_instruction, gen_quadruple, has_repeated_ngram, next_iteration_handoff,
    sample_top_p, DatagenStats, GenConfig, GeneratedTurn, Generator, Instruction,
};
