use std::path::{Path, PathBuf};

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::docs::{make_docs, sample_chunks, Chunk, Fact, SyntheticDoc, TokenLayout};
use crate::error::{invalid, Result};
use crate::lm::TinyLm;
use crate::prefopt::{MultiTurnSample, PreferenceQuadruple, Turn};
use crate::rope::FrequencyBasis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub layout: TokenLayout,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    /// One fact is planted per stretch of this many tokens.
    pub fact_spacing: usize,
    pub max_chunks_per_doc: usize,
    pub chunk_len_max: usize,
    pub instructions_per_doc: usize,
    pub instruction_temperature: f64,
    pub top_p: f64,
    pub max_response_len: usize,
    /// Responses repeating any n-gram of this size are discarded; 0 disables.
    pub repeat_ngram: usize,
    /// Turns whose chosen and rejected responses coincide carry no
    /// preference signal and are discarded.
    pub drop_identical: bool,
    /// Checkpoint of the model that generates the responses.
    pub model_checkpoint: Option<PathBuf>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            layout: TokenLayout::default(),
            min_doc_len: 512,
            max_doc_len: 4096,
            fact_spacing: 128,
            max_chunks_per_doc: 4,
            chunk_len_max: 256,
            instructions_per_doc: 4,
            instruction_temperature: 0.7,
            top_p: 0.9,
            max_response_len: 8,
            repeat_ngram: 3,
            drop_identical: true,
            model_checkpoint: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.min_doc_len < 2 || self.min_doc_len > self.max_doc_len {
            return Err(invalid(format!("bad document length bounds [{}, {}]", self.min_doc_len, self.max_doc_len)));
        }
        if self.max_chunks_per_doc == 0 || self.chunk_len_max < 2 || self.instructions_per_doc == 0 {
            return Err(invalid("chunk and instruction counts must be positive"));
        }
        if self.max_response_len == 0 {
            return Err(invalid("max_response_len must be positive"));
        }
        if !(self.instruction_temperature > 0.0 && self.instruction_temperature <= 2.0) {
            return Err(invalid(format!("temperature {} outside (0, 2]", self.instruction_temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(invalid(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

/// Samples an index from `softmax(logits / temperature)` restricted to the
/// smallest set of most likely entries whose mass reaches `top_p`.
pub fn sample_top_p<R: Rng + ?Sized>(rng: &mut R, logits: &[f64], temperature: f64, top_p: f64) -> Result<usize> {
    if logits.is_empty() {
        return Err(invalid("no logits to sample from"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += w[i] / z;
        if mass >= top_p {
            break;
        }
    }
    let dist = WeightedIndex::new(kept.iter().map(|&i| w[i])).map_err(|e| invalid(e.to_string()))?;
    Ok(kept[dist.sample(rng)])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<u32>,
    pub fact: Fact,
}

impl Instruction {
    /// The answer a perfect reader would give.
    pub fn reference_answer(&self) -> [u32; 2] {
        [self.fact.value, TokenLayout::EOS]
    }
}

/// Builds a pool of `instructions_per_doc` queries about facts in the chunk,
/// each with a phrasing drawn at the configured temperature and nucleus, and
/// returns one of them. The instruction is `SEP phrase key ANS`.
pub fn gen_instruction<R: Rng + ?Sized>(rng: &mut R, chunk: &Chunk, cfg: &GenConfig) -> Result<Instruction> {
    if chunk.facts.is_empty() {
        return Err(invalid("chunk has no facts to ask about"));
    }
    // Earlier phrasings are preferred, as a template ranking would be.
    let logits: Vec<f64> = (0..cfg.layout.n_phrases).map(|i| -(i as f64)).collect();
    let mut pool = Vec::with_capacity(cfg.instructions_per_doc);
    for _ in 0..cfg.instructions_per_doc {
        let fact = chunk.facts[rng.random_range(0..chunk.facts.len())];
        let phrase = sample_top_p(rng, &logits, cfg.instruction_temperature, cfg.top_p)? as u32;
        pool.push(Instruction {
            tokens: vec![TokenLayout::SEP, cfg.layout.phrase(phrase), fact.key, TokenLayout::ANS],
            fact,
        });
    }
    Ok(pool.swap_remove(rng.random_range(0..pool.len())))
}

/// The short-context model used to write responses, scored at positions
/// `1..` with a fixed basis and prompted with a leading BOS.
pub struct Generator<'a> {
    pub model: &'a TinyLm,
    pub basis: &'a FrequencyBasis,
    pub max_response_len: usize,
}

impl Generator<'_> {
    fn respond(&self, context: &[u32]) -> Result<(Vec<u32>, bool)> {
        let prompt = [&[TokenLayout::BOS][..], context].concat();
        self.model.generate_greedy(&prompt, self.basis, self.max_response_len, Some(TokenLayout::EOS))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedTurn {
    pub doc_id: u64,
    pub span: [usize; 2],
    pub instruction: Instruction,
    pub quad: PreferenceQuadruple,
    pub chosen_truncated: bool,
    pub rejected_truncated: bool,
}

/// Chosen from `[C_S; I]`, rejected from `[C_L; I]`, both greedy.
pub fn gen_quadruple(gen: &Generator, doc: &SyntheticDoc, chunk: &Chunk, instruction: &Instruction) -> Result<GeneratedTurn> {
    let x_s = [chunk.tokens(doc), &instruction.tokens].concat();
    let x_l = [&doc.tokens[..], &instruction.tokens].concat();
    let (y_s, chosen_truncated) = gen.respond(&x_s)?;
    let (y_l, rejected_truncated) = gen.respond(&x_l)?;
    Ok(GeneratedTurn {
        doc_id: doc.id,
        span: chunk.span,
        instruction: instruction.clone(),
        quad: PreferenceQuadruple::new(x_s, x_l, y_s, y_l)?,
        chosen_truncated,
        rejected_truncated,
    })
}

pub fn has_repeated_ngram(tokens: &[u32], n: usize) -> bool {
    if n == 0 || tokens.len() < 2 * n {
        return false;
    }
    let mut seen = std::collections::HashSet::new();
    tokens.windows(n).any(|w| !seen.insert(w))
}

/// Groups turns generated from one document, in the order given.
pub fn assemble_multiturn(doc: &SyntheticDoc, turns: &[GeneratedTurn]) -> Result<MultiTurnSample> {
    if let Some(t) = turns.iter().find(|t| t.doc_id != doc.id) {
        return Err(invalid(format!("turn from document {} grouped with document {}", t.doc_id, doc.id)));
    }
    let turns = turns
        .iter()
        .map(|t| Turn {
            span: t.span,
            instruction: t.instruction.tokens.clone(),
            chosen: t.quad.y_s.clone(),
            rejected: t.quad.y_l.clone(),
            chosen_truncated: t.chosen_truncated,
            rejected_truncated: t.rejected_truncated,
        })
        .collect();
    MultiTurnSample::new(doc.id, doc.tokens.clone(), turns)
}

/// Configuration for the next self-evolving round: document lengths grow by
/// `factor` and responses come from `checkpoint`.
pub fn next_iteration_handoff(cfg: &GenConfig, checkpoint: &Path, factor: usize) -> Result<GenConfig> {
    if factor < 1 {
        return Err(invalid("length factor must be at least 1"));
    }
    Ok(GenConfig {
        min_doc_len: cfg.min_doc_len * factor,
        max_doc_len: cfg.max_doc_len * factor,
        model_checkpoint: Some(checkpoint.to_path_buf()),
        ..cfg.clone()
    })
}

/// Per-run bookkeeping for the generated dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatagenStats {
    pub docs: usize,
    pub turns_generated: usize,
    pub turns_kept: usize,
    pub dropped_identical: usize,
    pub dropped_repetitive: usize,
    pub truncated: usize,
    /// Token-level agreement of responses with the planted answer.
    pub chosen_accuracy: f64,
    pub rejected_accuracy: f64,
}

fn token_accuracy(response: &[u32], answer: &[u32]) -> f64 {
    let hits = answer.iter().enumerate().filter(|(i, a)| response.get(*i) == Some(a)).count();
    hits as f64 / answer.len() as f64
}

/// Runs the whole pipeline for `n_docs` documents. Samples come out sorted by
/// document id; documents that lose every turn to the filters are skipped.
pub fn gen_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    gen: &Generator,
    cfg: &GenConfig,
    n_docs: usize,
) -> Result<(Vec<MultiTurnSample>, DatagenStats)> {
    cfg.validate()?;
    let docs = make_docs(rng, n_docs, &cfg.layout, cfg.min_doc_len, cfg.max_doc_len, cfg.fact_spacing)?;
    let mut stats = DatagenStats { docs: docs.len(), ..DatagenStats::default() };
    let mut samples = Vec::new();
    let (mut acc_c, mut acc_r) = (0.0, 0.0);
    for doc in &docs {
        let mut kept = Vec::new();
        for chunk in sample_chunks(rng, doc, cfg.max_chunks_per_doc, cfg.chunk_len_max)? {
            let instruction = gen_instruction(rng, &chunk, cfg)?;
            let turn = gen_quadruple(gen, doc, &chunk, &instruction)?;
            stats.turns_generated += 1;
            let answer = instruction.reference_answer();
            acc_c += token_accuracy(&turn.quad.y_s, &answer);
            acc_r += token_accuracy(&turn.quad.y_l, &answer);
            if turn.chosen_truncated || turn.rejected_truncated {
                stats.truncated += 1;
            }
            if cfg.drop_identical && turn.quad.y_s == turn.quad.y_l {
                stats.dropped_identical += 1;
                continue;
            }
            if has_repeated_ngram(&turn.quad.y_s, cfg.repeat_ngram) || has_repeated_ngram(&turn.quad.y_l, cfg.repeat_ngram) {
                stats.dropped_repetitive += 1;
                continue;
            }
            kept.push(turn);
        }
        if !kept.is_empty() {
            stats.turns_kept += kept.len();
            samples.push(assemble_multiturn(doc, &kept)?);
        }
    }
    if stats.turns_generated > 0 {
        stats.chosen_accuracy = acc_c / stats.turns_generated as f64;
        stats.rejected_accuracy = acc_r / stats.turns_generated as f64;
    }
    Ok((samples, stats))
}
