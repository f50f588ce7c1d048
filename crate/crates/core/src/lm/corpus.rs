//! Synthetic token corpora and the plain-text corpus file format
//! (one sequence per line, space-separated integer ids).

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub fn uniform_sequence<R: Rng + ?Sized>(rng: &mut R, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

pub fn uniform_corpus<R: Rng + ?Sized>(rng: &mut R, n: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..n).map(|_| uniform_sequence(rng, len, vocab)).collect()
}

/// Block length used by the copy corpus at sequence length `len`.
pub fn copy_block_len(len: usize) -> usize {
    (len / 8).max(1)
}

/// A block of distinct random tokens, `len / 8` long, repeated to fill `len`.
/// Every token after the first block is determined by the token one block
/// back, so the whole sequence is predictable once the block has been seen.
pub fn copy_sequence<R: Rng + ?Sized>(rng: &mut R, len: usize, vocab: usize) -> Vec<u32> {
    copy_sequence_with_block(rng, len, copy_block_len(len), vocab)
}

pub fn copy_sequence_with_block<R: Rng + ?Sized>(rng: &mut R, len: usize, block_len: usize, vocab: usize) -> Vec<u32> {
    let block_len = block_len.clamp(1, vocab);
    let block: Vec<u32> = rand::seq::index::sample(rng, vocab, block_len)
        .into_iter()
        .map(|t| t as u32)
        .collect();
    block.iter().cycle().take(len).copied().collect()
}

pub fn copy_corpus<R: Rng + ?Sized>(rng: &mut R, n: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..n).map(|_| copy_sequence(rng, len, vocab)).collect()
}

/// Copy sequences whose block length is drawn per sequence from `2..=len/2`,
/// so that no single offset solves the task.
pub fn mixed_copy_corpus<R: Rng + ?Sized>(rng: &mut R, n: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    let hi = (len / 2).max(2);
    (0..n)
        .map(|_| {
            let block = rng.random_range(2..=hi);
            copy_sequence_with_block(rng, len, block, vocab)
        })
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<Vec<u32>>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, corpus: &[Vec<u32>]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for seq in corpus {
        let line: Vec<String> = seq.iter().map(u32::to_string).collect();
        writeln!(file, "{}", line.join(" "))?;
    }
    file.flush()?;
    Ok(())
}
