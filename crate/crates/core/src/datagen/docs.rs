use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng as StreamRng;

/// How the vocabulary is carved up. Ids are assigned in the order
/// BOS, EOS, SEP, ANS, phrasing tokens, keys, values, filler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenLayout {
    pub vocab_size: u32,
    pub n_phrases: u32,
    pub n_keys: u32,
    pub n_values: u32,
}

impl Default for TokenLayout {
    fn default() -> Self {
        Self { vocab_size: 64, n_phrases: 4, n_keys: 16, n_values: 16 }
    }
}

impl TokenLayout {
    pub const BOS: u32 = 0;
    pub const EOS: u32 = 1;
    pub const SEP: u32 = 2;
    pub const ANS: u32 = 3;

    pub fn validate(&self) -> Result<()> {
        if self.n_phrases == 0 || self.n_keys == 0 || self.n_values == 0 {
            return Err(invalid("phrase, key and value ranges must be non-empty"));
        }
        if self.filler_start() >= self.vocab_size {
            return Err(invalid(format!(
                "vocabulary of {} leaves no filler tokens (need more than {})",
                self.vocab_size,
                self.filler_start()
            )));
        }
        Ok(())
    }

    pub fn phrase(&self, i: u32) -> u32 {
        4 + i
    }

    pub fn key(&self, i: u32) -> u32 {
        4 + self.n_phrases + i
    }

    pub fn value(&self, i: u32) -> u32 {
        4 + self.n_phrases + self.n_keys + i
    }

    pub fn filler_start(&self) -> u32 {
        4 + self.n_phrases + self.n_keys + self.n_values
    }

    pub fn is_value(&self, t: u32) -> bool {
        t >= self.value(0) && t < self.filler_start()
    }
}

/// A `key value` pair planted at `span` (`[start, end)`) in a document.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub key: u32,
    pub value: u32,
    pub span: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDoc {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub facts: Vec<Fact>,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub span: [usize; 2],
    pub facts: Vec<Fact>,
}

impl Chunk {
    pub fn tokens<'a>(&self, doc: &'a SyntheticDoc) -> &'a [u32] {
        &doc.tokens[self.span[0]..self.span[1]]
    }
}

/// Filler documents of length in `[min_len, max_len]` with one fact planted in
/// every `fact_spacing`-token stretch. Each document draws from its own
/// stream seeded from `rng`, so documents can be generated independently.
pub fn make_docs<R: Rng + ?Sized>(
    rng: &mut R,
    n_docs: usize,
    layout: &TokenLayout,
    min_len: usize,
    max_len: usize,
    fact_spacing: usize,
) -> Result<Vec<SyntheticDoc>> {
    layout.validate()?;
    if min_len < 2 || min_len > max_len {
        return Err(invalid(format!("bad document length bounds [{min_len}, {max_len}]")));
    }
    if fact_spacing < 2 {
        return Err(invalid("fact_spacing must be at least 2"));
    }
    let seeds: Vec<u64> = (0..n_docs).map(|_| rng.random()).collect();
    Ok(seeds
        .into_iter()
        .enumerate()
        .map(|(id, seed)| make_doc(&mut StreamRng::seed_from_u64(seed), id as u64, layout, min_len, max_len, fact_spacing))
        .collect())
}

fn make_doc<R: Rng + ?Sized>(
    rng: &mut R,
    id: u64,
    layout: &TokenLayout,
    min_len: usize,
    max_len: usize,
    fact_spacing: usize,
) -> SyntheticDoc {
    let len = rng.random_range(min_len..=max_len);
    let filler = layout.filler_start()..layout.vocab_size;
    let mut tokens: Vec<u32> = (0..len).map(|_| rng.random_range(filler.clone())).collect();
    let n_facts = (len / fact_spacing).clamp(1, layout.n_keys as usize);
    let keys = rand::seq::index::sample(rng, layout.n_keys as usize, n_facts);
    let stretch = len / n_facts;
    let mut facts = Vec::with_capacity(n_facts);
    for (i, k) in keys.into_iter().enumerate() {
        let start = i * stretch + rng.random_range(0..=stretch - 2);
        let fact = Fact {
            key: layout.key(k as u32),
            value: layout.value(rng.random_range(0..layout.n_values)),
            span: [start, start + 2],
        };
        tokens[start] = fact.key;
        tokens[start + 1] = fact.value;
        facts.push(fact);
    }
    SyntheticDoc { id, tokens, facts, min_len, max_len }
}

/// Up to `max_chunks` contiguous windows of at most `chunk_len_max` tokens,
/// each built around a different fact. A document no longer than one chunk
/// yields itself.
pub fn sample_chunks<R: Rng + ?Sized>(
    rng: &mut R,
    doc: &SyntheticDoc,
    max_chunks: usize,
    chunk_len_max: usize,
) -> Result<Vec<Chunk>> {
    if doc.tokens.is_empty() || doc.facts.is_empty() {
        return Err(invalid(format!("document {} has no tokens or no facts", doc.id)));
    }
    let len = doc.tokens.len();
    if chunk_len_max >= len {
        return Ok(vec![Chunk { span: [0, len], facts: doc.facts.clone() }]);
    }
    if chunk_len_max < 2 {
        return Err(invalid("chunk_len_max must hold a fact"));
    }
    let picks = rand::seq::index::sample(rng, doc.facts.len(), max_chunks.min(doc.facts.len()));
    let mut chunks: Vec<Chunk> = picks
        .into_iter()
        .map(|i| {
            let f = doc.facts[i];
            let lo = f.span[1].saturating_sub(chunk_len_max);
            let hi = f.span[0].min(len - chunk_len_max);
            let start = rng.random_range(lo..=hi);
            let span = [start, start + chunk_len_max];
            let facts = doc.facts.iter().filter(|g| g.span[0] >= span[0] && g.span[1] <= span[1]).copied().collect();
            Chunk { span, facts }
        })
        .collect();
    chunks.sort_by_key(|c| c.span);
    Ok(chunks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn docs(seed: u64) -> Vec<SyntheticDoc> {
        make_docs(&mut substream(seed, "docs"), 5, &TokenLayout::default(), 100, 300, 40).unwrap()
    }

    #[test]
    fn documents_are_seeded_and_facts_are_in_place() {
        assert_eq!(docs(1), docs(1));
        assert_ne!(docs(1), docs(2));
        for d in docs(1) {
            assert!((100..=300).contains(&d.tokens.len()));
            for f in &d.facts {
                assert_eq!(&d.tokens[f.span[0]..f.span[1]], &[f.key, f.value]);
            }
            let mut keys: Vec<_> = d.facts.iter().map(|f| f.key).collect();
            keys.dedup();
            assert_eq!(keys.len(), d.facts.len());
        }
        assert!(make_docs(&mut substream(0, "d"), 0, &TokenLayout::default(), 10, 20, 5).unwrap().is_empty());
    }

    #[test]
    fn chunks_hold_facts_and_stay_in_bounds() {
        let mut rng = substream(4, "chunks");
        for d in docs(3) {
            let chunks = sample_chunks(&mut rng, &d, 4, 48).unwrap();
            assert!(!chunks.is_empty() && chunks.len() <= 4);
            for c in &chunks {
                assert!(c.span[1] <= d.tokens.len() && c.span[1] - c.span[0] == 48);
                assert!(!c.facts.is_empty());
            }
        }
        let d = &docs(3)[0];
        let whole = sample_chunks(&mut rng, d, 4, 10_000).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].tokens(d), d.tokens.as_slice());
    }
}
