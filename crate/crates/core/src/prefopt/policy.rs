//! Sequence log-probabilities under the tiny language model.

use super::SequencePolicy;
use crate::error::{invalid, Result};
use crate::lm::{backprop_logprobs, LmGradients, SeqInput, TinyLm};
use crate::rope::FrequencyBasis;

/// A [`TinyLm`] scored at contiguous positions `1..` with a fixed basis.
/// Every input is prefixed with `bos`, so an empty context is allowed.
pub struct LmPolicy<'a> {
    pub model: &'a TinyLm,
    pub basis: &'a FrequencyBasis,
    pub bos: u32,
}

struct Prepared {
    tokens: Vec<u32>,
    positions: Vec<f64>,
    targets: Vec<Option<u32>>,
}

impl<'a> LmPolicy<'a> {
    pub fn new(model: &'a TinyLm, basis: &'a FrequencyBasis, bos: u32) -> Self {
        Self { model, basis, bos }
    }

    fn prepare(&self, context: &[u32], response: &[u32]) -> Result<Prepared> {
        if response.is_empty() {
            return Err(invalid("response must be non-empty"));
        }
        let mut tokens = Vec::with_capacity(1 + context.len() + response.len());
        tokens.push(self.bos);
        tokens.extend_from_slice(context);
        tokens.extend_from_slice(response);
        let first = context.len();
        let targets = (0..tokens.len()).map(|r| if r >= first { tokens.get(r + 1).copied() } else { None }).collect();
        let positions = (1..=tokens.len()).map(|i| i as f64).collect();
        Ok(Prepared { tokens, positions, targets })
    }

    fn run<F>(&self, pairs: &[(&[u32], &[u32])], upstream: Option<F>) -> Result<(Vec<f64>, Option<(f64, LmGradients)>)>
    where
        F: FnOnce(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let prepared = pairs.iter().map(|(c, r)| self.prepare(c, r)).collect::<Result<Vec<_>>>()?;
        let inputs: Vec<SeqInput> = prepared
            .iter()
            .map(|p| SeqInput { tokens: &p.tokens, positions: &p.positions, targets: p.targets.clone() })
            .collect();
        let graph = self.model.build(&inputs, self.basis)?;
        let rows = graph.row_logprobs();
        let logps: Vec<f64> = graph.segments.iter().map(|s| rows[s.start..s.start + s.len].iter().sum()).collect();
        let Some(f) = upstream else { return Ok((logps, None)) };
        let (loss, d) = f(&logps)?;
        if d.len() != logps.len() {
            return Err(invalid("one upstream gradient per sequence is required"));
        }
        let mut weights = vec![0.0; rows.len()];
        for (s, g) in graph.segments.iter().zip(&d) {
            weights[s.start..s.start + s.len].fill(*g);
        }
        let grads = backprop_logprobs(self.model, &graph, weights);
        Ok((logps, Some((loss, grads))))
    }

    /// `log p(response | context)` for each pair, in one batched forward pass.
    pub fn batch_logprobs(&self, pairs: &[(&[u32], &[u32])]) -> Result<Vec<f64>> {
        Ok(self.run::<fn(&[f64]) -> Result<(f64, Vec<f64>)>>(pairs, None)?.0)
    }

    /// Evaluates the pairs, hands their log-probabilities to `loss`, which
    /// returns a loss value and its derivative with respect to each
    /// log-probability, and backpropagates that into the model.
    pub fn loss_and_gradients<F>(&self, pairs: &[(&[u32], &[u32])], loss: F) -> Result<(Vec<f64>, f64, LmGradients)>
    where
        F: FnOnce(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (logps, out) = self.run(pairs, Some(loss))?;
        let (value, grads) = out.expect("upstream was provided");
        Ok((logps, value, grads))
    }
}

impl SequencePolicy for LmPolicy<'_> {
    fn seq_logprob(&self, context: &[u32], response: &[u32]) -> Result<f64> {
        Ok(self.batch_logprobs(&[(context, response)])?[0])
    }
}
