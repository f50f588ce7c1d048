use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::positions::PositionSchedule;
use crate::record::TensorRecord;
use crate::rope::FrequencyBasis;
use crate::tape::{Gradients, Segment, Tape, Var};
use crate::tensor::Mat;

const PER_LAYER: usize = 8;

/// Pre-norm decoder: token embedding, `n_layers` x (RoPE attention + GELU MLP),
/// final RMS norm, untied output head. No biases.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyLm {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Mat>,
}

/// One sequence to run through the model. `targets[r]` is the token that row
/// `r` should predict, if any.
pub struct SeqInput<'a> {
    pub tokens: &'a [u32],
    pub positions: &'a [f64],
    pub targets: Vec<Option<u32>>,
}

impl<'a> SeqInput<'a> {
    /// Next-token targets for every row but the last.
    pub fn next_token(tokens: &'a [u32], positions: &'a [f64]) -> Self {
        let targets = (0..tokens.len()).map(|r| tokens.get(r + 1).copied()).collect();
        Self { tokens, positions, targets }
    }
}

pub(crate) struct Graph {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub theta: Var,
    pub logits: Var,
    pub logprobs: Var,
    pub segments: Vec<Segment>,
}

impl Graph {
    /// Per-row target log-probabilities.
    pub fn row_logprobs(&self) -> &[f64] {
        &self.tape.value(self.logprobs).data
    }
}

impl TinyLm {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d_model(), config.d_model() * config.ffn_mult);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, rows: usize, cols: usize, ones: bool| {
            let data = if ones {
                vec![1.0; rows * cols]
            } else {
                (0..rows * cols).map(|_| normal.sample(rng)).collect()
            };
            names.push(name);
            params.push(Mat::from_vec(rows, cols, data));
        };
        add("tok_emb".into(), v, d, false);
        for l in 0..config.n_layers {
            add(format!("layers.{l}.attn_norm"), 1, d, true);
            add(format!("layers.{l}.wq"), d, d, false);
            add(format!("layers.{l}.wk"), d, d, false);
            add(format!("layers.{l}.wv"), d, d, false);
            add(format!("layers.{l}.wo"), d, d, false);
            add(format!("layers.{l}.mlp_norm"), 1, d, true);
            add(format!("layers.{l}.w_in"), d, f, false);
            add(format!("layers.{l}.w_out"), f, d, false);
        }
        add("final_norm".into(), 1, d, true);
        add("lm_head".into(), d, v, false);
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| TensorRecord::new(n.clone(), vec![p.rows, p.cols], p.data.clone()))
            .collect()
    }

    pub fn from_records(config: ModelConfig, records: &[TensorRecord]) -> Result<Self> {
        // Shapes come from a zero-initialised template.
        let mut model = Self::new(config, &mut crate::rng::substream(0, "template"))?;
        for (name, p) in model.names.iter().zip(model.params.iter_mut()) {
            let rec = TensorRecord::find(records, name, &[p.rows, p.cols])?;
            p.data.copy_from_slice(&rec.values);
        }
        if records.len() != model.params.len() {
            return Err(crate::Error::Format(format!(
                "expected {} model tensors, found {}",
                model.params.len(),
                records.len()
            )));
        }
        Ok(model)
    }

    fn check_inputs(&self, seqs: &[SeqInput], basis: &FrequencyBasis) -> Result<()> {
        if basis.dims() != self.config.head_dim {
            return Err(invalid(format!(
                "basis dimension {} does not match head_dim {}",
                basis.dims(),
                self.config.head_dim
            )));
        }
        for s in seqs {
            if s.tokens.is_empty() {
                return Err(invalid("sequences must be non-empty"));
            }
            if s.tokens.len() != s.positions.len() || s.targets.len() != s.tokens.len() {
                return Err(invalid(format!(
                    "{} tokens but {} positions",
                    s.tokens.len(),
                    s.positions.len()
                )));
            }
            let vocab = self.config.vocab_size as u32;
            if let Some(t) = s.tokens.iter().chain(s.targets.iter().flatten()).find(|t| **t >= vocab) {
                return Err(invalid(format!("token id {t} is outside vocabulary of {vocab}")));
            }
        }
        Ok(())
    }

    /// Builds the full computation for a batch of independent sequences.
    pub(crate) fn build(&self, seqs: &[SeqInput], basis: &FrequencyBasis) -> Result<Graph> {
        self.check_inputs(seqs, basis)?;
        let cfg = &self.config;
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let theta = tape.leaf(Mat::from_vec(1, basis.pairs(), basis.values().to_vec()));

        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        let mut segments = Vec::new();
        for s in seqs {
            segments.push(Segment { start: ids.len(), len: s.tokens.len() });
            ids.extend(s.tokens.iter().map(|&t| t as usize));
            positions.extend_from_slice(s.positions);
            targets.extend(s.targets.iter().map(|t| t.map(|t| t as usize)));
        }
        let positions: Rc<[f64]> = positions.into();
        let segs: Rc<[Segment]> = segments.clone().into();

        let mut x = tape.embed(params[0], ids);
        for l in 0..cfg.n_layers {
            let p = &params[1 + l * PER_LAYER..1 + (l + 1) * PER_LAYER];
            let h = tape.rms_norm(x, p[0]);
            let q = tape.matmul(h, p[1]);
            let k = tape.matmul(h, p[2]);
            let v = tape.matmul(h, p[3]);
            let q = tape.rope(q, theta, positions.clone(), cfg.head_dim);
            let k = tape.rope(k, theta, positions.clone(), cfg.head_dim);
            let a = tape.attention(q, k, v, segs.clone(), cfg.n_heads);
            let a = tape.matmul(a, p[4]);
            x = tape.add(x, a);
            let h = tape.rms_norm(x, p[5]);
            let u = tape.matmul(h, p[6]);
            let u = tape.gelu(u);
            let u = tape.matmul(u, p[7]);
            x = tape.add(x, u);
        }
        let n = params.len();
        let h = tape.rms_norm(x, params[n - 2]);
        let logits = tape.matmul(h, params[n - 1]);
        let logprobs = tape.target_log_prob(logits, targets.into());
        Ok(Graph { tape, params, theta, logits, logprobs, segments })
    }

    /// Logits (`len x vocab`) for one sequence at the given real-valued positions.
    pub fn forward_at(&self, tokens: &[u32], positions: &[f64], basis: &FrequencyBasis) -> Result<Mat> {
        let input = SeqInput { tokens, positions, targets: vec![None; tokens.len()] };
        let graph = self.build(&[input], basis)?;
        Ok(graph.tape.value(graph.logits).clone())
    }

    pub fn forward(&self, tokens: &[u32], schedule: &PositionSchedule, basis: &FrequencyBasis) -> Result<Mat> {
        self.forward_at(tokens, schedule.positions(), basis)
    }

    /// Greedy continuation of `context` at positions `1..`, stopping after
    /// `stop` or `max_new` tokens. Returns the new tokens and whether the cap
    /// was hit without seeing `stop`.
    pub fn generate_greedy(
        &self,
        context: &[u32],
        basis: &FrequencyBasis,
        max_new: usize,
        stop: Option<u32>,
    ) -> Result<(Vec<u32>, bool)> {
        let mut seq = context.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let positions: Vec<f64> = (1..=seq.len()).map(|i| i as f64).collect();
            let logits = self.forward_at(&seq, &positions, basis)?;
            let last = logits.row(logits.rows - 1);
            let mut best = 0;
            for (i, v) in last.iter().enumerate() {
                if *v > last[best] {
                    best = i;
                }
            }
            let tok = best as u32;
            out.push(tok);
            seq.push(tok);
            if Some(tok) == stop {
                return Ok((out, false));
            }
        }
        Ok((out, stop.is_some()))
    }
}

/// Per-parameter gradients plus the gradient on the frequency basis.
pub struct LmGradients {
    pub params: Vec<Mat>,
    pub theta: Vec<f64>,
}

impl LmGradients {
    pub fn param_norm(&self) -> f64 {
        self.params.iter().map(Mat::sum_sq).sum::<f64>().sqrt()
    }
}

pub(crate) fn collect_gradients(model: &TinyLm, graph: &Graph, mut grads: Gradients) -> LmGradients {
    let params = graph
        .params
        .iter()
        .zip(model.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Mat::zeros(p.rows, p.cols)))
        .collect();
    let theta = grads.take(graph.theta).map(|m| m.data).unwrap_or_default();
    LmGradients { params, theta }
}

/// Seeds the backward pass with `weights[r]` on each row's target log-prob.
pub(crate) fn backprop_logprobs(model: &TinyLm, graph: &Graph, weights: Vec<f64>) -> LmGradients {
    let rows = weights.len();
    let grads = graph.tape.backward(vec![(graph.logprobs, Mat::from_vec(rows, 1, weights))]);
    collect_gradients(model, graph, grads)
}
