//! One optimizer step of the NLL-regularized multi-turn LongPO objective on
//! the tiny language model.

use serde::{Deserialize, Serialize};

use super::objectives::{aggregate, Aggregation, PairLogps};
use super::{LmPolicy, MultiTurnSample, SequencePolicy};
use crate::error::{invalid, Error, Result};
use crate::lm::{clip, TinyLm};
use crate::optim::Adam;
use crate::rope::FrequencyBasis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongPoConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    /// Weight of the preference term against the NLL term.
    pub lambda_w: f64,
    pub aggregation: Aggregation,
    pub grad_clip: Option<f64>,
}

impl Default for LongPoConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            lr: 1e-3,
            beta: 0.1,
            lambda_w: 0.01,
            aggregation: Aggregation::SumLogprob,
            grad_clip: Some(1.0),
        }
    }
}

impl LongPoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid("beta must be positive"));
        }
        if !(self.lambda_w >= 0.0 && self.lambda_w.is_finite()) {
            return Err(invalid("lambda_w must be non-negative"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be non-negative"));
        }
        Ok(())
    }
}

/// Short-reference log-probabilities of each turn's chosen and rejected
/// responses given the short context. They never change during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLogps {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

pub fn reference_logps<R: SequencePolicy + ?Sized>(short_ref: &R, sample: &MultiTurnSample) -> Result<ReferenceLogps> {
    let mut chosen = Vec::new();
    let mut rejected = Vec::new();
    for i in 0..sample.turns.len() {
        let q = sample.quadruple(i)?;
        chosen.push(short_ref.seq_logprob(&q.x_s, &q.y_s)?);
        rejected.push(short_ref.seq_logprob(&q.x_s, &q.y_l)?);
    }
    Ok(ReferenceLogps { chosen, rejected })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongPoOutcome {
    pub loss: f64,
    pub mt_loss: f64,
    pub nll: f64,
    /// Mean implicit rewards `beta * (log pi(y|x_l) - log pi_short(y|x_s))`.
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub margin: f64,
    pub grad_norm: f64,
}

/// d aggregate / d turn log-prob.
fn aggregate_grad(logps: &[f64], aggregation: Aggregation) -> Vec<f64> {
    match aggregation {
        Aggregation::SumLogprob => vec![1.0; logps.len()],
        Aggregation::SumProb => {
            let lse = aggregate(logps, Aggregation::SumProb);
            logps.iter().map(|l| (l - lse).exp()).collect()
        }
    }
}

/// Mean final loss over `samples` and one Adam step on it.
pub fn longpo_step(
    model: &mut TinyLm,
    basis: &FrequencyBasis,
    bos: u32,
    opt: &mut Adam,
    samples: &[&MultiTurnSample],
    refs: &[&ReferenceLogps],
    cfg: &LongPoConfig,
) -> Result<LongPoOutcome> {
    if samples.is_empty() || samples.len() != refs.len() {
        return Err(invalid("need one reference entry per sample"));
    }
    let mut quads = Vec::new();
    let mut long_seqs = Vec::new();
    for (s, r) in samples.iter().zip(refs) {
        if r.chosen.len() != s.turns.len() || r.rejected.len() != s.turns.len() {
            return Err(invalid(format!("reference log-probs do not match doc {}", s.doc_id)));
        }
        quads.push((0..s.turns.len()).map(|i| s.quadruple(i)).collect::<Result<Vec<_>>>()?);
        long_seqs.push(s.long_chosen_sequence());
    }
    let mut pairs: Vec<(&[u32], &[u32])> = Vec::new();
    for (qs, seq) in quads.iter().zip(&long_seqs) {
        for q in qs {
            pairs.push((&q.x_l, &q.y_s));
            pairs.push((&q.x_l, &q.y_l));
        }
        pairs.push((&[], seq));
    }

    let n = samples.len() as f64;
    let mut stats = LongPoOutcome {
        loss: 0.0,
        mt_loss: 0.0,
        nll: 0.0,
        chosen_reward: 0.0,
        rejected_reward: 0.0,
        margin: 0.0,
        grad_norm: 0.0,
    };
    let policy = LmPolicy::new(model, basis, bos);
    let (_, _, mut grads) = policy.loss_and_gradients(&pairs, |logps| {
        let mut d = vec![0.0; logps.len()];
        let mut at = 0;
        for ((s, r), seq) in samples.iter().zip(refs).zip(&long_seqs) {
            let turns = s.turns.len();
            let chosen: Vec<f64> = (0..turns).map(|i| logps[at + 2 * i]).collect();
            let rejected: Vec<f64> = (0..turns).map(|i| logps[at + 2 * i + 1]).collect();
            let agg = PairLogps {
                policy_chosen: aggregate(&chosen, cfg.aggregation),
                policy_rejected: aggregate(&rejected, cfg.aggregation),
                ref_chosen: aggregate(&r.chosen, cfg.aggregation),
                ref_rejected: aggregate(&r.rejected, cfg.aggregation),
            };
            let (mt, g_c, g_r) = agg.loss_and_grad(cfg.beta);
            let nll = -logps[at + 2 * turns] / seq.len() as f64;
            for (i, w) in aggregate_grad(&chosen, cfg.aggregation).into_iter().enumerate() {
                d[at + 2 * i] = cfg.lambda_w * g_c * w / n;
            }
            for (i, w) in aggregate_grad(&rejected, cfg.aggregation).into_iter().enumerate() {
                d[at + 2 * i + 1] = cfg.lambda_w * g_r * w / n;
            }
            d[at + 2 * turns] = -1.0 / (seq.len() as f64 * n);
            at += 2 * turns + 1;

            let rc = cfg.beta * (agg.policy_chosen - agg.ref_chosen);
            let rr = cfg.beta * (agg.policy_rejected - agg.ref_rejected);
            stats.mt_loss += mt / n;
            stats.nll += nll / n;
            stats.chosen_reward += rc / n;
            stats.rejected_reward += rr / n;
        }
        Ok((0.0, d))
    })?;
    stats.loss = cfg.lambda_w * stats.mt_loss + stats.nll;
    stats.margin = stats.chosen_reward - stats.rejected_reward;
    if !stats.loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: opt.steps_taken() as usize + 1 });
    }
    stats.grad_norm = grads.param_norm();
    let mut slices: Vec<&mut [f64]> = grads.params.iter_mut().map(|m| m.data.as_mut_slice()).collect();
    clip(&mut slices, cfg.grad_clip, stats.grad_norm);
    let mut slots: Vec<(&mut [f64], &[f64])> = model
        .params_mut()
        .iter_mut()
        .zip(&grads.params)
        .map(|(p, g)| (p.data.as_mut_slice(), g.data.as_slice()))
        .collect();
    opt.update(&mut slots);
    Ok(stats)
}
