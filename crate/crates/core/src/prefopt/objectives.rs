//! Bradley-Terry, DPO and LongPO objectives, the NLL regularizer and the
//! multi-turn aggregation.

use serde::{Deserialize, Serialize};

use super::sample::{MultiTurnSample, PreferenceQuadruple};
use super::SequencePolicy;
use crate::error::{invalid, Result};

/// How per-turn log-probabilities are combined in the multi-turn objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum the per-turn log-probabilities (log of the joint probability).
    #[default]
    SumLogprob,
    /// Log of the sum of per-turn probabilities, via log-sum-exp.
    SumProb,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(x)`, stable for large `|x|`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Probability that `y_w` is preferred over `y_l` given their rewards.
pub fn bt_preference(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("beta must be positive and finite, got {beta}")))
    }
}

/// The four log-probabilities a pairwise preference loss needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLogps {
    pub policy_chosen: f64,
    pub policy_rejected: f64,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl PairLogps {
    /// `beta * (log ratio of chosen) - beta * (log ratio of rejected)`.
    pub fn margin(&self, beta: f64) -> f64 {
        beta * (self.policy_chosen - self.ref_chosen) - beta * (self.policy_rejected - self.ref_rejected)
    }

    /// Loss value and its partial derivatives with respect to the policy
    /// log-probabilities of the chosen and rejected responses.
    pub fn loss_and_grad(&self, beta: f64) -> (f64, f64, f64) {
        let m = self.margin(beta);
        let s = sigmoid(-m);
        (neg_log_sigmoid(m), -beta * s, beta * s)
    }
}

/// `beta * (policy_logp_long - shortref_logp_short)`. The `beta log Z` term is
/// omitted since it cancels in every margin.
pub fn longpo_reward(policy_logp_long: f64, shortref_logp_short: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(beta * (policy_logp_long - shortref_logp_short))
}

pub fn preference_loss(logps: &PairLogps, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(neg_log_sigmoid(logps.margin(beta)))
}

pub fn dpo_loss<P, R>(policy: &P, reference: &R, x: &[u32], y_w: &[u32], y_l: &[u32], beta: f64) -> Result<f64>
where
    P: SequencePolicy + ?Sized,
    R: SequencePolicy + ?Sized,
{
    let logps = PairLogps {
        policy_chosen: policy.seq_logprob(x, y_w)?,
        policy_rejected: policy.seq_logprob(x, y_l)?,
        ref_chosen: reference.seq_logprob(x, y_w)?,
        ref_rejected: reference.seq_logprob(x, y_l)?,
    };
    preference_loss(&logps, beta)
}

pub fn longpo_logps<P, R>(policy: &P, short_ref: &R, quad: &PreferenceQuadruple) -> Result<PairLogps>
where
    P: SequencePolicy + ?Sized,
    R: SequencePolicy + ?Sized,
{
    Ok(PairLogps {
        policy_chosen: policy.seq_logprob(&quad.x_l, &quad.y_s)?,
        policy_rejected: policy.seq_logprob(&quad.x_l, &quad.y_l)?,
        ref_chosen: short_ref.seq_logprob(&quad.x_s, &quad.y_s)?,
        ref_rejected: short_ref.seq_logprob(&quad.x_s, &quad.y_l)?,
    })
}

/// Policy conditioned on the long context, reference on the short one.
pub fn longpo_loss<P, R>(policy: &P, short_ref: &R, quad: &PreferenceQuadruple, beta: f64) -> Result<f64>
where
    P: SequencePolicy + ?Sized,
    R: SequencePolicy + ?Sized,
{
    preference_loss(&longpo_logps(policy, short_ref, quad)?, beta)
}

/// Combines per-turn log-probabilities.
pub fn aggregate(logps: &[f64], aggregation: Aggregation) -> f64 {
    match aggregation {
        Aggregation::SumLogprob => logps.iter().sum(),
        Aggregation::SumProb => log_sum_exp(logps),
    }
}

/// Aggregated log-probabilities of a multi-turn sample, one entry per turn
/// before aggregation.
pub fn multiturn_turn_logps<P, R>(policy: &P, short_ref: &R, sample: &MultiTurnSample) -> Result<Vec<PairLogps>>
where
    P: SequencePolicy + ?Sized,
    R: SequencePolicy + ?Sized,
{
    (0..sample.turns.len())
        .map(|i| longpo_logps(policy, short_ref, &sample.quadruple(i)?))
        .collect()
}

pub fn aggregate_turns(turns: &[PairLogps], aggregation: Aggregation) -> Result<PairLogps> {
    if turns.is_empty() {
        return Err(invalid("a multi-turn sample needs at least one turn"));
    }
    let col = |f: fn(&PairLogps) -> f64| aggregate(&turns.iter().map(f).collect::<Vec<_>>(), aggregation);
    Ok(PairLogps {
        policy_chosen: col(|p| p.policy_chosen),
        policy_rejected: col(|p| p.policy_rejected),
        ref_chosen: col(|p| p.ref_chosen),
        ref_rejected: col(|p| p.ref_rejected),
    })
}

pub fn longpo_mt_loss<P, R>(
    policy: &P,
    short_ref: &R,
    sample: &MultiTurnSample,
    beta: f64,
    aggregation: Aggregation,
) -> Result<f64>
where
    P: SequencePolicy + ?Sized,
    R: SequencePolicy + ?Sized,
{
    let turns = multiturn_turn_logps(policy, short_ref, sample)?;
    preference_loss(&aggregate_turns(&turns, aggregation)?, beta)
}

/// Length-normalized negative log-likelihood of `s_l` with no context.
pub fn nll_loss<P: SequencePolicy + ?Sized>(policy: &P, s_l: &[u32]) -> Result<f64> {
    if s_l.is_empty() {
        return Err(invalid("nll_loss needs a non-empty sequence"));
    }
    Ok(-policy.seq_logprob(&[], s_l)? / s_l.len() as f64)
}

pub fn combine_final(mt: f64, nll: f64, lambda_w: f64) -> Result<f64> {
    if !(lambda_w >= 0.0 && lambda_w.is_finite()) {
        return Err(invalid(format!("lambda_w must be non-negative, got {lambda_w}")));
    }
    Ok(lambda_w * mt + nll)
}

/// `lambda_w * multi-turn loss + NLL of the long chosen sequence`.
pub fn final_loss<P, R>(
    policy: &P,
    short_ref: &R,
    sample: &MultiTurnSample,
    beta: f64,
    lambda_w: f64,
    aggregation: Aggregation,
) -> Result<f64>
where
    P: SequencePolicy + ?Sized,
    R: SequencePolicy + ?Sized,
{
    let mt = longpo_mt_loss(policy, short_ref, sample, beta, aggregation)?;
    let nll = nll_loss(policy, &sample.long_chosen_sequence())?;
    combine_final(mt, nll, lambda_w)
}
