//! Exact tabular policies and the closed-form KL-constrained optimum.

use serde::{Deserialize, Serialize};

use super::SequencePolicy;
use crate::error::{invalid, Result};

const ROW_TOL: f64 = 1e-12;

/// `probs[c][r]` is the probability of `responses[r]` given `contexts[c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    contexts: Vec<Vec<u32>>,
    responses: Vec<Vec<u32>>,
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(contexts: Vec<Vec<u32>>, responses: Vec<Vec<u32>>, probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.len() != contexts.len() {
            return Err(invalid(format!("{} rows for {} contexts", probs.len(), contexts.len())));
        }
        if responses.is_empty() || responses.iter().any(Vec::is_empty) {
            return Err(invalid("responses must be non-empty"));
        }
        for (c, row) in probs.iter().enumerate() {
            if row.len() != responses.len() {
                return Err(invalid(format!("row {c} has {} entries for {} responses", row.len(), responses.len())));
            }
            if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                return Err(invalid(format!("row {c} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(invalid(format!("row {c} sums to {sum}")));
            }
        }
        Ok(Self { contexts, responses, probs })
    }

    /// Builds rows by normalizing non-negative weights.
    pub fn from_weights(contexts: Vec<Vec<u32>>, responses: Vec<Vec<u32>>, weights: Vec<Vec<f64>>) -> Result<Self> {
        let probs = weights.into_iter().map(normalize).collect::<Result<Vec<_>>>()?;
        Self::new(contexts, responses, probs)
    }

    pub fn contexts(&self) -> &[Vec<u32>] {
        &self.contexts
    }

    pub fn responses(&self) -> &[Vec<u32>] {
        &self.responses
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.probs[context]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn context_index(&self, context: &[u32]) -> Option<usize> {
        self.contexts.iter().position(|c| c == context)
    }

    pub fn response_index(&self, response: &[u32]) -> Option<usize> {
        self.responses.iter().position(|r| r == response)
    }
}

impl SequencePolicy for TabularPolicy {
    fn seq_logprob(&self, context: &[u32], response: &[u32]) -> Result<f64> {
        if response.is_empty() {
            return Err(invalid("response must be non-empty"));
        }
        let c = self.context_index(context).ok_or_else(|| invalid("context not in table"))?;
        let r = self.response_index(response).ok_or_else(|| invalid("response not in table"))?;
        Ok(self.probs[c][r].ln())
    }
}

fn normalize(w: Vec<f64>) -> Result<Vec<f64>> {
    let z: f64 = w.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(invalid(format!("cannot normalize weights summing to {z}")));
    }
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// `KL(p || q)` over a shared finite support.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid(format!("distributions of size {} and {}", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(invalid("q must be positive wherever p is"));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// `beta * KL(policy(.|x_l) || short_ref(.|x_s))`.
pub fn stl_constraint(policy: &TabularPolicy, short_ref: &TabularPolicy, x_l: &[u32], x_s: &[u32], beta: f64) -> Result<f64> {
    let l = policy.context_index(x_l).ok_or_else(|| invalid("x_l not in policy table"))?;
    let s = short_ref.context_index(x_s).ok_or_else(|| invalid("x_s not in reference table"))?;
    if policy.responses != short_ref.responses {
        return Err(invalid("policies are over different response sets"));
    }
    Ok(beta * kl_divergence(policy.row(l), short_ref.row(s))?)
}

/// Maximizer of `E[r] - beta * KL(pi(.|x_l) || short_ref(.|x_s))`:
/// `pi*(y|x_l) = short_ref(y|x_s) exp(r(x_l, y) / beta) / Z`.
/// `short_of[i]` names the short-reference row paired with long context `i`.
pub fn optimal_policy(
    short_ref: &TabularPolicy,
    long_contexts: Vec<Vec<u32>>,
    short_of: &[usize],
    reward: &[Vec<f64>],
    beta: f64,
) -> Result<TabularPolicy> {
    check_pairing(short_ref, long_contexts.len(), short_of, reward)?;
    if !(beta > 0.0) {
        return Err(invalid("beta must be positive"));
    }
    let weights = short_of
        .iter()
        .zip(reward)
        .map(|(&s, r)| short_ref.row(s).iter().zip(r).map(|(p, r)| p * (r / beta).exp()).collect())
        .collect();
    TabularPolicy::from_weights(long_contexts, short_ref.responses.clone(), weights)
}

/// `log Z(x_l, x_s)` for the optimum above.
pub fn log_partition(short_ref: &TabularPolicy, short_row: usize, reward: &[f64], beta: f64) -> f64 {
    short_ref.row(short_row).iter().zip(reward).map(|(p, r)| p * (r / beta).exp()).sum::<f64>().ln()
}

/// `r(x_l, y) = beta log(pi*(y|x_l) / short_ref(y|x_s)) + beta log Z`.
pub fn recovered_reward(
    policy: &TabularPolicy,
    short_ref: &TabularPolicy,
    short_of: &[usize],
    log_z: &[f64],
    beta: f64,
) -> Vec<Vec<f64>> {
    short_of
        .iter()
        .enumerate()
        .map(|(l, &s)| {
            policy
                .row(l)
                .iter()
                .zip(short_ref.row(s))
                .map(|(p, q)| beta * (p / q).ln() + beta * log_z[l])
                .collect()
        })
        .collect()
}

/// Exact `sum_x w(x) (E_pi[r(x, .)] - beta KL(pi(.|x) || ref(.|ref_of[x])))`.
pub fn rlhf_objective_value(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    ref_of: &[usize],
    reward: &[Vec<f64>],
    x_weights: &[f64],
    beta: f64,
) -> Result<f64> {
    check_pairing(reference, policy.contexts.len(), ref_of, reward)?;
    if x_weights.len() != policy.contexts.len() {
        return Err(invalid("one weight per context is required"));
    }
    let mut total = 0.0;
    for (x, &w) in x_weights.iter().enumerate() {
        let row = policy.row(x);
        let er: f64 = row.iter().zip(&reward[x]).map(|(p, r)| p * r).sum();
        total += w * (er - beta * kl_divergence(row, reference.row(ref_of[x]))?);
    }
    Ok(total)
}

fn check_pairing(reference: &TabularPolicy, n: usize, map: &[usize], reward: &[Vec<f64>]) -> Result<()> {
    if map.len() != n || reward.len() != n {
        return Err(invalid(format!("expected {n} context pairings and reward rows")));
    }
    if map.iter().any(|&s| s >= reference.contexts.len()) {
        return Err(invalid("reference row index out of range"));
    }
    if reward.iter().any(|r| r.len() != reference.responses.len()) {
        return Err(invalid("reward rows must cover every response"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two(p: [f64; 2]) -> TabularPolicy {
        TabularPolicy::new(vec![vec![0]], vec![vec![1], vec![2]], vec![p.to_vec()]).unwrap()
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let kl = kl_divergence(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        assert!((kl - 0.3680642071684971).abs() < 1e-15);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert_eq!(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln());
    }

    #[test]
    fn optimal_policy_closed_form() {
        let short = two([0.8, 0.2]);
        let pi = optimal_policy(&short, vec![vec![0, 5]], &[0], &[vec![1.0, 0.0]], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((pi.row(0)[0] - 0.8 * e / (0.8 * e + 0.2)).abs() < 1e-15);
        assert!((pi.row(0)[0] - 0.915776).abs() < 1e-6);
        let same = optimal_policy(&short, vec![vec![0, 5]], &[0], &[vec![0.0, 0.0]], 0.5).unwrap();
        assert_eq!(same.row(0), short.row(0));
    }

    #[test]
    fn objective_at_reference_is_expected_reward() {
        let p = two([0.25, 0.75]);
        let v = rlhf_objective_value(&p, &p, &[0], &[vec![2.0, -1.0]], &[1.0], 3.0).unwrap();
        assert_eq!(v, 0.25 * 2.0 - 0.75);
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        assert!(TabularPolicy::new(vec![vec![0]], vec![vec![1]], vec![vec![0.5]]).is_err());
        assert!(TabularPolicy::new(vec![vec![0]], vec![vec![1], vec![2]], vec![vec![1.5, -0.5]]).is_err());
        let p = two([0.5, 0.5]);
        assert!((p.seq_logprob(&[0], &[2]).unwrap() + 2f64.ln()).abs() < 1e-15);
        assert!(p.seq_logprob(&[9], &[2]).is_err());
    }
}
