//! Preference optimization: pairwise objectives, tabular oracles and the
//! LongPO training step.

mod objectives;
mod policy;
mod sample;
mod tabular;
mod train;

pub use objectives::{
    aggregate, aggregate_turns, bt_preference, combine_final, dpo_loss, final_loss, log_sum_exp, longpo_logps,
    longpo_loss, longpo_mt_loss, longpo_reward, multiturn_turn_logps, neg_log_sigmoid, nll_loss, preference_loss,
    sigmoid, Aggregation, PairLogps,
};
pub use policy::LmPolicy;
pub use sample::{read_dataset, write_dataset, MultiTurnSample, PreferenceQuadruple, Turn};
pub use tabular::{
    kl_divergence, log_partition, optimal_policy, recovered_reward, rlhf_objective_value, stl_constraint,
    TabularPolicy,
};
pub use train::{longpo_step, reference_logps, LongPoConfig, LongPoOutcome, ReferenceLogps};

use crate::error::Result;

/// Anything that can score `log p(response | context)`.
pub trait SequencePolicy {
    fn seq_logprob(&self, context: &[u32], response: &[u32]) -> Result<f64>;
}
