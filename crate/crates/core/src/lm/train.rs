use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::{backprop_logprobs, LmGradients, SeqInput, TinyLm};
use crate::error::{invalid, Error, Result};
use crate::ode::{basis_at, basis_param_gradients, sample_t, BasisCache, OdeDynamics};
use crate::optim::Adam;
use crate::positions::sample_positions;
use crate::rng::Rng;
use crate::rope::FrequencyBasis;

/// Optimizer state for the model and the frequency dynamics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub model_opt: Adam,
    pub dynamics_opt: Adam,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { step: 0, model_opt: Adam::new(cfg.lr), dynamics_opt: Adam::new(cfg.dynamics_lr) }
    }
}

/// Random streams consumed by a training step.
pub struct StepRngs {
    pub t_sample: Rng,
    pub positions: Rng,
}

impl StepRngs {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            t_sample: crate::rng::substream(seed, "t_sample"),
            positions: crate::rng::substream(seed, "positions"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: usize,
    pub loss: f64,
    pub t_prime: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub dynamics_grad_norm: f64,
}

/// Mean next-token cross-entropy over a batch and its gradients.
pub fn lm_loss_and_grads(
    model: &TinyLm,
    seqs: &[&[u32]],
    positions: &[Vec<f64>],
    basis: &FrequencyBasis,
) -> Result<(f64, LmGradients)> {
    let inputs: Vec<SeqInput> = seqs
        .iter()
        .zip(positions)
        .map(|(t, p)| SeqInput::next_token(t, p))
        .collect();
    let graph = model.build(&inputs, basis)?;
    let count = inputs.iter().map(|s| s.targets.iter().flatten().count()).sum::<usize>();
    if count == 0 {
        return Err(invalid("batch has no next-token targets"));
    }
    let lp = graph.row_logprobs();
    let loss = -lp.iter().sum::<f64>() / count as f64;
    let targets: Vec<bool> = inputs.iter().flat_map(|s| s.targets.iter().map(Option::is_some)).collect();
    let weights = targets.iter().map(|&t| if t { -1.0 / count as f64 } else { 0.0 }).collect();
    Ok((loss, backprop_logprobs(model, &graph, weights)))
}

pub(crate) fn clip(grads: &mut [&mut [f64]], max_norm: Option<f64>, norm: f64) {
    if let Some(max) = max_norm {
        if norm > max && norm > 0.0 {
            let s = max / norm;
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
        }
    }
}

/// One joint update: sample `t'`, grow the basis with the dynamics, spread
/// positions over `[1, t'*L]`, and step both parameter sets on the LM loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut TinyLm,
    dynamics: &mut OdeDynamics,
    base: &FrequencyBasis,
    state: &mut TrainState,
    batch: &[Vec<u32>],
    cfg: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if let Some(s) = batch.iter().find(|s| s.len() != cfg.train_len) {
        return Err(invalid(format!("sequence of length {} in a batch for L_train = {}", s.len(), cfg.train_len)));
    }
    let pretrain_len = model.config().context_len;
    let t_prime = sample_t(&mut rngs.t_sample, cfg.t_max)?;
    let basis = basis_at(&*dynamics, base, t_prime, &cfg.integrator)?;
    let positions = batch
        .iter()
        .map(|_| {
            sample_positions(&mut rngs.positions, cfg.sampler_mode, cfg.train_len, t_prime, pretrain_len)
                .map(|s| s.positions().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let seqs: Vec<&[u32]> = batch.iter().map(Vec::as_slice).collect();
    let (loss, mut grads) = lm_loss_and_grads(model, &seqs, &positions, &basis)?;
    state.step += 1;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step });
    }

    let grad_norm = grads.param_norm();
    let mut dyn_grads = basis_param_gradients(dynamics, base, t_prime, &cfg.integrator, &grads.theta)?;
    let dynamics_grad_norm = dyn_grads.flat.iter().map(|g| g * g).sum::<f64>().sqrt();

    if !cfg.freeze_model {
        let mut slices: Vec<&mut [f64]> = grads.params.iter_mut().map(|m| m.data.as_mut_slice()).collect();
        clip(&mut slices, cfg.grad_clip, grad_norm);
        let mut slots: Vec<(&mut [f64], &[f64])> = model
            .params_mut()
            .iter_mut()
            .zip(&grads.params)
            .map(|(p, g)| (p.data.as_mut_slice(), g.data.as_slice()))
            .collect();
        state.model_opt.update(&mut slots);
    }
    clip(&mut [dyn_grads.flat.as_mut_slice()], cfg.grad_clip, dynamics_grad_norm);
    state.dynamics_opt.update(&mut [(dynamics.params_mut(), dyn_grads.flat.as_slice())]);

    Ok(StepOutcome {
        step: state.step,
        loss,
        t_prime,
        lr: state.model_opt.lr,
        grad_norm,
        dynamics_grad_norm,
    })
}

/// Sum of next-token NLL and the number of predictions, at positions `1..=len`.
pub fn total_nll(model: &TinyLm, corpus: &[Vec<u32>], len: usize, basis: &FrequencyBasis) -> Result<(f64, usize)> {
    const CHUNK: usize = 8;
    let positions: Vec<f64> = (1..=len).map(|i| i as f64).collect();
    let mut nll = 0.0;
    let mut count = 0;
    for chunk in corpus.chunks(CHUNK) {
        let inputs = chunk
            .iter()
            .map(|s| {
                if s.len() < len {
                    return Err(invalid(format!("sequence of length {} is shorter than {len}", s.len())));
                }
                Ok(SeqInput::next_token(&s[..len], &positions))
            })
            .collect::<Result<Vec<_>>>()?;
        let graph = model.build(&inputs, basis)?;
        nll -= graph.row_logprobs().iter().sum::<f64>();
        count += inputs.len() * (len - 1);
    }
    Ok((nll, count))
}

/// Perplexity at `eval_len`, using the cached basis whose `t_k*L` first covers it.
pub fn evaluate_ppl(model: &TinyLm, corpus: &[Vec<u32>], eval_len: usize, cache: &BasisCache) -> Result<f64> {
    if eval_len < 2 {
        return Err(invalid("eval_len must be >= 2"));
    }
    if corpus.is_empty() {
        return Err(invalid("empty evaluation corpus"));
    }
    let basis = cache.lookup(eval_len)?;
    let (nll, count) = total_nll(model, corpus, eval_len, basis)?;
    Ok((nll / count as f64).exp())
}
