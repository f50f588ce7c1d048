//! Train-short / evaluate-long experiment on the copy corpus.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lm::corpus::{copy_corpus, mixed_copy_corpus};
use crate::lm::{evaluate_ppl, train_step, ModelConfig, StepRngs, TinyLm, TrainConfig, TrainState};
use crate::metrics::{MetricsRecord, MetricsSink};
use crate::ode::{build_cache, default_grid, BasisCache, OdeDynamics};
use crate::positions::SamplerMode;
use crate::rng::substream;
use crate::rope::make_basis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtrapolationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_lengths: Vec<usize>,
    pub eval_sequences: usize,
    /// Keep positions at `1..=L_train`, never scale `t`, and evaluate with the
    /// unscaled basis at every length.
    pub fixed_rope: bool,
    /// Train on copy sequences with a random block length instead of `len / 8`.
    pub mixed_blocks: bool,
    pub log_every: usize,
}

impl Default for ExtrapolationConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                vocab_size: 64,
                n_layers: 2,
                n_heads: 4,
                head_dim: 16,
                ffn_mult: 2,
                context_len: 64,
                rope_base: 10000.0,
                seed: 0,
            },
            train: TrainConfig {
                steps: 4000,
                batch_size: 8,
                lr: 1e-3,
                t_max: 4.0,
                sampler_mode: SamplerMode::Random,
                train_len: 64,
                ..TrainConfig::default()
            },
            eval_lengths: vec![64, 256],
            eval_sequences: 16,
            fixed_rope: false,
            mixed_blocks: true,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationReport {
    pub final_loss: f64,
    /// `(eval_len, perplexity)` in the order requested.
    pub perplexity: Vec<(usize, f64)>,
}

impl ExtrapolationReport {
    pub fn ppl_at(&self, len: usize) -> Option<f64> {
        self.perplexity.iter().find(|(l, _)| *l == len).map(|(_, p)| *p)
    }
}

pub struct TrainedScaler {
    pub model: TinyLm,
    pub dynamics: OdeDynamics,
    pub cache: BasisCache,
    pub report: ExtrapolationReport,
}

pub fn run_extrapolation(cfg: &ExtrapolationConfig, seed: u64, sink: &mut MetricsSink) -> Result<TrainedScaler> {
    let mut train = cfg.train.clone();
    if cfg.fixed_rope {
        train.t_max = 1.0;
        train.sampler_mode = SamplerMode::Uniform;
    }
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = seed;
    train.validate(&model_cfg)?;

    let head_dim = model_cfg.head_dim;
    let base = make_basis(head_dim, model_cfg.rope_base)?;
    let mut model = TinyLm::new(model_cfg.clone(), &mut substream(seed, "model_init"))?;
    let mut dynamics = if cfg.fixed_rope {
        OdeDynamics::zeros(head_dim, train.ode_amp)?
    } else {
        OdeDynamics::init(head_dim, train.ode_amp, &mut substream(seed, "dynamics_init"))?
    };
    let mut state = TrainState::new(&train);
    let mut rngs = StepRngs::from_seed(seed);
    let mut data_rng = substream(seed, "data");
    let tag = if cfg.fixed_rope { "fixed_rope" } else { "ode" };

    let mut final_loss = f64::NAN;
    for _ in 0..train.steps {
        let batch = if cfg.mixed_blocks {
            mixed_copy_corpus(&mut data_rng, train.batch_size, train.train_len, model_cfg.vocab_size)
        } else {
            copy_corpus(&mut data_rng, train.batch_size, train.train_len, model_cfg.vocab_size)
        };
        let out = train_step(&mut model, &mut dynamics, &base, &mut state, &batch, &train, &mut rngs)?;
        final_loss = out.loss;
        if cfg.log_every > 0 && (out.step % cfg.log_every == 0 || out.step == train.steps) {
            sink.push(
                MetricsRecord::new(out.step, seed)
                    .tag(tag)
                    .with("loss", out.loss)
                    .with("t_prime", out.t_prime)
                    .with("lr", out.lr)
                    .with("grad_norm", out.grad_norm)
                    .with("dynamics_grad_norm", out.dynamics_grad_norm),
            )?;
        }
    }

    let grid = default_grid(cfg.train.t_max)?;
    let cache = if cfg.fixed_rope {
        build_cache(&OdeDynamics::zeros(head_dim, 1)?, &base, &grid, &train.integrator, model_cfg.context_len)?
    } else {
        build_cache(&dynamics, &base, &grid, &train.integrator, model_cfg.context_len)?
    };
    let mut perplexity = Vec::new();
    for &len in &cfg.eval_lengths {
        let corpus = copy_corpus(&mut substream(seed, &format!("eval/{len}")), cfg.eval_sequences, len, model_cfg.vocab_size);
        let ppl = evaluate_ppl(&model, &corpus, len, &cache)?;
        sink.push(
            MetricsRecord::new(train.steps, seed)
                .tag(format!("{tag}/eval"))
                .with("eval_len", len as f64)
                .with("ppl", ppl),
        )?;
        perplexity.push((len, ppl));
    }
    Ok(TrainedScaler { model, dynamics, cache, report: ExtrapolationReport { final_loss, perplexity } })
}
