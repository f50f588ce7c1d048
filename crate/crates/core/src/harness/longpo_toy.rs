//! End-to-end short-to-long preference run at toy scale: train a short-context
//! model on fact lookup, let it write chosen/rejected responses for long
//! documents, then optimize the LongPO objective starting from it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{gen_dataset, gen_instruction, make_docs, sample_chunks, DatagenStats, GenConfig, Generator, TokenLayout};
use crate::error::{invalid, Result};
use crate::lm::{ModelConfig, TinyLm};
use crate::metrics::{MetricsRecord, MetricsSink};
use crate::optim::Adam;
use crate::prefopt::{
    aggregate, longpo_step, reference_logps, LmPolicy, LongPoConfig, MultiTurnSample, ReferenceLogps,
};
use crate::rng::substream;
use crate::rope::{make_basis, FrequencyBasis};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongPoToyConfig {
    pub model: ModelConfig,
    pub gen: GenConfig,
    pub short_steps: usize,
    pub short_batch: usize,
    pub short_lr: f64,
    /// Lengths of the self-contained documents used to train the short model.
    pub short_doc_len: [usize; 2],
    pub n_docs: usize,
    pub longpo: LongPoConfig,
    pub log_every: usize,
}

impl Default for LongPoToyConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                vocab_size: 64,
                n_layers: 2,
                n_heads: 2,
                head_dim: 16,
                ffn_mult: 2,
                context_len: 48,
                rope_base: 10000.0,
                seed: 0,
            },
            gen: GenConfig {
                min_doc_len: 128,
                max_doc_len: 256,
                fact_spacing: 32,
                chunk_len_max: 32,
                max_response_len: 4,
                ..GenConfig::default()
            },
            short_steps: 400,
            short_batch: 16,
            short_lr: 3e-3,
            short_doc_len: [16, 40],
            n_docs: 24,
            longpo: LongPoConfig { steps: 500, batch_size: 4, lr: 2e-3, ..LongPoConfig::default() },
            log_every: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongPoToyReport {
    pub short_final_loss: f64,
    pub datagen: DatagenStats,
    pub samples: usize,
    pub initial_margin: f64,
    pub final_margin: f64,
}

/// Supervised fact lookup on short self-contained documents: the loss is the
/// NLL of `value EOS` given `document SEP phrase key ANS`.
pub fn train_short_model(cfg: &LongPoToyConfig, seed: u64, sink: &mut MetricsSink) -> Result<(TinyLm, f64)> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = seed;
    let mut model = TinyLm::new(model_cfg.clone(), &mut substream(seed, "short/init"))?;
    let basis = make_basis(model_cfg.head_dim, model_cfg.rope_base)?;
    let mut rng = substream(seed, "short/data");
    let mut opt = Adam::new(cfg.short_lr);
    let [lo, hi] = cfg.short_doc_len;
    let mut last = f64::NAN;
    for step in 1..=cfg.short_steps {
        let docs = make_docs(&mut rng, cfg.short_batch, &cfg.gen.layout, lo, hi, cfg.gen.fact_spacing)?;
        let mut examples = Vec::with_capacity(docs.len());
        for doc in &docs {
            let chunk = &sample_chunks(&mut rng, doc, 1, usize::MAX)?[0];
            let ins = gen_instruction(&mut rng, chunk, &cfg.gen)?;
            examples.push(([&doc.tokens[..], &ins.tokens].concat(), ins.reference_answer().to_vec()));
        }
        let pairs: Vec<(&[u32], &[u32])> = examples.iter().map(|(c, r)| (c.as_slice(), r.as_slice())).collect();
        let n = pairs.len() as f64;
        let policy = LmPolicy::new(&model, &basis, TokenLayout::BOS);
        let (_, loss, grads) = policy.loss_and_gradients(&pairs, |lp| {
            Ok((-lp.iter().sum::<f64>() / n, vec![-1.0 / n; lp.len()]))
        })?;
        let mut slots: Vec<(&mut [f64], &[f64])> = model
            .params_mut()
            .iter_mut()
            .zip(&grads.params)
            .map(|(p, g)| (p.data.as_mut_slice(), g.data.as_slice()))
            .collect();
        opt.update(&mut slots);
        last = loss;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.short_steps) {
            sink.push(MetricsRecord::new(step, seed).tag("longpo_toy/short").with("loss", loss))?;
        }
    }
    Ok((model, last))
}

/// Mean implicit reward margin over a dataset.
pub fn dataset_margin(
    model: &TinyLm,
    basis: &FrequencyBasis,
    samples: &[MultiTurnSample],
    refs: &[ReferenceLogps],
    cfg: &LongPoConfig,
) -> Result<f64> {
    let policy = LmPolicy::new(model, basis, TokenLayout::BOS);
    let mut total = 0.0;
    for (s, r) in samples.iter().zip(refs) {
        let quads = (0..s.turns.len()).map(|i| s.quadruple(i)).collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(&[u32], &[u32])> =
            quads.iter().flat_map(|q| [(q.x_l.as_slice(), q.y_s.as_slice()), (q.x_l.as_slice(), q.y_l.as_slice())]).collect();
        let lp = policy.batch_logprobs(&pairs)?;
        let chosen: Vec<f64> = lp.iter().step_by(2).copied().collect();
        let rejected: Vec<f64> = lp.iter().skip(1).step_by(2).copied().collect();
        let rc = cfg.beta * (aggregate(&chosen, cfg.aggregation) - aggregate(&r.chosen, cfg.aggregation));
        let rr = cfg.beta * (aggregate(&rejected, cfg.aggregation) - aggregate(&r.rejected, cfg.aggregation));
        total += rc - rr;
    }
    Ok(total / samples.len() as f64)
}

pub fn run_longpo_toy(cfg: &LongPoToyConfig, seed: u64, sink: &mut MetricsSink) -> Result<LongPoToyReport> {
    cfg.longpo.validate()?;
    cfg.gen.validate()?;
    let (short, short_final_loss) = train_short_model(cfg, seed, sink)?;
    let basis = make_basis(cfg.model.head_dim, cfg.model.rope_base)?;

    let generator = Generator { model: &short, basis: &basis, max_response_len: cfg.gen.max_response_len };
    let (samples, stats) = gen_dataset(&mut substream(seed, "datagen"), &generator, &cfg.gen, cfg.n_docs)?;
    if samples.is_empty() {
        return Err(invalid("data generation produced no preference pairs"));
    }
    sink.push(
        MetricsRecord::new(0, seed)
            .tag("longpo_toy/datagen")
            .with("samples", samples.len() as f64)
            .with("turns_kept", stats.turns_kept as f64)
            .with("dropped_identical", stats.dropped_identical as f64)
            .with("chosen_accuracy", stats.chosen_accuracy)
            .with("rejected_accuracy", stats.rejected_accuracy),
    )?;

    let short_policy = LmPolicy::new(&short, &basis, TokenLayout::BOS);
    let refs = samples.iter().map(|s| reference_logps(&short_policy, s)).collect::<Result<Vec<_>>>()?;

    let mut policy = short.clone();
    let mut opt = Adam::new(cfg.longpo.lr);
    let mut order_rng = substream(seed, "longpo/batches");
    let initial_margin = dataset_margin(&policy, &basis, &samples, &refs, &cfg.longpo)?;
    sink.push(MetricsRecord::new(0, seed).tag("longpo_toy/eval").with("margin", initial_margin))?;
    for step in 1..=cfg.longpo.steps {
        let picks: Vec<usize> = (0..cfg.longpo.batch_size).map(|_| order_rng.random_range(0..samples.len())).collect();
        let batch: Vec<&MultiTurnSample> = picks.iter().map(|&i| &samples[i]).collect();
        let batch_refs: Vec<&ReferenceLogps> = picks.iter().map(|&i| &refs[i]).collect();
        let out = longpo_step(&mut policy, &basis, TokenLayout::BOS, &mut opt, &batch, &batch_refs, &cfg.longpo)?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.longpo.steps) {
            sink.push(
                MetricsRecord::new(step, seed)
                    .tag("longpo_toy/train")
                    .with("loss", out.loss)
                    .with("mt_loss", out.mt_loss)
                    .with("nll", out.nll)
                    .with("chosen_reward", out.chosen_reward)
                    .with("rejected_reward", out.rejected_reward)
                    .with("margin", out.margin),
            )?;
        }
    }
    let final_margin = dataset_margin(&policy, &basis, &samples, &refs, &cfg.longpo)?;
    sink.push(MetricsRecord::new(cfg.longpo.steps, seed).tag("longpo_toy/eval").with("margin", final_margin))?;
    Ok(LongPoToyReport { short_final_loss, datagen: stats, samples: samples.len(), initial_margin, final_margin })
}
