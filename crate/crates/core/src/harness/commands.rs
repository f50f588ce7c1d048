//! Subcommand entry points. Each one loads its config (defaults, then file,
//! then overrides), writes `config.resolved.json` and `metrics.jsonl` under
//! the output directory, and returns a pass flag plus lines for the console.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::load_config;
use super::extrapolate::{run_extrapolation, ExtrapolationConfig};
use super::gradcheck::GradHook;
use super::longpo_toy::{dataset_margin, run_longpo_toy, LongPoToyConfig};
use super::pi_fit::{run_pi_fit, PiFitConfig};
use super::verify::run_verify;
use crate::datagen::{gen_dataset, GenConfig, Generator, TokenLayout};
use crate::error::{invalid, Result};
use crate::lm::corpus::{copy_corpus, mixed_copy_corpus, read_corpus};
use crate::lm::{evaluate_ppl, train_step, Checkpoint, ModelConfig, StepRngs, TinyLm, TrainConfig, TrainState};
use crate::metrics::{MetricsRecord, MetricsSink};
use crate::ode::{build_cache, default_grid, BasisCache, IntegratorConfig, OdeDynamics};
use crate::optim::Adam;
use crate::prefopt::{longpo_step, read_dataset, reference_logps, write_dataset, LmPolicy, LongPoConfig, MultiTurnSample, ReferenceLogps};
use crate::rng::substream;
use crate::rope::make_basis;

pub const COMMANDS: &[&str] = &[
    "verify",
    "train-lm",
    "eval-extrapolate",
    "cache-basis",
    "gen-prefs",
    "train-longpo",
    "pi-fit",
    "extrapolation",
    "longpo-toy",
];

/// Options shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub out: PathBuf,
    pub canonical: bool,
    pub filter: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct CommandOutcome {
    pub passed: bool,
    pub lines: Vec<String>,
}

impl CommandOutcome {
    fn ok(lines: Vec<String>) -> Self {
        Self { passed: true, lines }
    }
}

pub fn run_command(name: &str, opts: &RunOptions) -> Result<CommandOutcome> {
    match name {
        "verify" => cmd_verify(opts),
        "train-lm" => cmd_train_lm(opts),
        "eval-extrapolate" => cmd_eval_extrapolate(opts),
        "cache-basis" => cmd_cache_basis(opts),
        "gen-prefs" => cmd_gen_prefs(opts),
        "train-longpo" => cmd_train_longpo(opts),
        "pi-fit" => cmd_pi_fit(opts),
        "extrapolation" => cmd_extrapolation(opts),
        "longpo-toy" => cmd_longpo_toy(opts),
        other => Err(invalid(format!("unknown command '{other}'; known: {}", COMMANDS.join(", ")))),
    }
}

#[derive(Serialize)]
struct Resolved<'a, T> {
    command: &'a str,
    seed: u64,
    config: &'a T,
}

/// Loads the config and opens the output directory.
fn prepare<T>(command: &str, opts: &RunOptions) -> Result<(T, MetricsSink)>
where
    T: Serialize + DeserializeOwned + Default,
{
    let cfg: T = load_config(opts.config.as_deref(), &opts.overrides)?;
    std::fs::create_dir_all(&opts.out)?;
    let mut text = serde_json::to_string_pretty(&Resolved { command, seed: opts.seed, config: &cfg })?;
    text.push('\n');
    std::fs::write(opts.out.join("config.resolved.json"), text)?;
    let sink = MetricsSink::create(&opts.out.join("metrics.jsonl"), opts.canonical)?;
    Ok((cfg, sink))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| invalid(format!("config key '{key}' is required")))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Test hook: added to every analytic W_down gradient before comparison.
    pub w_down_grad_offset: f64,
}

pub fn cmd_verify(opts: &RunOptions) -> Result<CommandOutcome> {
    let (cfg, mut sink): (VerifyConfig, _) = prepare("verify", opts)?;
    let hook = GradHook { w_down_offset: cfg.w_down_grad_offset };
    let outcomes = run_verify(opts.filter.as_deref(), opts.seed, hook, &mut sink)?;
    let lines = outcomes
        .iter()
        .map(|o| format!("{:<16} {}  {}", o.name, if o.passed { "PASS" } else { "FAIL" }, o.detail))
        .collect();
    Ok(CommandOutcome { passed: outcomes.iter().all(|o| o.passed), lines })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainLmConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training corpus file; the synthetic copy corpus is used when absent.
    pub corpus: Option<PathBuf>,
    pub mixed_blocks: bool,
    /// Train with a fixed basis: the dynamics start at zero and never move.
    pub fixed_rope: bool,
    pub log_every: usize,
}

impl Default for TrainLmConfig {
    fn default() -> Self {
        let e = ExtrapolationConfig::default();
        Self { model: e.model, train: e.train, corpus: None, mixed_blocks: true, fixed_rope: false, log_every: 50 }
    }
}

pub fn cmd_train_lm(opts: &RunOptions) -> Result<CommandOutcome> {
    let (cfg, mut sink): (TrainLmConfig, _) = prepare("train-lm", opts)?;
    let seed = opts.seed;
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = seed;
    let mut train = cfg.train.clone();
    if cfg.fixed_rope {
        train.t_max = 1.0;
        train.dynamics_lr = 0.0;
    }
    train.validate(&model_cfg)?;
    let corpus = cfg.corpus.as_deref().map(read_corpus).transpose()?;
    if let Some(c) = &corpus {
        if c.is_empty() {
            return Err(invalid("training corpus is empty"));
        }
        if c.iter().any(|s| s.len() < train.train_len) {
            return Err(invalid(format!("every corpus sequence must hold at least {} tokens", train.train_len)));
        }
        if c.iter().flatten().any(|&t| t as usize >= model_cfg.vocab_size) {
            return Err(invalid("corpus token outside the vocabulary"));
        }
    }

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
    let mut last = None;
    for _ in 0..train.steps {
        let batch: Vec<Vec<u32>> = match &corpus {
            Some(c) => (0..train.batch_size)
                .map(|_| {
                    let s = &c[data_rng.random_range(0..c.len())];
                    let start = data_rng.random_range(0..=s.len() - train.train_len);
                    s[start..start + train.train_len].to_vec()
                })
                .collect(),
            None if cfg.mixed_blocks => mixed_copy_corpus(&mut data_rng, train.batch_size, train.train_len, model_cfg.vocab_size),
            None => copy_corpus(&mut data_rng, train.batch_size, train.train_len, model_cfg.vocab_size),
        };
        let out = train_step(&mut model, &mut dynamics, &base, &mut state, &batch, &train, &mut rngs)?;
        if cfg.log_every > 0 && (out.step % cfg.log_every == 0 || out.step == train.steps) {
            sink.push(
                MetricsRecord::new(out.step, seed)
                    .tag("train")
                    .with("loss", out.loss)
                    .with("t_prime", out.t_prime)
                    .with("grad_norm", out.grad_norm)
                    .with("dynamics_grad_norm", out.dynamics_grad_norm),
            )?;
        }
        last = Some(out.loss);
    }
    let dyn_ref = if cfg.fixed_rope { None } else { Some(&dynamics) };
    let path = opts.out.join("checkpoint.json");
    Checkpoint::new(&model, dyn_ref, Some(train.clone()), train.steps).save(&path)?;
    let mut lines = vec![format!("checkpoint {} ({} parameters)", path.display(), model.num_params())];
    if let Some(l) = last {
        lines.push(format!("final loss {l:.4}"));
    }
    Ok(CommandOutcome::ok(lines))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheBasisConfig {
    pub checkpoint: Option<PathBuf>,
    /// Scaling factors to cache; `{1, 2, 4, ...}` up to the trained `t_max` when empty.
    pub t_values: Vec<f64>,
    /// Integrator override; the checkpoint's training integrator otherwise.
    pub integrator: Option<IntegratorConfig>,
}

impl Default for CacheBasisConfig {
    fn default() -> Self {
        Self { checkpoint: None, t_values: vec![1.0, 2.0, 4.0], integrator: None }
    }
}

/// Basis cache of a checkpoint. A checkpoint without dynamics gets the
/// unscaled basis at every grid point.
fn cache_for(ck: &Checkpoint, t_values: &[f64], integrator: Option<IntegratorConfig>) -> Result<BasisCache> {
    let mc = &ck.model_config;
    let base = make_basis(mc.head_dim, mc.rope_base)?;
    let train = ck.train_config.clone().unwrap_or_default();
    let integrator = integrator.unwrap_or(train.integrator);
    let grid = if t_values.is_empty() { default_grid(train.t_max)? } else { t_values.to_vec() };
    match ck.dynamics()? {
        Some(d) => build_cache(&d, &base, &grid, &integrator, mc.context_len),
        None => build_cache(&OdeDynamics::zeros(mc.head_dim, 1)?, &base, &grid, &integrator, mc.context_len),
    }
}

pub fn cmd_cache_basis(opts: &RunOptions) -> Result<CommandOutcome> {
    let (cfg, mut sink): (CacheBasisConfig, _) = prepare("cache-basis", opts)?;
    let ck = Checkpoint::load(required(&cfg.checkpoint, "checkpoint")?)?;
    let cache = cache_for(&ck, &cfg.t_values, cfg.integrator)?;
    let path = opts.out.join("basis_cache.json");
    write_json(&path, &cache)?;
    for (i, e) in cache.entries().iter().enumerate() {
        sink.push(
            MetricsRecord::new(i, opts.seed)
                .tag("cache")
                .with("t", e.t)
                .with("max_len", e.t * cache.pretrain_len as f64)
                .with("theta_min", e.basis.values().iter().copied().fold(f64::INFINITY, f64::min)),
        )?;
    }
    Ok(CommandOutcome::ok(vec![format!(
        "cached {} bases up to length {} in {}",
        cache.entries().len(),
        cache.max_supported(),
        path.display()
    )]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalExtrapolateConfig {
    pub checkpoint: Option<PathBuf>,
    /// Existing basis cache; built from the checkpoint (and written out) when absent.
    pub cache: Option<PathBuf>,
    pub eval_lengths: Vec<usize>,
    pub eval_sequences: usize,
    /// Evaluation corpus file; the synthetic copy corpus is used when absent.
    pub corpus: Option<PathBuf>,
}

impl Default for EvalExtrapolateConfig {
    fn default() -> Self {
        Self { checkpoint: None, cache: None, eval_lengths: vec![64, 128, 256], eval_sequences: 16, corpus: None }
    }
}

pub fn cmd_eval_extrapolate(opts: &RunOptions) -> Result<CommandOutcome> {
    let (cfg, mut sink): (EvalExtrapolateConfig, _) = prepare("eval-extrapolate", opts)?;
    if cfg.eval_lengths.is_empty() || cfg.eval_sequences == 0 {
        return Err(invalid("eval_lengths and eval_sequences must be non-empty"));
    }
    let ck = Checkpoint::load(required(&cfg.checkpoint, "checkpoint")?)?;
    let model = ck.model()?;
    let cache: BasisCache = match &cfg.cache {
        Some(p) => {
            let c: BasisCache = read_json(p)?;
            c.validate()?;
            if c.entries()[0].basis.dims() != model.config().head_dim {
                return Err(invalid("basis cache head dimension does not match the checkpoint"));
            }
            c
        }
        None => {
            let c = cache_for(&ck, &[], None)?;
            write_json(&opts.out.join("basis_cache.json"), &c)?;
            c
        }
    };
    let file_corpus = cfg.corpus.as_deref().map(read_corpus).transpose()?;
    let vocab = model.config().vocab_size;
    let mut lines = Vec::new();
    for (i, &len) in cfg.eval_lengths.iter().enumerate() {
        let corpus: Vec<Vec<u32>> = match &file_corpus {
            Some(c) => c.iter().filter(|s| s.len() >= len).take(cfg.eval_sequences).map(|s| s[..len].to_vec()).collect(),
            None => copy_corpus(&mut substream(opts.seed, &format!("eval/{len}")), cfg.eval_sequences, len, vocab),
        };
        if corpus.is_empty() {
            return Err(invalid(format!("no evaluation sequences of length {len}")));
        }
        let ppl = evaluate_ppl(&model, &corpus, len, &cache)?;
        sink.push(MetricsRecord::new(i, opts.seed).tag("eval").with("eval_len", len as f64).with("ppl", ppl))?;
        lines.push(format!("len {len:>6}  ppl {ppl:.4}"));
    }
    Ok(CommandOutcome::ok(lines))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenPrefsConfig {
    pub gen: GenConfig,
    pub n_docs: usize,
}

impl Default for GenPrefsConfig {
    fn default() -> Self {
        let toy = LongPoToyConfig::default();
        Self { gen: toy.gen, n_docs: toy.n_docs }
    }
}

pub fn cmd_gen_prefs(opts: &RunOptions) -> Result<CommandOutcome> {
    let (cfg, mut sink): (GenPrefsConfig, _) = prepare("gen-prefs", opts)?;
    cfg.gen.validate()?;
    let ck = Checkpoint::load(required(&cfg.gen.model_checkpoint, "gen.model_checkpoint")?)?;
    let model = ck.model()?;
    if model.config().vocab_size < cfg.gen.layout.vocab_size as usize {
        return Err(invalid("model vocabulary is smaller than the token layout"));
    }
    let basis = make_basis(model.config().head_dim, model.config().rope_base)?;
    let generator = Generator { model: &model, basis: &basis, max_response_len: cfg.gen.max_response_len };
    let (samples, stats) = gen_dataset(&mut substream(opts.seed, "datagen"), &generator, &cfg.gen, cfg.n_docs)?;
    write_dataset(&opts.out.join("dataset.jsonl"), &samples)?;
    write_json(&opts.out.join("datagen_stats.json"), &stats)?;
    sink.push(
        MetricsRecord::new(0, opts.seed)
            .tag("datagen")
            .with("samples", samples.len() as f64)
            .with("turns_generated", stats.turns_generated as f64)
            .with("turns_kept", stats.turns_kept as f64)
            .with("dropped_identical", stats.dropped_identical as f64)
            .with("dropped_repetitive", stats.dropped_repetitive as f64)
            .with("chosen_accuracy", stats.chosen_accuracy)
            .with("rejected_accuracy", stats.rejected_accuracy),
    )?;
    Ok(CommandOutcome::ok(vec![format!(
        "{} samples, {} of {} turns kept",
        samples.len(),
        stats.turns_kept,
        stats.turns_generated
    )]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainLongPoConfig {
    /// Starting policy; also the short-context reference unless `reference` is set.
    pub checkpoint: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub longpo: LongPoConfig,
    pub log_every: usize,
}

impl Default for TrainLongPoConfig {
    fn default() -> Self {
        let toy = LongPoToyConfig::default();
        Self { checkpoint: None, reference: None, dataset: None, longpo: toy.longpo, log_every: toy.log_every }
    }
}

pub fn cmd_train_longpo(opts: &RunOptions) -> Result<CommandOutcome> {
    let (cfg, mut sink): (TrainLongPoConfig, _) = prepare("train-longpo", opts)?;
    cfg.longpo.validate()?;
    let ck = Checkpoint::load(required(&cfg.checkpoint, "checkpoint")?)?;
    let short = match &cfg.reference {
        Some(p) => Checkpoint::load(p)?.model()?,
        None => ck.model()?,
    };
    let mut policy = ck.model()?;
    if short.config() != policy.config() {
        return Err(invalid("policy and reference must share one architecture"));
    }
    let samples: Vec<MultiTurnSample> = read_dataset(required(&cfg.dataset, "dataset")?)?;
    if samples.is_empty() {
        return Err(invalid("preference dataset is empty"));
    }
    let mc = policy.config().clone();
    let basis = make_basis(mc.head_dim, mc.rope_base)?;
    let short_policy = LmPolicy::new(&short, &basis, TokenLayout::BOS);
    let refs = samples.iter().map(|s| reference_logps(&short_policy, s)).collect::<Result<Vec<ReferenceLogps>>>()?;

    let mut opt = Adam::new(cfg.longpo.lr);
    let mut order_rng = substream(opts.seed, "longpo/batches");
    let initial = dataset_margin(&policy, &basis, &samples, &refs, &cfg.longpo)?;
    sink.push(MetricsRecord::new(0, opts.seed).tag("longpo/eval").with("margin", initial))?;
    for step in 1..=cfg.longpo.steps {
        let picks: Vec<usize> = (0..cfg.longpo.batch_size).map(|_| order_rng.random_range(0..samples.len())).collect();
        let batch: Vec<&MultiTurnSample> = picks.iter().map(|&i| &samples[i]).collect();
        let batch_refs: Vec<&ReferenceLogps> = picks.iter().map(|&i| &refs[i]).collect();
        let out = longpo_step(&mut policy, &basis, TokenLayout::BOS, &mut opt, &batch, &batch_refs, &cfg.longpo)?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.longpo.steps) {
            sink.push(
                MetricsRecord::new(step, opts.seed)
                    .tag("longpo/train")
                    .with("loss", out.loss)
                    .with("mt_loss", out.mt_loss)
                    .with("nll", out.nll)
                    .with("chosen_reward", out.chosen_reward)
                    .with("rejected_reward", out.rejected_reward)
                    .with("margin", out.margin)
                    .with("grad_norm", out.grad_norm),
            )?;
        }
    }
    let fin = dataset_margin(&policy, &basis, &samples, &refs, &cfg.longpo)?;
    sink.push(MetricsRecord::new(cfg.longpo.steps, opts.seed).tag("longpo/eval").with("margin", fin))?;
    Checkpoint::new(&policy, None, None, cfg.longpo.steps).save(&opts.out.join("checkpoint.json"))?;
    Ok(CommandOutcome::ok(vec![format!("margin {initial:.4} -> {fin:.4}")]))
}

pub fn cmd_pi_fit(opts: &RunOptions) -> Result<CommandOutcome> {
    let (cfg, mut sink): (PiFitConfig, _) = prepare("pi-fit", opts)?;
    let report = run_pi_fit(&cfg, opts.seed, &mut sink)?;
    write_json(&opts.out.join("report.json"), &report)?;
    Ok(CommandOutcome::ok(vec![format!(
        "{} steps, final loss {:.3e}, max rel err {:.3e}",
        report.steps, report.final_loss, report.max_rel_err
    )]))
}

pub fn cmd_extrapolation(opts: &RunOptions) -> Result<CommandOutcome> {
    let (cfg, mut sink): (ExtrapolationConfig, _) = prepare("extrapolation", opts)?;
    let trained = run_extrapolation(&cfg, opts.seed, &mut sink)?;
    write_json(&opts.out.join("report.json"), &trained.report)?;
    let dyn_ref = if cfg.fixed_rope { None } else { Some(&trained.dynamics) };
    Checkpoint::new(&trained.model, dyn_ref, Some(cfg.train.clone()), cfg.train.steps).save(&opts.out.join("checkpoint.json"))?;
    let lines = trained.report.perplexity.iter().map(|(l, p)| format!("len {l:>6}  ppl {p:.4}")).collect();
    Ok(CommandOutcome::ok(lines))
}

pub fn cmd_longpo_toy(opts: &RunOptions) -> Result<CommandOutcome> {
    let (cfg, mut sink): (LongPoToyConfig, _) = prepare("longpo-toy", opts)?;
    let report = run_longpo_toy(&cfg, opts.seed, &mut sink)?;
    write_json(&opts.out.join("report.json"), &report)?;
    Ok(CommandOutcome::ok(vec![format!(
        "{} samples, margin {:.4} -> {:.4}",
        report.samples, report.initial_margin, report.final_margin
    )]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(dir: &Path, overrides: &[&str]) -> RunOptions {
        RunOptions {
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
            seed: 5,
            out: dir.to_path_buf(),
            canonical: true,
            ..RunOptions::default()
        }
    }

    #[test]
    fn unknown_keys_are_rejected_before_any_work() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_verify(&opts(dir.path(), &["bogus=1"])).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(run_command("nope", &opts(dir.path(), &[])).is_err());
    }

    #[test]
    fn filtered_verify_writes_snapshot_and_one_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut o = opts(dir.path(), &[]);
        o.filter = Some("chain".into());
        let out = cmd_verify(&o).unwrap();
        assert!(out.passed);
        assert_eq!(out.lines.len(), 1);
        let snap: serde_json::Value = read_json(&dir.path().join("config.resolved.json")).unwrap();
        assert_eq!(snap["command"], "verify");
        assert_eq!(crate::metrics::read_metrics(&dir.path().join("metrics.jsonl")).unwrap().len(), 1);
    }
}
