//! Fit the learned dynamics to the position-interpolation log chain
//! `z(t) = z(1) - ln t`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{MetricsRecord, MetricsSink};
use crate::ode::{basis_at, integrate, param_gradients, sample_t, IntegratorConfig, OdeDynamics};
use crate::optim::Adam;
use crate::rng::substream;
use crate::rope::make_basis;
use crate::scaling::LogBasis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiFitConfig {
    pub head_dim: usize,
    pub rope_base: f64,
    pub amp: usize,
    pub t_max: f64,
    pub steps: usize,
    pub lr: f64,
    /// Decay the learning rate linearly to zero over the run.
    pub lr_decay: bool,
    pub integrator: IntegratorConfig,
    pub log_every: usize,
}

impl Default for PiFitConfig {
    fn default() -> Self {
        Self {
            head_dim: 16,
            rope_base: 10000.0,
            amp: 2,
            t_max: 2.0,
            steps: 2000,
            lr: 1e-2,
            lr_decay: true,
            integrator: IntegratorConfig::default(),
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiFitReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Largest `|basis_at(t_max)_i / (base_i / t_max) - 1|`.
    pub max_rel_err: f64,
}

/// Each step regresses `z(t')` for a random `t'` and `z(t_max)` onto the PI
/// targets with squared error.
pub fn run_pi_fit(cfg: &PiFitConfig, seed: u64, sink: &mut MetricsSink) -> Result<PiFitReport> {
    let base = make_basis(cfg.head_dim, cfg.rope_base)?;
    let z1 = LogBasis::from_basis(&base);
    let mut dynamics = OdeDynamics::init(cfg.head_dim, cfg.amp, &mut substream(seed, "dynamics_init"))?;
    let mut t_rng = substream(seed, "t_sample");
    let mut opt = Adam::new(cfg.lr);
    let n = z1.len() as f64;
    let mut final_loss = f64::NAN;
    for step in 1..=cfg.steps {
        let t_prime = sample_t(&mut t_rng, cfg.t_max)?;
        let mut loss = 0.0;
        let mut grads = vec![0.0; dynamics.params().len()];
        for t in [t_prime, cfg.t_max] {
            if t == 1.0 {
                continue;
            }
            let z = integrate(&dynamics, &z1, t, &cfg.integrator)?;
            let resid: Vec<f64> = z.z.iter().zip(&z1.z).map(|(zt, z0)| zt - (z0 - t.ln())).collect();
            loss += resid.iter().map(|r| r * r).sum::<f64>() / n;
            let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
            let g = param_gradients(&dynamics, &z1, t, &cfg.integrator, &upstream)?;
            grads.iter_mut().zip(&g.flat).for_each(|(a, b)| *a += b);
        }
        if cfg.lr_decay {
            opt.lr = cfg.lr * (1.0 - (step - 1) as f64 / cfg.steps as f64);
        }
        opt.update(&mut [(dynamics.params_mut(), grads.as_slice())]);
        final_loss = loss;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps) {
            sink.push(MetricsRecord::new(step, seed).tag("pi_fit").with("loss", loss).with("t_prime", t_prime))?;
        }
    }
    let fitted = basis_at(&dynamics, &base, cfg.t_max, &cfg.integrator)?;
    let max_rel_err = fitted
        .values()
        .iter()
        .zip(base.values())
        .map(|(f, b)| (f / (b / cfg.t_max) - 1.0).abs())
        .fold(0.0, f64::max);
    sink.push(MetricsRecord::new(cfg.steps, seed).tag("pi_fit/result").with("max_rel_err", max_rel_err))?;
    Ok(PiFitReport { steps: cfg.steps, final_loss, max_rel_err })
}
