//! Central finite-difference checks of every trainable parameter.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lm::{lm_loss_and_grads, ModelConfig, TinyLm};
use crate::ode::{basis_at, basis_param_gradients, IntegratorConfig, Method, OdeDynamics};
use crate::rng::substream;
use crate::rope::{make_basis, FrequencyBasis};

/// Test hook: added to every analytic `W_down` gradient before comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradHook {
    pub w_down_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    fn record(&mut self, name: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        self.checked += 1;
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        if err >= self.max_rel_err {
            self.max_rel_err = err;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", name());
        }
    }
}

fn new_report() -> GradcheckReport {
    GradcheckReport { checked: 0, max_rel_err: 0.0, worst: String::new() }
}

/// ODE dynamics with `d = 8`, amplification 1, integrated from 1 to 3 in
/// eight RK4 steps; the loss is a random linear functional of the basis.
pub fn ode_gradcheck(seed: u64, hook: GradHook) -> Result<GradcheckReport> {
    let mut rng = substream(seed, "gradcheck/ode");
    let d = 8;
    let mut dynamics = OdeDynamics::init(d, 1, &mut rng)?;
    let normal = Normal::new(0.0, 0.3).expect("valid normal");
    for p in dynamics.params_mut() {
        *p = normal.sample(&mut rng);
    }
    let base = make_basis(d, 100.0)?;
    let cfg = IntegratorConfig::new(Method::Rk4, 4)?;
    let t = 3.0;
    let weights: Vec<f64> = (0..d / 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |dy: &OdeDynamics| -> Result<f64> {
        let b = basis_at(dy, &base, t, &cfg)?;
        Ok(b.values().iter().zip(&weights).map(|(v, w)| v * w).sum())
    };
    let grads = basis_param_gradients(&dynamics, &base, t, &cfg, &weights)?;
    let up = dynamics.w_up().len();
    let down = dynamics.w_down().len();
    let mut report = new_report();
    let h = 1e-5;
    for i in 0..dynamics.params().len() {
        let orig = dynamics.params()[i];
        dynamics.params_mut()[i] = orig + h;
        let plus = loss(&dynamics)?;
        dynamics.params_mut()[i] = orig - h;
        let minus = loss(&dynamics)?;
        dynamics.params_mut()[i] = orig;
        let mut analytic = grads.flat[i];
        if (up..up + down).contains(&i) {
            analytic += hook.w_down_offset;
        }
        let name = || match i {
            i if i < up => format!("W_up[{i}]"),
            i if i < up + down => format!("W_down[{}]", i - up),
            i if i == up + down => "time_w".to_string(),
            _ => "time_b".to_string(),
        };
        report.record(name, analytic, (plus - minus) / (2.0 * h), 1e-6);
    }
    Ok(report)
}

fn gradcheck_model(seed: u64) -> Result<(TinyLm, FrequencyBasis, Vec<Vec<u32>>, Vec<Vec<f64>>)> {
    let cfg = ModelConfig {
        vocab_size: 8,
        n_layers: 1,
        n_heads: 1,
        head_dim: 4,
        ffn_mult: 2,
        context_len: 8,
        rope_base: 10000.0,
        seed,
    };
    let mut rng = substream(seed, "gradcheck/lm");
    let mut model = TinyLm::new(cfg, &mut rng)?;
    // Weights well away from zero so every path carries signal.
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    for p in model.params_mut() {
        for v in p.data.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    let basis = make_basis(4, 10.0)?;
    let seqs: Vec<Vec<u32>> = (0..2).map(|_| (0..5).map(|_| rng.random_range(0..8)).collect()).collect();
    let positions: Vec<Vec<f64>> =
        (0..2).map(|_| (0..5).map(|i| i as f64 * 1.7 + rng.random_range(0.0..1.0)).collect()).collect();
    Ok((model, basis, seqs, positions))
}

/// One-layer, `d = 4`, vocabulary-8 model on two short sequences at
/// fractional positions. Every weight and the basis itself are checked.
pub fn lm_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let (mut model, basis, seqs, positions) = gradcheck_model(seed)?;
    let seq_refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let (_, grads) = lm_loss_and_grads(&model, &seq_refs, &positions, &basis)?;
    let h = 1e-5;
    let mut report = new_report();
    for p in 0..model.params().len() {
        for j in 0..model.params()[p].data.len() {
            let orig = model.params()[p].data[j];
            model.params_mut()[p].data[j] = orig + h;
            let plus = lm_loss_and_grads(&model, &seq_refs, &positions, &basis)?.0;
            model.params_mut()[p].data[j] = orig - h;
            let minus = lm_loss_and_grads(&model, &seq_refs, &positions, &basis)?.0;
            model.params_mut()[p].data[j] = orig;
            let name = model.param_names()[p].clone();
            report.record(|| format!("{name}[{j}]"), grads.params[p].data[j], (plus - minus) / (2.0 * h), 1e-6);
        }
    }
    for j in 0..basis.pairs() {
        let shifted = |delta: f64| -> Result<f64> {
            let mut v = basis.values().to_vec();
            v[j] += delta;
            lm_loss_and_grads(&model, &seq_refs, &positions, &FrequencyBasis::new(v)?).map(|r| r.0)
        };
        let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        report.record(|| format!("theta[{j}]"), grads.theta[j], numeric, 1e-6);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ode_parameters_pass() {
        let r = ode_gradcheck(0, GradHook::default()).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
        assert_eq!(r.checked, 8 * 4 + 4 * 8 + 2);
    }

    #[test]
    fn perturbed_w_down_fails() {
        let r = ode_gradcheck(0, GradHook { w_down_offset: 1e-2 }).unwrap();
        assert!(!r.passes(1e-4));
        assert!(r.worst.starts_with("W_down"), "{}", r.worst);
    }

    #[test]
    fn lm_parameters_pass() {
        let r = lm_gradcheck(0).unwrap();
        assert!(r.passes(1e-3), "{r:?}");
    }
}
