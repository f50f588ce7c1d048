use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dynamics::{OdeDynamics, OdeGradients, VectorField};
use crate::error::{invalid, Error, Result};
use crate::rope::FrequencyBasis;
use crate::scaling::LogBasis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub steps_per_unit_t: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { method: Method::Rk4, steps_per_unit_t: 4 }
    }
}

impl IntegratorConfig {
    pub fn new(method: Method, steps_per_unit_t: usize) -> Result<Self> {
        if steps_per_unit_t == 0 {
            return Err(invalid("steps_per_unit_t must be >= 1"));
        }
        Ok(Self { method, steps_per_unit_t })
    }

    /// Number of fixed steps used to cover a span of length `span`.
    pub fn steps_for(&self, span: f64) -> usize {
        ((self.steps_per_unit_t as f64 * span).ceil() as usize).max(1)
    }
}

fn axpy(z: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    z.iter().zip(k).map(|(z, k)| z + a * k).collect()
}

fn step<F: VectorField + ?Sized>(field: &F, method: Method, z: &[f64], t: f64, h: f64) -> Vec<f64> {
    match method {
        Method::Euler => axpy(z, h, &field.eval(z, t)),
        Method::Rk4 => {
            let k1 = field.eval(z, t);
            let k2 = field.eval(&axpy(z, 0.5 * h, &k1), t + 0.5 * h);
            let k3 = field.eval(&axpy(z, 0.5 * h, &k2), t + 0.5 * h);
            let k4 = field.eval(&axpy(z, h, &k3), t + h);
            z.iter()
                .enumerate()
                .map(|(i, z)| z + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        }
    }
}

/// Fixed-step trajectory from `t0` to `t1`; returns every state including both ends.
fn trajectory<F: VectorField + ?Sized>(
    field: &F,
    z0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<(Vec<Vec<f64>>, f64)> {
    if z0.len() != field.dim() {
        return Err(invalid(format!(
            "state length {} does not match field dimension {}",
            z0.len(),
            field.dim()
        )));
    }
    if !(t0.is_finite() && t1.is_finite() && t1 >= t0) {
        return Err(invalid(format!("integration span [{t0}, {t1}] is not valid")));
    }
    if t1 == t0 {
        return Ok((vec![z0.to_vec()], 0.0));
    }
    let n = cfg.steps_for(t1 - t0);
    let h = (t1 - t0) / n as f64;
    let mut states = Vec::with_capacity(n + 1);
    states.push(z0.to_vec());
    for i in 0..n {
        let t = t0 + i as f64 * h;
        let next = step(field, cfg.method, &states[i], t, h);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { step: i + 1, t: t + h });
        }
        states.push(next);
    }
    Ok((states, h))
}

/// Integrates `dz/dt = g(z, t)` over `[t0, t1]` with fixed steps.
pub fn integrate_span<F: VectorField + ?Sized>(
    field: &F,
    z0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    let (mut states, _) = trajectory(field, z0, t0, t1, cfg)?;
    Ok(states.pop().expect("trajectory is non-empty"))
}

/// `z(t') = z(1) + integral_1^t' g(z(t), t) dt`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    z1: &LogBasis,
    t_target: f64,
    cfg: &IntegratorConfig,
) -> Result<LogBasis> {
    if !(t_target.is_finite() && t_target >= 1.0) {
        return Err(invalid(format!("target t must be >= 1, got {t_target}")));
    }
    Ok(LogBasis { z: integrate_span(field, &z1.z, 1.0, t_target, cfg)? })
}

/// Scaled basis `exp(z(t'))` grown from `base` by the learned dynamics.
pub fn basis_at<F: VectorField + ?Sized>(
    field: &F,
    base: &FrequencyBasis,
    t_prime: f64,
    cfg: &IntegratorConfig,
) -> Result<FrequencyBasis> {
    if t_prime == 1.0 {
        return Ok(base.clone());
    }
    let z1 = LogBasis::from_basis(base);
    let z = integrate(field, &z1, t_prime, cfg)?;
    // theta * exp(z(t') - z(1)) keeps the base bit-exact when the flow is zero.
    let values = base
        .values()
        .iter()
        .zip(z.z.iter().zip(&z1.z))
        .map(|(b, (zt, z0))| b * (zt - z0).exp())
        .collect();
    FrequencyBasis::new(values).map_err(|_| Error::NumericOverflow {
        step: cfg.steps_for(t_prime - 1.0),
        t: t_prime,
    })
}

/// Reverse-mode gradient of `upstream . z(t_target)` with respect to the
/// field parameters, differentiating the discrete integrator exactly.
pub fn field_param_gradients<F: VectorField + ?Sized>(
    field: &F,
    z1: &[f64],
    t_target: f64,
    cfg: &IntegratorConfig,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    if upstream.len() != field.dim() {
        return Err(invalid("upstream gradient length does not match the state"));
    }
    let (states, h) = trajectory(field, z1, 1.0, t_target, cfg)?;
    let mut grads = vec![0.0; field.num_params()];
    let mut adj = upstream.to_vec();
    for i in (0..states.len() - 1).rev() {
        let z = &states[i];
        let t = 1.0 + i as f64 * h;
        match cfg.method {
            Method::Euler => {
                let scaled: Vec<f64> = adj.iter().map(|a| a * h).collect();
                let dz = field.vjp(z, t, &scaled, &mut grads);
                adj.iter_mut().zip(dz).for_each(|(a, d)| *a += d);
            }
            Method::Rk4 => {
                let k1 = field.eval(z, t);
                let z2 = axpy(z, 0.5 * h, &k1);
                let k2 = field.eval(&z2, t + 0.5 * h);
                let z3 = axpy(z, 0.5 * h, &k2);
                let k3 = field.eval(&z3, t + 0.5 * h);
                let z4 = axpy(z, h, &k3);

                let mut a_k: Vec<Vec<f64>> = [1.0, 2.0, 2.0, 1.0]
                    .iter()
                    .map(|w| adj.iter().map(|a| a * h * w / 6.0).collect())
                    .collect();
                let mut a_z = adj.clone();

                let d4 = field.vjp(&z4, t + h, &a_k[3], &mut grads);
                for (j, d) in d4.iter().enumerate() {
                    a_z[j] += d;
                    a_k[2][j] += h * d;
                }
                let d3 = field.vjp(&z3, t + 0.5 * h, &a_k[2], &mut grads);
                for (j, d) in d3.iter().enumerate() {
                    a_z[j] += d;
                    a_k[1][j] += 0.5 * h * d;
                }
                let d2 = field.vjp(&z2, t + 0.5 * h, &a_k[1], &mut grads);
                for (j, d) in d2.iter().enumerate() {
                    a_z[j] += d;
                    a_k[0][j] += 0.5 * h * d;
                }
                let d1 = field.vjp(z, t, &a_k[0], &mut grads);
                for (j, d) in d1.iter().enumerate() {
                    a_z[j] += d;
                }
                adj = a_z;
            }
        }
    }
    Ok(grads)
}

/// Parameter gradients for an upstream gradient on the log basis `z(t_target)`.
pub fn param_gradients(
    dynamics: &OdeDynamics,
    z1: &LogBasis,
    t_target: f64,
    cfg: &IntegratorConfig,
    upstream: &[f64],
) -> Result<OdeGradients> {
    if !(t_target.is_finite() && t_target >= 1.0) {
        return Err(invalid(format!("target t must be >= 1, got {t_target}")));
    }
    let flat = field_param_gradients(dynamics, &z1.z, t_target, cfg, upstream)?;
    Ok(OdeGradients { d: dynamics.d(), amp: dynamics.amp(), flat })
}

/// Parameter gradients for an upstream gradient on the basis `exp(z(t_target))`.
pub fn basis_param_gradients(
    dynamics: &OdeDynamics,
    base: &FrequencyBasis,
    t_target: f64,
    cfg: &IntegratorConfig,
    upstream_theta: &[f64],
) -> Result<OdeGradients> {
    let scaled = basis_at(dynamics, base, t_target, cfg)?;
    let upstream_z: Vec<f64> = upstream_theta
        .iter()
        .zip(scaled.values())
        .map(|(g, th)| g * th)
        .collect();
    param_gradients(dynamics, &LogBasis::from_basis(base), t_target, cfg, &upstream_z)
}

/// Uniform draw from `[1, t_max]`.
pub fn sample_t<R: Rng + ?Sized>(rng: &mut R, t_max: f64) -> Result<f64> {
    if !(t_max.is_finite() && t_max >= 1.0) {
        return Err(invalid(format!("t_max must be >= 1, got {t_max}")));
    }
    if t_max == 1.0 {
        return Ok(1.0);
    }
    let u: f64 = rng.random();
    Ok(1.0 + (t_max - 1.0) * u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::LinearField;
    use crate::rng::substream;
    use crate::rope::make_basis;

    const LINEAR: LinearField = LinearField { dim: 1, rate: 1.0 };

    fn lb(z: Vec<f64>) -> LogBasis {
        LogBasis { z }
    }

    #[test]
    fn zero_dynamics_is_identity() {
        let dynamics = OdeDynamics::zeros(8, 1).unwrap();
        let z1 = lb(vec![0.0, -1.5, -3.0, -7.25]);
        for method in [Method::Euler, Method::Rk4] {
            let cfg = IntegratorConfig::new(method, 4).unwrap();
            assert_eq!(integrate(&dynamics, &z1, 7.0, &cfg).unwrap(), z1);
        }
    }

    #[test]
    fn constant_field_is_exact_under_euler() {
        let mut dynamics = OdeDynamics::zeros(4, 1).unwrap();
        dynamics.set_time_embedding(0.0, 0.25);
        let z1 = lb(vec![0.0, -2.0]);
        for steps in [1, 2, 8] {
            let cfg = IntegratorConfig::new(Method::Euler, steps).unwrap();
            let z = integrate(&dynamics, &z1, 5.0, &cfg).unwrap();
            assert_eq!(z.z, vec![1.0, -1.0]);
        }
    }

    #[test]
    fn rk4_matches_exponential() {
        // 64 steps over [1, 2]
        let cfg = IntegratorConfig::new(Method::Rk4, 64).unwrap();
        let z = integrate(&LINEAR, &lb(vec![1.0]), 2.0, &cfg).unwrap();
        let e = std::f64::consts::E;
        assert!(((z.z[0] - e) / e).abs() <= 1e-6);
    }

    #[test]
    fn rk4_error_ratio_on_halving() {
        let e = std::f64::consts::E;
        let err = |n| {
            let cfg = IntegratorConfig::new(Method::Rk4, n).unwrap();
            (integrate(&LINEAR, &lb(vec![1.0]), 2.0, &cfg).unwrap().z[0] - e).abs()
        };
        for n in [4, 8, 16] {
            assert!(err(n) / err(2 * n) >= 12.0);
        }
    }

    #[test]
    fn target_one_returns_start() {
        let mut rng = substream(4, "init");
        let dynamics = OdeDynamics::init(8, 2, &mut rng).unwrap();
        let base = make_basis(8, 10000.0).unwrap();
        let cfg = IntegratorConfig::default();
        assert_eq!(basis_at(&dynamics, &base, 1.0, &cfg).unwrap(), base);
        let zero = OdeDynamics::zeros(8, 2).unwrap();
        assert_eq!(basis_at(&zero, &base, 3.0, &cfg).unwrap(), base);
        assert!(integrate(&dynamics, &LogBasis::from_basis(&base), 0.5, &cfg).is_err());
    }

    #[test]
    fn additivity_on_aligned_steps() {
        let mut rng = substream(5, "init");
        let mut dynamics = OdeDynamics::init(8, 2, &mut rng).unwrap();
        for p in dynamics.params_mut() {
            *p *= 10.0;
        }
        dynamics.set_time_embedding(-0.3, 0.1);
        let z1 = LogBasis::from_basis(&make_basis(8, 10000.0).unwrap());
        let cfg = IntegratorConfig::default();
        let direct = integrate_span(&dynamics, &z1.z, 1.0, 3.0, &cfg).unwrap();
        let mid = integrate_span(&dynamics, &z1.z, 1.0, 2.0, &cfg).unwrap();
        let split = integrate_span(&dynamics, &mid, 2.0, 3.0, &cfg).unwrap();
        for (a, b) in direct.iter().zip(&split) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn overflow_is_reported_with_step() {
        let mut dynamics = OdeDynamics::zeros(2, 1).unwrap();
        dynamics.set_time_embedding(0.0, 1e308);
        let cfg = IntegratorConfig::new(Method::Euler, 4).unwrap();
        let err = integrate(&dynamics, &lb(vec![1.7e308]), 2.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { step: 1, .. }), "{err}");

        let mut big = OdeDynamics::zeros(2, 1).unwrap();
        big.set_time_embedding(0.0, 400.0);
        let base = make_basis(2, 10000.0).unwrap();
        assert!(matches!(basis_at(&big, &base, 3.0, &cfg), Err(Error::NumericOverflow { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = substream(6, "init");
        let dynamics = OdeDynamics::init(8, 1, &mut rng).unwrap();
        let z1 = LogBasis::from_basis(&make_basis(8, 10000.0).unwrap());
        let g = param_gradients(&dynamics, &z1, 3.0, &IntegratorConfig::default(), &[0.0; 4]).unwrap();
        assert!(g.flat.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn time_bias_gradient_accumulates_linearly() {
        // loss = sum(z(t)) with zero parameters: d/d time_b = (t - 1) * d/2.
        let dynamics = OdeDynamics::zeros(8, 1).unwrap();
        let z1 = LogBasis::from_basis(&make_basis(8, 10000.0).unwrap());
        for method in [Method::Euler, Method::Rk4] {
            let cfg = IntegratorConfig::new(method, 4).unwrap();
            let g = param_gradients(&dynamics, &z1, 3.5, &cfg, &[1.0; 4]).unwrap();
            assert!((g.time_b() - 2.5 * 4.0).abs() < 1e-12);
        }
    }

    fn fd_check(dynamics: &OdeDynamics, method: Method, t: f64, steps: usize) {
        let base = make_basis(dynamics.d(), 10000.0).unwrap();
        let cfg = IntegratorConfig::new(method, steps).unwrap();
        let weights: Vec<f64> = (0..dynamics.pairs()).map(|i| 1.0 + 0.37 * i as f64).collect();
        // loss = sum_i w_i * theta_i(t)
        let loss = |d: &OdeDynamics| -> f64 {
            basis_at(d, &base, t, &cfg).unwrap().values().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let grads = basis_param_gradients(dynamics, &base, t, &cfg, &weights).unwrap();
        let h = 1e-5;
        for i in 0..dynamics.params().len() {
            let mut p = dynamics.clone();
            p.params_mut()[i] += h;
            let mut m = dynamics.clone();
            m.params_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = grads.flat[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel <= 1e-4 || (fd - an).abs() < 1e-10, "param {i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = substream(8, "init");
        let mut dynamics = OdeDynamics::init(8, 1, &mut rng).unwrap();
        for p in dynamics.params_mut() {
            *p *= 10.0;
        }
        dynamics.set_time_embedding(-0.2, 0.05);
        // 8 steps over [1, 3]
        fd_check(&dynamics, Method::Rk4, 3.0, 4);
        fd_check(&dynamics, Method::Euler, 3.0, 4);
    }

    #[test]
    fn sample_t_contract() {
        let mut rng = substream(1, "t_sample");
        assert!((0..100).all(|_| sample_t(&mut rng, 1.0).unwrap() == 1.0));
        assert!(sample_t(&mut rng, 0.9).is_err());
        let mut a = substream(2, "t_sample");
        let mut b = substream(2, "t_sample");
        for _ in 0..100 {
            let x = sample_t(&mut a, 5.0).unwrap();
            assert_eq!(x, sample_t(&mut b, 5.0).unwrap());
            assert!((1.0..=5.0).contains(&x));
        }
        let mut rng = substream(3, "t_sample");
        let mean = (0..100_000).map(|_| sample_t(&mut rng, 5.0).unwrap()).sum::<f64>() / 1e5;
        assert!((mean - 3.0).abs() < 0.02, "{mean}");
    }
}
