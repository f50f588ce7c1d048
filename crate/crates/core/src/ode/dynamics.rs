use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::record::TensorRecord;
use crate::scaling::LogBasis;

/// A differentiable vector field `dz/dt = g(z, t)` with a flat parameter vector.
pub trait VectorField {
    /// State dimension.
    fn dim(&self) -> usize;

    fn num_params(&self) -> usize;

    fn eval(&self, z: &[f64], t: f64) -> Vec<f64>;

    /// Vector-Jacobian product. Accumulates `upstream^T dg/dparams` into
    /// `param_grads` and returns `upstream^T dg/dz`.
    fn vjp(&self, z: &[f64], t: f64, upstream: &[f64], param_grads: &mut [f64]) -> Vec<f64>;
}

/// `g(z, t) = rate * z`, whose flow from `z1` is `z1 * e^(rate (t - 1))`.
/// Used to measure integrator order against a closed form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearField {
    pub dim: usize,
    pub rate: f64,
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_params(&self) -> usize {
        0
    }

    fn eval(&self, z: &[f64], _t: f64) -> Vec<f64> {
        z.iter().map(|v| self.rate * v).collect()
    }

    fn vjp(&self, _z: &[f64], _t: f64, upstream: &[f64], _param_grads: &mut [f64]) -> Vec<f64> {
        upstream.iter().map(|u| self.rate * u).collect()
    }
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

pub(crate) fn silu(u: f64) -> f64 {
    u * sigmoid(u)
}

pub(crate) fn silu_grad(u: f64) -> f64 {
    let s = sigmoid(u);
    s * (1.0 + u * (1.0 - s))
}

/// Up-and-down projection dynamics over log-frequencies:
/// `g(z, t) = W_down * silu(W_up * z) + (time_w * ln t + time_b)`.
///
/// Parameters live in one flat vector laid out as
/// `[W_up (hidden x pairs) | W_down (pairs x hidden) | time_w | time_b]`,
/// row-major, where `hidden = amp * d` and `pairs = d / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeDynamics {
    d: usize,
    amp: usize,
    params: Vec<f64>,
}

/// Gradients laid out like [`OdeDynamics::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct OdeGradients {
    pub d: usize,
    pub amp: usize,
    pub flat: Vec<f64>,
}

impl OdeGradients {
    fn split(&self) -> (&[f64], &[f64], f64, f64) {
        let (h, p) = (self.amp * self.d, self.d / 2);
        let (up, rest) = self.flat.split_at(h * p);
        let (down, rest) = rest.split_at(h * p);
        (up, down, rest[0], rest[1])
    }

    pub fn w_up(&self) -> &[f64] {
        self.split().0
    }

    pub fn w_down(&self) -> &[f64] {
        self.split().1
    }

    pub fn time_w(&self) -> f64 {
        self.split().2
    }

    pub fn time_b(&self) -> f64 {
        self.split().3
    }
}

impl OdeDynamics {
    /// All-zero parameters; `g` is identically zero.
    pub fn zeros(d: usize, amp: usize) -> Result<Self> {
        if d < 2 || d % 2 != 0 {
            return Err(invalid(format!("head dimension must be positive and even, got {d}")));
        }
        if amp == 0 {
            return Err(invalid("amplification factor must be >= 1"));
        }
        let n = 2 * (amp * d) * (d / 2) + 2;
        Ok(Self { d, amp, params: vec![0.0; n] })
    }

    /// Projection weights from N(0, 0.02^2); time embedding zero.
    pub fn init<R: Rng + ?Sized>(d: usize, amp: usize, rng: &mut R) -> Result<Self> {
        let mut dynamics = Self::zeros(d, amp)?;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let n = dynamics.params.len() - 2;
        for p in &mut dynamics.params[..n] {
            *p = normal.sample(rng);
        }
        Ok(dynamics)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn amp(&self) -> usize {
        self.amp
    }

    pub fn hidden(&self) -> usize {
        self.amp * self.d
    }

    pub fn pairs(&self) -> usize {
        self.d / 2
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn up_len(&self) -> usize {
        self.hidden() * self.pairs()
    }

    pub fn w_up(&self) -> &[f64] {
        &self.params[..self.up_len()]
    }

    pub fn w_down(&self) -> &[f64] {
        &self.params[self.up_len()..2 * self.up_len()]
    }

    pub fn w_up_mut(&mut self) -> &mut [f64] {
        let n = self.up_len();
        &mut self.params[..n]
    }

    pub fn w_down_mut(&mut self) -> &mut [f64] {
        let n = self.up_len();
        &mut self.params[n..2 * n]
    }

    pub fn time_w(&self) -> f64 {
        self.params[2 * self.up_len()]
    }

    pub fn time_b(&self) -> f64 {
        self.params[2 * self.up_len() + 1]
    }

    pub fn set_time_embedding(&mut self, w: f64, b: f64) {
        let n = 2 * self.up_len();
        self.params[n] = w;
        self.params[n + 1] = b;
    }

    pub fn zero_gradients(&self) -> OdeGradients {
        OdeGradients { d: self.d, amp: self.amp, flat: vec![0.0; self.params.len()] }
    }

    fn hidden_pre(&self, z: &[f64]) -> Vec<f64> {
        let p = self.pairs();
        self.w_up()
            .chunks_exact(p)
            .map(|row| row.iter().zip(z).map(|(w, x)| w * x).sum())
            .collect()
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        let (h, p) = (self.hidden(), self.pairs());
        vec![
            TensorRecord::new("w_up", vec![h, p], self.w_up().to_vec()),
            TensorRecord::new("w_down", vec![p, h], self.w_down().to_vec()),
            TensorRecord::new("time_w", vec![1], vec![self.time_w()]),
            TensorRecord::new("time_b", vec![1], vec![self.time_b()]),
        ]
    }

    pub fn from_records(d: usize, amp: usize, records: &[TensorRecord]) -> Result<Self> {
        let mut dynamics = Self::zeros(d, amp)?;
        let (h, p) = (dynamics.hidden(), dynamics.pairs());
        let up = TensorRecord::find(records, "w_up", &[h, p])?;
        let down = TensorRecord::find(records, "w_down", &[p, h])?;
        let tw = TensorRecord::find(records, "time_w", &[1])?;
        let tb = TensorRecord::find(records, "time_b", &[1])?;
        dynamics.w_up_mut().copy_from_slice(&up.values);
        dynamics.w_down_mut().copy_from_slice(&down.values);
        dynamics.set_time_embedding(tw.values[0], tb.values[0]);
        if dynamics.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("dynamics parameters must be finite".into()));
        }
        Ok(dynamics)
    }
}

impl VectorField for OdeDynamics {
    fn dim(&self) -> usize {
        self.pairs()
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn eval(&self, z: &[f64], t: f64) -> Vec<f64> {
        let act: Vec<f64> = self.hidden_pre(z).into_iter().map(silu).collect();
        let xi = self.time_w() * t.ln() + self.time_b();
        self.w_down()
            .chunks_exact(self.hidden())
            .map(|row| row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>() + xi)
            .collect()
    }

    fn vjp(&self, z: &[f64], t: f64, upstream: &[f64], param_grads: &mut [f64]) -> Vec<f64> {
        let (h, p) = (self.hidden(), self.pairs());
        let pre = self.hidden_pre(z);
        let act: Vec<f64> = pre.iter().map(|&u| silu(u)).collect();
        let (g_up, rest) = param_grads.split_at_mut(h * p);
        let (g_down, g_time) = rest.split_at_mut(h * p);

        let mut d_act = vec![0.0; h];
        for (i, &g) in upstream.iter().enumerate() {
            let row = &self.w_down()[i * h..(i + 1) * h];
            let grow = &mut g_down[i * h..(i + 1) * h];
            for j in 0..h {
                grow[j] += g * act[j];
                d_act[j] += row[j] * g;
            }
        }
        let total: f64 = upstream.iter().sum();
        g_time[0] += t.ln() * total;
        g_time[1] += total;

        let mut dz = vec![0.0; p];
        for j in 0..h {
            let du = d_act[j] * silu_grad(pre[j]);
            if du == 0.0 {
                continue;
            }
            let row = &self.w_up()[j * p..(j + 1) * p];
            let grow = &mut g_up[j * p..(j + 1) * p];
            for k in 0..p {
                grow[k] += du * z[k];
                dz[k] += row[k] * du;
            }
        }
        dz
    }
}

/// `g(z, t)` evaluated on a log basis.
pub fn dynamics_eval(dynamics: &OdeDynamics, z: &LogBasis, t: f64) -> Result<Vec<f64>> {
    if z.len() != dynamics.pairs() {
        return Err(invalid(format!(
            "state length {} does not match dynamics width {}",
            z.len(),
            dynamics.pairs()
        )));
    }
    if !(t.is_finite() && t >= 1.0) {
        return Err(invalid(format!("time must be >= 1, got {t}")));
    }
    Ok(dynamics.eval(&z.z, t))
}

/// Checkpoint envelope for a standalone dynamics file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynamicsCheckpoint {
    pub format: String,
    pub version: u32,
    pub d: usize,
    pub amp: usize,
    pub tensors: Vec<TensorRecord>,
}

impl DynamicsCheckpoint {
    pub const FORMAT: &'static str = "ctxlab-ode-dynamics";

    pub fn from_dynamics(dynamics: &OdeDynamics) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: 1,
            d: dynamics.d(),
            amp: dynamics.amp(),
            tensors: dynamics.to_records(),
        }
    }

    pub fn into_dynamics(self) -> Result<OdeDynamics> {
        if self.format != Self::FORMAT || self.version != 1 {
            return Err(Error::Format(format!(
                "unsupported dynamics checkpoint {} v{}",
                self.format, self.version
            )));
        }
        OdeDynamics::from_records(self.d, self.amp, &self.tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn zero_parameters_give_zero_field() {
        let dynamics = OdeDynamics::zeros(8, 2).unwrap();
        let z = LogBasis { z: vec![0.3, -1.0, -4.0, -9.0] };
        assert_eq!(dynamics_eval(&dynamics, &z, 3.5).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn bias_only_broadcasts() {
        let mut rng = substream(1, "init");
        let mut dynamics = OdeDynamics::init(8, 1, &mut rng).unwrap();
        dynamics.w_up_mut().fill(0.0);
        dynamics.set_time_embedding(0.0, 0.7);
        let z = LogBasis { z: vec![0.3, -1.0, -4.0, -9.0] };
        assert_eq!(dynamics_eval(&dynamics, &z, 2.0).unwrap(), vec![0.7; 4]);
    }

    #[test]
    fn single_unit_path_is_silu() {
        // d = 2, amp = 1: W_up is 2x1 with [1, 0], W_down is 1x2 with [1, 0].
        let mut dynamics = OdeDynamics::zeros(2, 1).unwrap();
        dynamics.w_up_mut().copy_from_slice(&[1.0, 0.0]);
        dynamics.w_down_mut().copy_from_slice(&[1.0, 0.0]);
        let out = dynamics_eval(&dynamics, &LogBasis { z: vec![1.0] }, 1.0).unwrap();
        assert!((out[0] - 0.731058578630004879).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dynamics = OdeDynamics::zeros(8, 1).unwrap();
        assert!(dynamics_eval(&dynamics, &LogBasis { z: vec![0.0; 3] }, 1.0).is_err());
        assert!(OdeDynamics::zeros(7, 1).is_err());
        assert!(OdeDynamics::zeros(8, 0).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = substream(3, "init");
        let mut dynamics = OdeDynamics::init(6, 2, &mut rng).unwrap();
        for p in dynamics.params_mut() {
            *p *= 25.0;
        }
        let z = [0.4, -0.8, 1.3];
        let up = [0.3, -1.1, 0.6];
        let t = 2.3;
        let mut grads = vec![0.0; dynamics.num_params()];
        let dz = dynamics.vjp(&z, t, &up, &mut grads);
        let objective = |d: &OdeDynamics, z: &[f64]| -> f64 {
            d.eval(z, t).iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..dynamics.num_params() {
            let mut plus = dynamics.clone();
            plus.params_mut()[i] += h;
            let mut minus = dynamics.clone();
            minus.params_mut()[i] -= h;
            let fd = (objective(&plus, &z) - objective(&minus, &z)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grads[i]);
        }
        for k in 0..3 {
            let mut zp = z;
            zp[k] += h;
            let mut zm = z;
            zm[k] -= h;
            let fd = (objective(&dynamics, &zp) - objective(&dynamics, &zm)) / (2.0 * h);
            assert!((fd - dz[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = substream(9, "init");
        let mut dynamics = OdeDynamics::init(8, 2, &mut rng).unwrap();
        dynamics.set_time_embedding(-0.123456789012345, 1.0 / 3.0);
        let text = serde_json::to_string(&DynamicsCheckpoint::from_dynamics(&dynamics)).unwrap();
        let back: DynamicsCheckpoint = serde_json::from_str(&text).unwrap();
        let restored = back.into_dynamics().unwrap();
        assert_eq!(restored, dynamics);
        let again = serde_json::to_string(&DynamicsCheckpoint::from_dynamics(&restored)).unwrap();
        assert_eq!(text, again);
    }
}
