//! Position-embedding scaling as a per-pair transform of the frequency basis.
//!
//! Every scaling method considered here maps a basis `theta` to
//! `alpha(t) * theta` for a length factor `t`. In the log domain
//! `z(t) = log(alpha(t) * theta)` this becomes an additive chain over `t`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rope::{apply_rope, FrequencyBasis, Position};

/// Context-length multiplier relative to the pretraining length.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ScalingFactor(f64);

impl ScalingFactor {
    pub fn new(t: f64) -> Result<Self> {
        if !(t.is_finite() && t >= 1.0) {
            return Err(invalid(format!("scaling factor must be finite and >= 1, got {t}")));
        }
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaKind {
    Pi,
    Yarn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub kind: AlphaKind,
    /// YaRN scale; ignored for PI.
    pub s: f64,
    /// Divide by the schedule's own value at `t = 1` so that `alpha(1) == 1`.
    pub normalize_at_one: bool,
    /// Use `i = 0..d/2` in the YaRN exponent instead of `i = 1..=d/2`.
    pub zero_based_index: bool,
}

impl AlphaSchedule {
    pub fn pi() -> Self {
        Self { kind: AlphaKind::Pi, s: 1.0, normalize_at_one: true, zero_based_index: false }
    }

    pub fn yarn(s: f64) -> Self {
        Self { kind: AlphaKind::Yarn, s, normalize_at_one: true, zero_based_index: false }
    }

    pub fn unnormalized(mut self) -> Self {
        self.normalize_at_one = false;
        self
    }
}

/// Element-wise log of a (scaled) frequency basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogBasis {
    pub z: Vec<f64>,
}

impl LogBasis {
    pub fn from_basis(basis: &FrequencyBasis) -> Self {
        Self { z: basis.values().iter().map(|v| v.ln()).collect() }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn to_basis(&self) -> Result<FrequencyBasis> {
        FrequencyBasis::new(self.z.iter().map(|v| v.exp()).collect())
    }
}

fn yarn_raw(schedule: &AlphaSchedule, scale: f64, d: usize) -> Vec<f64> {
    let denom = (d - 2) as f64;
    let offset = usize::from(!schedule.zero_based_index);
    (0..d / 2)
        .map(|j| {
            let i = (j + offset) as f64;
            scale.powf(-2.0 * i / denom)
        })
        .collect()
}

/// Per-pair scaling vector `alpha(t)` of length `d/2`.
pub fn alpha(schedule: &AlphaSchedule, t: ScalingFactor, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(invalid(format!("head dimension must be positive and even, got {d}")));
    }
    match schedule.kind {
        AlphaKind::Pi => Ok(vec![1.0 / t.value(); d / 2]),
        AlphaKind::Yarn => {
            if d < 4 {
                return Err(invalid("YaRN schedule needs d >= 4 (exponent divides by d - 2)"));
            }
            if !(schedule.s.is_finite() && schedule.s > 0.0) {
                return Err(invalid(format!("YaRN scale s must be positive, got {}", schedule.s)));
            }
            let raw = yarn_raw(schedule, schedule.s * t.value(), d);
            if !schedule.normalize_at_one {
                return Ok(raw);
            }
            let at_one = yarn_raw(schedule, schedule.s, d);
            Ok(raw.iter().zip(&at_one).map(|(a, b)| a / b).collect())
        }
    }
}

fn check_alpha(alpha: &[f64], len: usize) -> Result<()> {
    if alpha.len() != len {
        return Err(invalid(format!("alpha has length {}, expected {len}", alpha.len())));
    }
    if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(invalid(format!("alpha entries must be positive, got {a}")));
    }
    Ok(())
}

/// `alpha * theta`, element-wise.
pub fn scale_basis(basis: &FrequencyBasis, alpha: &[f64]) -> Result<FrequencyBasis> {
    check_alpha(alpha, basis.pairs())?;
    FrequencyBasis::new(basis.values().iter().zip(alpha).map(|(t, a)| t * a).collect())
}

/// One link of the log-domain chain: `z + log(alpha_cur / alpha_prev)`.
pub fn chain_step(z_prev: &LogBasis, alpha_prev: &[f64], alpha_cur: &[f64]) -> Result<LogBasis> {
    check_alpha(alpha_prev, z_prev.len())?;
    check_alpha(alpha_cur, z_prev.len())?;
    let z = z_prev
        .z
        .iter()
        .zip(alpha_prev.iter().zip(alpha_cur))
        .map(|(z, (p, c))| z + c.ln() - p.ln())
        .collect();
    Ok(LogBasis { z })
}

/// Max absolute gap between rotating by `T*m` and rotating by `m` with `T*theta`.
pub fn verify_theorem1(x: &[f64], m: Position, factor: f64, basis: &FrequencyBasis) -> Result<f64> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(invalid(format!("position multiplier must be positive, got {factor}")));
    }
    let stretched = apply_rope(x, Position::new(factor * m.value())?, basis)?;
    let scaled_basis = scale_basis(basis, &vec![factor; basis.pairs()])?;
    let rotated = apply_rope(x, m, &scaled_basis)?;
    Ok(stretched
        .iter()
        .zip(&rotated)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
