//! Rotary position embedding over real-valued positions.
//!
//! Pairs are adjacent, `(x[2i], x[2i+1])`, and the basis exponent index starts
//! at zero so that `theta[0] == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Per-pair rotation frequencies (radians per position unit).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBasis {
    values: Vec<f64>,
}

impl FrequencyBasis {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("frequency basis must have at least one pair"));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(invalid(format!("basis entries must be positive and finite, got {v}")));
        }
        Ok(Self { values })
    }

    /// Head dimension `d` (twice the number of pairs).
    pub fn dims(&self) -> usize {
        2 * self.values.len()
    }

    pub fn pairs(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// A position index. Fractional values arise from uniform position scaling.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Position(f64);

impl Position {
    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(invalid(format!("position must be finite and non-negative, got {value}")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Standard RoPE basis `theta_i = base^(-2i/d)` for `i = 0..d/2`.
pub fn make_basis(d: usize, base: f64) -> Result<FrequencyBasis> {
    if d == 0 || d % 2 != 0 {
        return Err(invalid(format!("head dimension must be positive and even, got {d}")));
    }
    if !(base.is_finite() && base > 1.0) {
        return Err(invalid(format!("rope base must be finite and > 1, got {base}")));
    }
    let values = (0..d / 2)
        .map(|i| base.powf(-2.0 * i as f64 / d as f64))
        .collect();
    FrequencyBasis::new(values)
}

/// Rotates `x` in place by `m * theta_i` per pair. No dimension checks.
pub(crate) fn rotate_in_place(x: &mut [f64], m: f64, theta: &[f64]) {
    if m == 0.0 {
        return;
    }
    for (pair, &th) in x.chunks_exact_mut(2).zip(theta) {
        let (s, c) = (m * th).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

fn check_dims(len: usize, basis: &FrequencyBasis) -> Result<()> {
    if len != basis.dims() {
        return Err(invalid(format!(
            "vector length {len} does not match basis dimension {}",
            basis.dims()
        )));
    }
    Ok(())
}

pub fn apply_rope(x: &[f64], m: Position, basis: &FrequencyBasis) -> Result<Vec<f64>> {
    check_dims(x.len(), basis)?;
    let mut out = x.to_vec();
    rotate_in_place(&mut out, m.value(), basis.values());
    Ok(out)
}

/// Inner product of rotated query and key.
pub fn rope_score(
    q: &[f64],
    k: &[f64],
    m_q: Position,
    m_k: Position,
    basis: &FrequencyBasis,
) -> Result<f64> {
    check_dims(k.len(), basis)?;
    let rq = apply_rope(q, m_q, basis)?;
    let rk = apply_rope(k, m_k, basis)?;
    Ok(rq.iter().zip(&rk).map(|(a, b)| a * b).sum())
}
