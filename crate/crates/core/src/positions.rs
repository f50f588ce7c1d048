//! Position extrapolation: spread a short training sequence over `[1, t'*L]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Uniform,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionSchedule {
    pub mode: SamplerMode,
    pub train_len: usize,
    pub t_prime: f64,
    pub pretrain_len: usize,
    positions: Vec<f64>,
}

impl PositionSchedule {
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Plain `1..=len` positions at the native scale.
    pub fn contiguous(len: usize) -> Self {
        Self {
            mode: SamplerMode::Uniform,
            train_len: len,
            t_prime: 1.0,
            pretrain_len: len,
            positions: (1..=len).map(|i| i as f64).collect(),
        }
    }
}

fn check(train_len: usize, t_prime: f64, pretrain_len: usize) -> Result<f64> {
    if train_len == 0 || pretrain_len == 0 {
        return Err(invalid("sequence lengths must be positive"));
    }
    if !(t_prime.is_finite() && t_prime >= 1.0) {
        return Err(invalid(format!("t' must be >= 1, got {t_prime}")));
    }
    Ok(t_prime * pretrain_len as f64)
}

/// `{1*s, 2*s, ..., L_train*s}` with `s = t'*L / L_train`.
pub fn uniform_positions(train_len: usize, t_prime: f64, pretrain_len: usize) -> Result<PositionSchedule> {
    let span = check(train_len, t_prime, pretrain_len)?;
    if span < train_len as f64 {
        return Err(invalid(format!(
            "target range {span} is shorter than the {train_len} trained tokens"
        )));
    }
    let s = span / train_len as f64;
    Ok(PositionSchedule {
        mode: SamplerMode::Uniform,
        train_len,
        t_prime,
        pretrain_len,
        positions: (1..=train_len).map(|i| i as f64 * s).collect(),
    })
}

/// `L_train` distinct integers from `{1, ..., floor(t'*L)}`, sorted ascending.
pub fn random_positions<R: Rng + ?Sized>(
    rng: &mut R,
    train_len: usize,
    t_prime: f64,
    pretrain_len: usize,
) -> Result<PositionSchedule> {
    let span = check(train_len, t_prime, pretrain_len)?.floor() as usize;
    if span < train_len {
        return Err(invalid(format!(
            "cannot draw {train_len} distinct positions from 1..={span}"
        )));
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, span, train_len).into_vec();
    picked.sort_unstable();
    Ok(PositionSchedule {
        mode: SamplerMode::Random,
        train_len,
        t_prime,
        pretrain_len,
        positions: picked.into_iter().map(|i| (i + 1) as f64).collect(),
    })
}

pub fn sample_positions<R: Rng + ?Sized>(
    rng: &mut R,
    mode: SamplerMode,
    train_len: usize,
    t_prime: f64,
    pretrain_len: usize,
) -> Result<PositionSchedule> {
    match mode {
        SamplerMode::Uniform => uniform_positions(train_len, t_prime, pretrain_len),
        SamplerMode::Random => random_positions(rng, train_len, t_prime, pretrain_len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_positions(4, 2.0, 4).unwrap().positions(), &[2.0, 4.0, 6.0, 8.0]);
        let id: Vec<f64> = (1..=16).map(f64::from).collect();
        assert_eq!(uniform_positions(16, 1.0, 16).unwrap().positions(), id.as_slice());
        assert_eq!(uniform_positions(3, 1.0, 6).unwrap().positions(), &[2.0, 4.0, 6.0]);
        assert!(uniform_positions(8, 1.0, 4).is_err());
    }

    #[test]
    fn uniform_keeps_fractional_positions() {
        let s = uniform_positions(3, 1.5, 4).unwrap();
        assert_eq!(s.positions(), &[2.0, 4.0, 6.0]);
        let s = uniform_positions(4, 1.25, 4).unwrap();
        assert_eq!(s.positions(), &[1.25, 2.5, 3.75, 5.0]);
    }

    #[test]
    fn random_full_range_is_forced() {
        let mut rng = substream(1, "positions");
        let s = random_positions(&mut rng, 12, 1.5, 8).unwrap();
        let want: Vec<f64> = (1..=12).map(f64::from).collect();
        assert_eq!(s.positions(), want.as_slice());
        assert!(random_positions(&mut rng, 13, 1.5, 8).is_err());
    }

    #[test]
    fn random_is_distinct_sorted_and_bounded() {
        let mut rng = substream(2, "positions");
        for _ in 0..10_000 {
            let s = random_positions(&mut rng, 8, 4.0, 8).unwrap();
            let p = s.positions();
            assert!(p.windows(2).all(|w| w[0] < w[1]));
            assert!(p[0] >= 1.0 && p[7] <= 32.0);
        }
    }

    #[test]
    fn random_is_seeded() {
        let a = random_positions(&mut substream(3, "positions"), 16, 3.7, 20).unwrap();
        let b = random_positions(&mut substream(3, "positions"), 16, 3.7, 20).unwrap();
        assert_eq!(a, b);
    }

    /// E[max] of a k-subset of {1..n}: sum_m m * C(m-1, k-1) / C(n, k).
    fn expected_max(n: u64, k: u64) -> f64 {
        fn choose(n: u64, k: u64) -> f64 {
            (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
        }
        (k..=n).map(|m| m as f64 * choose(m - 1, k - 1)).sum::<f64>() / choose(n, k)
    }

    #[test]
    fn random_max_matches_combinatorial_expectation() {
        let exact = expected_max(32, 8);
        assert!((exact - 8.0 * 33.0 / 9.0).abs() < 1e-9);
        let mut rng = substream(4, "positions");
        let n = 100_000;
        let mean = (0..n)
            .map(|_| random_positions(&mut rng, 8, 4.0, 8).unwrap().positions()[7])
            .sum::<f64>()
            / n as f64;
        assert!((mean - exact).abs() < 0.1, "{mean} vs {exact}");
    }
}
