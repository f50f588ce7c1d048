use serde::{Deserialize, Serialize};

use super::dynamics::VectorField;
use super::integrate::{basis_at, IntegratorConfig};
use crate::error::{invalid, Error, Result};
use crate::rope::FrequencyBasis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub t: f64,
    pub basis: FrequencyBasis,
}

/// Precomputed bases at a grid of scaling factors, looked up by inference length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisCache {
    pub format: String,
    pub version: u32,
    pub pretrain_len: usize,
    entries: Vec<CacheEntry>,
}

impl BasisCache {
    pub const FORMAT: &'static str = "ctxlab-basis-cache";

    pub fn from_entries(entries: Vec<CacheEntry>, pretrain_len: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("basis cache needs at least one entry"));
        }
        if pretrain_len == 0 {
            return Err(invalid("pretraining length must be >= 1"));
        }
        if entries[0].t < 1.0 {
            return Err(invalid(format!("cache grid must start at t >= 1, got {}", entries[0].t)));
        }
        if entries.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(invalid("cache grid must be strictly increasing"));
        }
        let dims = entries[0].basis.dims();
        if entries.iter().any(|e| e.basis.dims() != dims) {
            return Err(invalid("all cached bases must share one head dimension"));
        }
        Ok(Self { format: Self::FORMAT.into(), version: 1, pretrain_len, entries })
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    /// Longest sequence any cached basis covers.
    pub fn max_supported(&self) -> f64 {
        self.entries.last().expect("non-empty").t * self.pretrain_len as f64
    }

    /// Basis of the smallest grid point whose `t_k * L` covers `l_infer`.
    pub fn lookup(&self, l_infer: usize) -> Result<&FrequencyBasis> {
        if l_infer == 0 {
            return Err(invalid("inference length must be >= 1"));
        }
        let len = self.pretrain_len as f64;
        self.entries
            .iter()
            .find(|e| e.t * len >= l_infer as f64)
            .map(|e| &e.basis)
            .ok_or(Error::OutOfRange { requested: l_infer, max_supported: self.max_supported() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != Self::FORMAT || self.version != 1 {
            return Err(Error::Format(format!(
                "unsupported basis cache {} v{}",
                self.format, self.version
            )));
        }
        Self::from_entries(self.entries.clone(), self.pretrain_len).map(|_| ())
    }
}

pub fn build_cache<F: VectorField + ?Sized>(
    field: &F,
    base: &FrequencyBasis,
    t_values: &[f64],
    cfg: &IntegratorConfig,
    pretrain_len: usize,
) -> Result<BasisCache> {
    let entries = t_values
        .iter()
        .map(|&t| Ok(CacheEntry { t, basis: basis_at(field, base, t, cfg)? }))
        .collect::<Result<Vec<_>>>()?;
    BasisCache::from_entries(entries, pretrain_len)
}

/// `{1, 2, 4, ...}` up to `t_max`; `t_max` itself is appended when it is not a power of two.
pub fn default_grid(t_max: f64) -> Result<Vec<f64>> {
    if !(t_max.is_finite() && t_max >= 1.0) {
        return Err(invalid(format!("t_max must be >= 1, got {t_max}")));
    }
    let mut grid = vec![1.0];
    let mut t = 2.0;
    while t <= t_max {
        grid.push(t);
        t *= 2.0;
    }
    if *grid.last().expect("non-empty") < t_max {
        grid.push(t_max);
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{OdeDynamics, Method};
    use crate::rng::substream;
    use crate::rope::make_basis;

    fn cache() -> (OdeDynamics, FrequencyBasis, BasisCache) {
        let mut rng = substream(11, "init");
        let mut dynamics = OdeDynamics::init(8, 1, &mut rng).unwrap();
        dynamics.set_time_embedding(-0.1, -0.2);
        let base = make_basis(8, 10000.0).unwrap();
        let c = build_cache(&dynamics, &base, &[2.0, 4.0, 8.0], &IntegratorConfig::default(), 512).unwrap();
        (dynamics, base, c)
    }

    #[test]
    fn picks_nearest_upper_bound() {
        let (_, _, c) = cache();
        assert_eq!(c.lookup(1500).unwrap(), &c.entries()[1].basis);
        assert_eq!(c.lookup(1).unwrap(), &c.entries()[0].basis);
    }

    #[test]
    fn boundary_is_inclusive() {
        let (_, _, c) = cache();
        assert_eq!(c.lookup(1024).unwrap(), &c.entries()[0].basis);
        assert_eq!(c.lookup(1025).unwrap(), &c.entries()[1].basis);
        assert_eq!(c.lookup(4096).unwrap(), &c.entries()[2].basis);
    }

    #[test]
    fn out_of_range_names_max() {
        let (_, _, c) = cache();
        match c.lookup(4097) {
            Err(Error::OutOfRange { requested, max_supported }) => {
                assert_eq!(requested, 4097);
                assert_eq!(max_supported, 4096.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lookup_is_bitwise_basis_at() {
        let (dynamics, base, c) = cache();
        let cfg = IntegratorConfig::default();
        for (l, t) in [(1000, 2.0), (2000, 4.0), (3000, 8.0)] {
            let direct = basis_at(&dynamics, &base, t, &cfg).unwrap();
            let got = c.lookup(l).unwrap();
            let bits = |b: &FrequencyBasis| b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(got), bits(&direct));
        }
    }

    #[test]
    fn unsorted_grid_rejected() {
        let base = make_basis(8, 10000.0).unwrap();
        let zero = OdeDynamics::zeros(8, 1).unwrap();
        let cfg = IntegratorConfig::new(Method::Euler, 2).unwrap();
        assert!(build_cache(&zero, &base, &[4.0, 2.0], &cfg, 64).is_err());
        assert!(build_cache(&zero, &base, &[], &cfg, 64).is_err());
    }

    #[test]
    fn default_grid_powers_of_two() {
        assert_eq!(default_grid(1.0).unwrap(), vec![1.0]);
        assert_eq!(default_grid(8.0).unwrap(), vec![1.0, 2.0, 4.0, 8.0]);
        assert_eq!(default_grid(6.0).unwrap(), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn file_round_trip() {
        let (_, _, c) = cache();
        let text = serde_json::to_string(&c).unwrap();
        let back: BasisCache = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back, c);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
