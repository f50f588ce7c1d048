//! Continuous frequency scaling: a small network drives `dz/dt` for the
//! log-basis `z`, integrated from `t = 1` with a fixed-step solver.

mod cache;
mod dynamics;
mod integrate;

pub use cache::{build_cache, default_grid, BasisCache, CacheEntry};
pub use dynamics::{dynamics_eval, DynamicsCheckpoint, LinearField, OdeDynamics, OdeGradients, VectorField};
pub use integrate::{
    basis_at, basis_param_gradients, field_param_gradients, integrate, integrate_span,
    param_gradients, sample_t, IntegratorConfig, Method,
};
