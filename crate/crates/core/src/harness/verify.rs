//! Property and oracle suites run by `ctxlab verify`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::gradcheck::{lm_gradcheck, ode_gradcheck, GradHook};
use crate::error::{invalid, Error, Result};
use crate::metrics::{MetricsRecord, MetricsSink};
use crate::ode::{build_cache, integrate, IntegratorConfig, LinearField, Method, OdeDynamics};
use crate::prefopt::{
    bt_preference, dpo_loss, longpo_loss, longpo_mt_loss, optimal_policy, recovered_reward, rlhf_objective_value,
    log_partition, Aggregation, MultiTurnSample, PreferenceQuadruple, TabularPolicy, Turn,
};
use crate::rng::{substream, Rng as StreamRng};
use crate::rope::{make_basis, rope_score, Position};
use crate::scaling::{alpha, chain_step, verify_theorem1, AlphaSchedule, LogBasis, ScalingFactor};

pub const SUITES: &[&str] =
    &["theorem1", "rope_shift", "chain", "rk4_order", "gradients", "dpo_reduction", "optimal_policy", "cache"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub passed: bool,
    pub metrics: Vec<(String, f64)>,
    pub detail: String,
}

impl SuiteOutcome {
    fn new(name: &str, passed: bool, metrics: Vec<(&str, f64)>, detail: String) -> Self {
        let metrics = metrics.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        Self { name: name.to_string(), passed, metrics, detail }
    }
}

fn unit_vec(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn theorem1(seed: u64) -> Result<SuiteOutcome> {
    let mut rng = substream(seed, "verify/theorem1");
    let basis = make_basis(64, 10000.0)?;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = unit_vec(&mut rng, 64);
        let m = Position::new(rng.random_range(0.0..=4096.0))?;
        let t = rng.random_range(1.0..=64.0);
        worst = worst.max(verify_theorem1(&x, m, t, &basis)?);
    }
    Ok(SuiteOutcome::new("theorem1", worst <= 1e-9, vec![("max_abs_dev", worst)], format!("max |dev| {worst:.3e} over 1000 trials")))
}

fn rope_shift(seed: u64) -> Result<SuiteOutcome> {
    let mut rng = substream(seed, "verify/rope_shift");
    let basis = make_basis(64, 10000.0)?;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let q = unit_vec(&mut rng, 64);
        let k = unit_vec(&mut rng, 64);
        let mq = rng.random_range(0.0..=4096.0);
        let mk = rng.random_range(0.0..=4096.0);
        let delta = rng.random_range(0.0..=1e4);
        let a = rope_score(&q, &k, Position::new(mq + delta)?, Position::new(mk + delta)?, &basis)?;
        let b = rope_score(&q, &k, Position::new(mq)?, Position::new(mk)?, &basis)?;
        worst = worst.max((a - b).abs());
    }
    Ok(SuiteOutcome::new("rope_shift", worst <= 1e-9, vec![("max_abs_dev", worst)], format!("max |dev| {worst:.3e} over 1000 trials")))
}

fn chain() -> Result<SuiteOutcome> {
    let d = 64;
    let z1 = LogBasis::from_basis(&make_basis(d, 10000.0)?);
    let mut worst: f64 = 0.0;
    for schedule in [AlphaSchedule::pi(), AlphaSchedule::yarn(1.0), AlphaSchedule::yarn(2.0)] {
        let mut z = z1.clone();
        let mut prev = alpha(&schedule, ScalingFactor::new(1.0)?, d)?;
        for t in 2..=16 {
            let cur = alpha(&schedule, ScalingFactor::new(t as f64)?, d)?;
            z = chain_step(&z, &prev, &cur)?;
            for ((zc, z0), a) in z.z.iter().zip(&z1.z).zip(&cur) {
                worst = worst.max((zc - (z0 + a.ln())).abs());
            }
            prev = cur;
        }
    }
    Ok(SuiteOutcome::new("chain", worst <= 1e-12, vec![("max_abs_dev", worst)], format!("max |dev| {worst:.3e} for t = 2..16")))
}

fn rk4_order() -> Result<SuiteOutcome> {
    let field = LinearField { dim: 1, rate: 1.0 };
    let e = std::f64::consts::E;
    let rel = |n: usize| -> Result<f64> {
        let cfg = IntegratorConfig::new(Method::Rk4, n)?;
        Ok(((integrate(&field, &LogBasis { z: vec![1.0] }, 2.0, &cfg)?.z[0] - e) / e).abs())
    };
    let at64 = rel(64)?;
    let mut min_ratio = f64::INFINITY;
    for n in [4, 8, 16, 32] {
        min_ratio = min_ratio.min(rel(n)? / rel(2 * n)?);
    }
    let passed = at64 <= 1e-6 && min_ratio >= 12.0;
    Ok(SuiteOutcome::new(
        "rk4_order",
        passed,
        vec![("rel_err_64", at64), ("min_halving_ratio", min_ratio)],
        format!("rel err {at64:.3e} at 64 steps, min halving ratio {min_ratio:.2}"),
    ))
}

fn gradients(seed: u64, hook: GradHook) -> Result<SuiteOutcome> {
    let ode = ode_gradcheck(seed, hook)?;
    let lm = lm_gradcheck(seed)?;
    let passed = ode.passes(1e-4) && lm.passes(1e-3);
    Ok(SuiteOutcome::new(
        "gradients",
        passed,
        vec![("ode_max_rel_err", ode.max_rel_err), ("lm_max_rel_err", lm.max_rel_err)],
        format!(
            "ode {} params, worst {:.3e} at {}; lm {} params, worst {:.3e} at {}",
            ode.checked, ode.max_rel_err, ode.worst, lm.checked, lm.max_rel_err, lm.worst
        ),
    ))
}

fn random_rows(rng: &mut StreamRng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let normal: Normal<f64> = Normal::new(0.0, 1.5).expect("valid normal");
    (0..rows).map(|_| (0..cols).map(|_| normal.sample(rng).exp()).collect()).collect()
}

fn token_lists(rng: &mut StreamRng, n: usize, offset: u32) -> Vec<Vec<u32>> {
    (0..n).map(|i| vec![offset + i as u32, rng.random_range(0..100)]).collect()
}

fn dpo_reduction(seed: u64) -> Result<SuiteOutcome> {
    let mut rng = substream(seed, "verify/dpo_reduction");
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let n_ctx = rng.random_range(1..=4);
        let n_resp = rng.random_range(2..=8);
        let contexts = token_lists(&mut rng, n_ctx, 1000);
        let responses = token_lists(&mut rng, n_resp, 2000);
        let policy = TabularPolicy::from_weights(contexts.clone(), responses.clone(), random_rows(&mut rng, n_ctx, n_resp))?;
        let reference = TabularPolicy::from_weights(contexts.clone(), responses.clone(), random_rows(&mut rng, n_ctx, n_resp))?;
        let x = contexts[rng.random_range(0..n_ctx)].clone();
        let picks = rand::seq::index::sample(&mut rng, n_resp, 2);
        let (yw, yl) = (responses[picks.index(0)].clone(), responses[picks.index(1)].clone());
        let beta = rng.random_range(0.01..2.0);
        let quad = PreferenceQuadruple::new(x.clone(), x.clone(), yw.clone(), yl.clone())?;
        let dpo = dpo_loss(&policy, &reference, &x, &yw, &yl, beta)?;
        let longpo = longpo_loss(&policy, &reference, &quad, beta)?;
        let sample = MultiTurnSample::new(
            0,
            x.clone(),
            vec![Turn { span: [0, x.len()], instruction: vec![], chosen: yw, rejected: yl, chosen_truncated: false, rejected_truncated: false }],
        )?;
        let mt = longpo_mt_loss(&policy, &reference, &sample, beta, Aggregation::SumLogprob)?;
        let mt_prob = longpo_mt_loss(&policy, &reference, &sample, beta, Aggregation::SumProb)?;
        if dpo.to_bits() != longpo.to_bits() || mt.to_bits() != longpo.to_bits() || mt_prob.to_bits() != longpo.to_bits() {
            mismatches += 1;
        }
    }
    Ok(SuiteOutcome::new(
        "dpo_reduction",
        mismatches == 0,
        vec![("mismatches", mismatches as f64)],
        format!("{mismatches} of 1000 instances differ bitwise"),
    ))
}

fn optimal_policy_suite(seed: u64) -> Result<SuiteOutcome> {
    let mut rng = substream(seed, "verify/optimal_policy");
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut worst_gap = f64::INFINITY;
    let mut worst_bt: f64 = 0.0;
    let instances = 10;
    for _ in 0..instances {
        let n_short = rng.random_range(1..=3);
        let n_long = rng.random_range(1..=4);
        let n_resp = rng.random_range(2..=16);
        let responses = token_lists(&mut rng, n_resp, 3000);
        let short = TabularPolicy::from_weights(token_lists(&mut rng, n_short, 1000), responses.clone(), random_rows(&mut rng, n_short, n_resp))?;
        let long_contexts = token_lists(&mut rng, n_long, 2000);
        let short_of: Vec<usize> = (0..n_long).map(|_| rng.random_range(0..n_short)).collect();
        let reward: Vec<Vec<f64>> = (0..n_long).map(|_| (0..n_resp).map(|_| normal.sample(&mut rng)).collect()).collect();
        let x_weights: Vec<f64> = random_rows(&mut rng, 1, n_long).remove(0);
        let z: f64 = x_weights.iter().sum();
        let x_weights: Vec<f64> = x_weights.iter().map(|w| w / z).collect();
        let beta = rng.random_range(0.05..2.0);

        let best = optimal_policy(&short, long_contexts.clone(), &short_of, &reward, beta)?;
        let best_value = rlhf_objective_value(&best, &short, &short_of, &reward, &x_weights, beta)?;
        for _ in 0..1000 {
            let eps = rng.random_range(1e-3..1.0);
            let noise = random_rows(&mut rng, n_long, n_resp);
            let weights = best
                .rows()
                .iter()
                .zip(&noise)
                .map(|(row, q)| {
                    let qz: f64 = q.iter().sum();
                    row.iter().zip(q).map(|(p, q)| (1.0 - eps) * p + eps * q / qz).collect()
                })
                .collect();
            let other = TabularPolicy::from_weights(long_contexts.clone(), responses.clone(), weights)?;
            let value = rlhf_objective_value(&other, &short, &short_of, &reward, &x_weights, beta)?;
            worst_gap = worst_gap.min(best_value - value);
        }

        let log_z: Vec<f64> = short_of.iter().zip(&reward).map(|(&s, r)| log_partition(&short, s, r, beta)).collect();
        let r_star = recovered_reward(&best, &short, &short_of, &log_z, beta);
        for (l, &s) in short_of.iter().enumerate() {
            for a in 0..n_resp {
                for b in 0..n_resp {
                    let from_reward = bt_preference(r_star[l][a], r_star[l][b]);
                    let ratio = |y: usize| (best.row(l)[y] / short.row(s)[y]).ln();
                    let direct = bt_preference(beta * ratio(a), beta * ratio(b));
                    worst_bt = worst_bt.max((from_reward - direct).abs());
                }
            }
        }
    }
    let passed = worst_gap > 0.0 && worst_bt <= 1e-12;
    Ok(SuiteOutcome::new(
        "optimal_policy",
        passed,
        vec![("min_objective_gap", worst_gap), ("max_bt_dev", worst_bt)],
        format!("optimum beats perturbations by at least {worst_gap:.3e}; BT deviation {worst_bt:.3e}"),
    ))
}

fn cache(seed: u64) -> Result<SuiteOutcome> {
    let mut rng = substream(seed, "verify/cache");
    let dynamics = OdeDynamics::init(16, 2, &mut rng)?;
    let base = make_basis(16, 10000.0)?;
    let l = 64;
    let grid = [1.0, 2.0, 4.0, 8.0];
    let cache = build_cache(&dynamics, &base, &grid, &IntegratorConfig::default(), l)?;
    let mut failures = Vec::new();
    for entry in cache.entries() {
        let boundary = (entry.t * l as f64) as usize;
        let got = cache.lookup(boundary)?;
        if got.values().iter().zip(entry.basis.values()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            failures.push(format!("boundary {boundary} did not return t = {}", entry.t));
        }
    }
    for _ in 0..200 {
        let len = rng.random_range(1..=8 * l);
        let want = grid.iter().find(|t| **t * l as f64 >= len as f64).expect("within range");
        let got = cache.lookup(len)?;
        let entry = cache.entries().iter().find(|e| e.t == *want).expect("grid entry");
        if got != &entry.basis {
            failures.push(format!("length {len} did not resolve to t = {want}"));
        }
    }
    match cache.lookup(8 * l + 1) {
        Err(Error::OutOfRange { .. }) => {}
        other => failures.push(format!("length {} gave {other:?}", 8 * l + 1)),
    }
    Ok(SuiteOutcome::new(
        "cache",
        failures.is_empty(),
        vec![("failures", failures.len() as f64)],
        failures.first().cloned().unwrap_or_else(|| "boundaries, interior lengths and overflow behave".to_string()),
    ))
}

pub fn run_suite(name: &str, seed: u64, hook: GradHook) -> Result<SuiteOutcome> {
    match name {
        "theorem1" => theorem1(seed),
        "rope_shift" => rope_shift(seed),
        "chain" => chain(),
        "rk4_order" => rk4_order(),
        "gradients" => gradients(seed, hook),
        "dpo_reduction" => dpo_reduction(seed),
        "optimal_policy" => optimal_policy_suite(seed),
        "cache" => cache(seed),
        other => Err(invalid(format!("unknown suite '{other}'; known: {}", SUITES.join(", ")))),
    }
}

/// Runs every suite, or only `filter`, logging one record per suite.
pub fn run_verify(filter: Option<&str>, seed: u64, hook: GradHook, sink: &mut MetricsSink) -> Result<Vec<SuiteOutcome>> {
    let names: Vec<&str> = match filter {
        Some(f) => vec![f],
        None => SUITES.to_vec(),
    };
    let mut out = Vec::new();
    for (i, name) in names.into_iter().enumerate() {
        let outcome = run_suite(name, seed, hook)?;
        let mut rec = MetricsRecord::new(i, seed).tag(format!("verify/{name}")).with("passed", if outcome.passed { 1.0 } else { 0.0 });
        for (k, v) in &outcome.metrics {
            rec = rec.with(k, *v);
        }
        sink.push(rec)?;
        out.push(outcome);
    }
    Ok(out)
}
