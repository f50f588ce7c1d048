//! End-to-end acceptance run against the `ctxlab` binary. Prints one line per
//! criterion. Exits nonzero on a failed criterion only when
//! `CTXLAB_ACCEPTANCE_STRICT=1`, so the full result table is always printed
//! and a known failing experiment does not hide the others.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ctxlab");

struct Run {
    ok: bool,
    elapsed: Duration,
    dir: PathBuf,
}

fn run(root: &Path, dir: &str, args: &[&str]) -> Run {
    let out = root.join(dir);
    let start = Instant::now();
    let status = Command::new(BIN)
        .args(args)
        .args(["--seed", "0", "--canonical-output", "--out"])
        .arg(&out)
        .output()
        .expect("spawn ctxlab");
    let elapsed = start.elapsed();
    if !status.status.success() {
        eprintln!("ctxlab {args:?} failed:\n{}", String::from_utf8_lossy(&status.stderr));
    }
    Run { ok: status.status.success(), elapsed, dir: out }
}

fn records(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).expect("metrics line"))
        .collect()
}

fn suite(dir: &Path, name: &str) -> Option<Value> {
    let tag = format!("verify/{name}");
    records(dir).into_iter().find(|r| r["tag"] == tag.as_str())
}

fn report(dir: &Path) -> Value {
    std::fs::read_to_string(dir.join("report.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or(Value::Null)
}

fn num(v: &Value, key: &str) -> f64 {
    v[key].as_f64().unwrap_or(f64::NAN)
}

fn ppl(report: &Value, len: u64) -> f64 {
    report["perplexity"]
        .as_array()
        .and_then(|a| a.iter().find(|p| p[0].as_u64() == Some(len)))
        .and_then(|p| p[1].as_f64())
        .unwrap_or(f64::NAN)
}

struct Table {
    failed: usize,
}

impl Table {
    fn line(&mut self, n: usize, name: &str, pass: bool, detail: String, elapsed: Duration) {
        if !pass {
            self.failed += 1;
        }
        println!(
            "criterion {n:>2} {:<4} {name:<28} {detail} [{:.2}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path();
    let mut t = Table { failed: 0 };

    let filtered = |name: &str, dir: &str| run(root, dir, &["verify", "--filter", name]);

    let r = filtered("theorem1", "a/theorem1");
    let s = suite(&r.dir, "theorem1").unwrap_or_default();
    let dev = num(&s, "max_abs_dev");
    t.line(1, "theorem-1 equivalence", r.ok && dev <= 1e-9 && r.elapsed < Duration::from_secs(1), format!("max |dev| {dev:.3e}"), r.elapsed);

    let r = filtered("rope_shift", "a/rope_shift");
    let dev = num(&suite(&r.dir, "rope_shift").unwrap_or_default(), "max_abs_dev");
    t.line(2, "rope shift invariance", r.ok && dev <= 1e-9, format!("max |dev| {dev:.3e}"), r.elapsed);

    let r = filtered("chain", "a/chain");
    let dev = num(&suite(&r.dir, "chain").unwrap_or_default(), "max_abs_dev");
    t.line(3, "chain identity", r.ok && dev <= 1e-12, format!("max |dev| {dev:.3e}"), r.elapsed);

    let r = filtered("rk4_order", "a/rk4_order");
    let s = suite(&r.dir, "rk4_order").unwrap_or_default();
    let (err, ratio) = (num(&s, "rel_err_64"), num(&s, "min_halving_ratio"));
    t.line(4, "integrator order", r.ok && err <= 1e-6 && ratio >= 12.0, format!("rel err {err:.3e}, halving ratio {ratio:.2}"), r.elapsed);

    let r = filtered("gradients", "a/gradients");
    let s = suite(&r.dir, "gradients").unwrap_or_default();
    let (ode, lm) = (num(&s, "ode_max_rel_err"), num(&s, "lm_max_rel_err"));
    t.line(
        5,
        "gradient checks",
        r.ok && ode <= 1e-4 && lm <= 1e-3 && r.elapsed < Duration::from_secs(30),
        format!("ode {ode:.3e}, lm {lm:.3e}"),
        r.elapsed,
    );

    let pi = run(root, "a/pi_fit", &["pi-fit"]);
    let rep = report(&pi.dir);
    let (err, steps) = (num(&rep, "max_rel_err"), num(&rep, "steps"));
    t.line(
        6,
        "pi-fit sanity",
        pi.ok && err <= 1e-3 && steps <= 2000.0 && pi.elapsed < Duration::from_secs(60),
        format!("max rel err {err:.3e} after {steps} steps"),
        pi.elapsed,
    );

    let ode = run(root, "a/extrap_ode", &["extrapolation"]);
    let base = run(root, "a/extrap_fixed", &["extrapolation", "--set", "fixed_rope=true"]);
    let (o, b) = (report(&ode.dir), report(&base.dir));
    let ode_ratio = ppl(&o, 256) / ppl(&o, 64);
    let base_ratio = ppl(&b, 256) / ppl(&b, 64);
    let both = ode.elapsed + base.elapsed;
    t.line(
        7,
        "extrapolation trend",
        ode.ok && base.ok && ode_ratio <= 1.5 && base_ratio >= 3.0 && both < Duration::from_secs(600),
        format!(
            "ode ppl {:.3} -> {:.3} (x{ode_ratio:.2}, need <= 1.5); fixed ppl {:.3} -> {:.3} (x{base_ratio:.2}, need >= 3)",
            ppl(&o, 64),
            ppl(&o, 256),
            ppl(&b, 64),
            ppl(&b, 256)
        ),
        both,
    );

    let r = filtered("dpo_reduction", "a/dpo_reduction");
    let m = num(&suite(&r.dir, "dpo_reduction").unwrap_or_default(), "mismatches");
    t.line(8, "dpo reduction", r.ok && m == 0.0, format!("{m} bitwise mismatches in 1000"), r.elapsed);

    let r = filtered("optimal_policy", "a/optimal_policy");
    let s = suite(&r.dir, "optimal_policy").unwrap_or_default();
    let (gap, bt) = (num(&s, "min_objective_gap"), num(&s, "max_bt_dev"));
    t.line(9, "optimal policy oracle", r.ok && gap > 0.0 && bt <= 1e-12, format!("min gap {gap:.3e}, bt dev {bt:.3e}"), r.elapsed);

    let toy = run(root, "a/longpo_toy", &["longpo-toy"]);
    let rep = report(&toy.dir);
    let (m0, m1) = (num(&rep, "initial_margin"), num(&rep, "final_margin"));
    t.line(
        10,
        "reward margin trend",
        toy.ok && m1 > 0.5 && toy.elapsed < Duration::from_secs(300),
        format!("margin {m0:.4} -> {m1:.4} in 500 steps"),
        toy.elapsed,
    );

    let r = filtered("cache", "a/cache");
    let f = num(&suite(&r.dir, "cache").unwrap_or_default(), "failures");
    t.line(11, "cache lookup contract", r.ok && f == 0.0, format!("{f} failures"), r.elapsed);

    let start = Instant::now();
    let full = run(root, "a/verify", &["verify"]);
    let reruns = [
        ("a/verify", run(root, "b/verify", &["verify"])),
        ("a/pi_fit", run(root, "b/pi_fit", &["pi-fit"])),
        ("a/extrap_ode", run(root, "b/extrap_ode", &["extrapolation"])),
        ("a/extrap_fixed", run(root, "b/extrap_fixed", &["extrapolation", "--set", "fixed_rope=true"])),
        ("a/longpo_toy", run(root, "b/longpo_toy", &["longpo-toy"])),
    ];
    let mut differing = Vec::new();
    for (first, second) in &reruns {
        let a = std::fs::read(root.join(first).join("metrics.jsonl")).unwrap_or_default();
        let b = std::fs::read(second.dir.join("metrics.jsonl")).unwrap_or_default();
        if a.is_empty() || a != b || !second.ok {
            differing.push(first.trim_start_matches("a/"));
        }
    }
    t.line(
        12,
        "reproducibility",
        full.ok && differing.is_empty(),
        if differing.is_empty() { "5 runs byte-identical".to_string() } else { format!("differ: {}", differing.join(", ")) },
        start.elapsed(),
    );

    println!("{} of 12 criteria passed", 12 - t.failed);
    if t.failed > 0 && std::env::var("CTXLAB_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
