use std::path::Path;
use std::process::{Command, Output};

fn ctxlab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxlab"))
        .args(args)
        .args(["--canonical-output", "--out"])
        .arg(out)
        .output()
        .expect("spawn ctxlab")
}

fn metrics(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn verify_passes_and_the_hook_breaks_it() {
    let dir = tempfile::tempdir().unwrap();
    let ok = ctxlab(&dir.path().join("ok"), &["verify"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    assert_eq!(metrics(&dir.path().join("ok")).len(), 8);

    let bad = ctxlab(&dir.path().join("bad"), &["verify", "--set", "w_down_grad_offset=0.01"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("gradients        FAIL"));
}

#[test]
fn filter_runs_a_single_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctxlab(dir.path(), &["verify", "--filter", "theorem1"]);
    assert!(out.status.success());
    let recs = metrics(dir.path());
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["tag"], "verify/theorem1");
    assert!(recs[0].get("wall_ms").is_none());
}

#[test]
fn bad_config_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctxlab(dir.path(), &["train-lm", "--set", "train.stepz=3"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("stepz"));
}

#[test]
fn config_file_in_key_value_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\ntrain.steps = 0\nmodel.n_layers = 1\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = ctxlab(&out_dir, &["train-lm", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(snap["config"]["model"]["n_layers"], 1);
    assert_eq!(snap["config"]["train"]["steps"], 0);
    assert!(out_dir.join("checkpoint.json").exists());
}

#[test]
fn cache_then_eval_reuses_the_cache_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let small = ["--set", "model.n_layers=1", "--set", "train.batch_size=2"];
    let train = ctxlab(&root.join("t"), &[&["train-lm", "--set", "train.steps=2"], &small[..]].concat());
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let ck = format!("checkpoint={}", root.join("t/checkpoint.json").display());

    assert!(ctxlab(&root.join("c"), &["cache-basis", "--set", &ck, "--set", "t_values=[1,2,4]"]).status.success());
    let cache_path = root.join("c/basis_cache.json");
    let before = std::fs::read(&cache_path).unwrap();

    let cache = format!("cache={}", cache_path.display());
    let eval = ctxlab(
        &root.join("e"),
        &["eval-extrapolate", "--set", &ck, "--set", &cache, "--set", "eval_lengths=[32,64,128]", "--set", "eval_sequences=2"],
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert_eq!(std::fs::read(&cache_path).unwrap(), before);
    let lens: Vec<f64> = metrics(&root.join("e")).iter().map(|r| r["eval_len"].as_f64().unwrap()).collect();
    assert_eq!(lens, [32.0, 64.0, 128.0]);

    let far = ctxlab(&root.join("f"), &["eval-extrapolate", "--set", &ck, "--set", &cache, "--set", "eval_lengths=[257]"]);
    assert!(!far.status.success());
}

#[test]
fn preference_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let init = ctxlab(&root.join("m"), &["train-lm", "--set", "train.steps=0", "--set", "model.n_layers=1"]);
    assert!(init.status.success());
    let ck = root.join("m/checkpoint.json");

    let gen = ctxlab(
        &root.join("g"),
        &[
            "gen-prefs",
            "--set",
            &format!("gen.model_checkpoint={}", ck.display()),
            "--set",
            "n_docs=2",
            "--set",
            "gen.drop_identical=false",
        ],
    );
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(root.join("g/datagen_stats.json").exists());

    let train = ctxlab(
        &root.join("p"),
        &[
            "train-longpo",
            "--set",
            &format!("checkpoint={}", ck.display()),
            "--set",
            &format!("dataset={}", root.join("g/dataset.jsonl").display()),
            "--set",
            "longpo.steps=2",
            "--set",
            "longpo.batch_size=1",
        ],
    );
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let margins: Vec<_> = metrics(&root.join("p")).into_iter().filter(|r| r["tag"] == "longpo/eval").collect();
    assert_eq!(margins.len(), 2);
    assert!(root.join("p/checkpoint.json").exists());
}
