use ctxlab::lm::corpus::copy_corpus;
use ctxlab::lm::{train_step, Checkpoint, ModelConfig, StepRngs, TinyLm, TrainConfig, TrainState};
use ctxlab::ode::{build_cache, BasisCache, IntegratorConfig, OdeDynamics};
use ctxlab::rng::substream;
use ctxlab::rope::make_basis;
use proptest::prelude::*;

fn small() -> ModelConfig {
    ModelConfig { vocab_size: 16, n_layers: 1, n_heads: 2, head_dim: 4, ffn_mult: 2, context_len: 8, rope_base: 100.0, seed: 1 }
}

fn cache(grid: &[f64]) -> BasisCache {
    let dynamics = OdeDynamics::init(4, 2, &mut substream(2, "dyn")).unwrap();
    build_cache(&dynamics, &make_basis(4, 100.0).unwrap(), grid, &IntegratorConfig::default(), 16).unwrap()
}

#[test]
fn logits_ignore_future_tokens() {
    let model = TinyLm::new(small(), &mut substream(1, "init")).unwrap();
    let basis = make_basis(4, 100.0).unwrap();
    let pos: Vec<f64> = (1..=6).map(f64::from).collect();
    let a = model.forward_at(&[1, 2, 3, 4, 5, 6], &pos, &basis).unwrap();
    let b = model.forward_at(&[1, 2, 3, 9, 9, 9], &pos, &basis).unwrap();
    for j in 0..3 {
        assert_eq!(a.row(j), b.row(j));
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn one_joint_step_moves_the_dynamics() {
    let mut model = TinyLm::new(small(), &mut substream(1, "init")).unwrap();
    let mut dynamics = OdeDynamics::init(4, 2, &mut substream(1, "dyn")).unwrap();
    let before = dynamics.params().to_vec();
    let train = TrainConfig { batch_size: 2, train_len: 8, t_max: 4.0, ..TrainConfig::default() };
    let batch = copy_corpus(&mut substream(1, "data"), 2, 8, 16);
    let mut state = TrainState::new(&train);
    let out = train_step(
        &mut model,
        &mut dynamics,
        &make_basis(4, 100.0).unwrap(),
        &mut state,
        &batch,
        &train,
        &mut StepRngs::from_seed(1),
    )
    .unwrap();
    assert!(out.dynamics_grad_norm > 0.0);
    assert_ne!(dynamics.params(), before.as_slice());
}

#[test]
fn checkpoint_reload_reproduces_logits() {
    let model = TinyLm::new(small(), &mut substream(4, "init")).unwrap();
    let dynamics = OdeDynamics::init(4, 2, &mut substream(4, "dyn")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::new(&model, Some(&dynamics), None, 0).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let back = ck.model().unwrap();
    assert_eq!(ck.dynamics().unwrap().unwrap().params(), dynamics.params());
    let basis = make_basis(4, 100.0).unwrap();
    let pos = [1.0, 2.5, 4.0];
    assert_eq!(
        model.forward_at(&[3, 1, 4], &pos, &basis).unwrap().data,
        back.forward_at(&[3, 1, 4], &pos, &basis).unwrap().data
    );
}

proptest! {
    #[test]
    fn lookup_picks_the_smallest_covering_factor(len in 1usize..=64) {
        let c = cache(&[1.0, 2.0, 4.0]);
        let got = c.lookup(len).unwrap();
        let expected = c.entries().iter().find(|e| e.t * 16.0 >= len as f64).unwrap();
        prop_assert_eq!(got, &expected.basis);
    }

    #[test]
    fn lookup_past_the_grid_fails(extra in 1usize..1000) {
        prop_assert!(cache(&[1.0, 2.0, 4.0]).lookup(64 + extra).is_err());
    }
}

#[test]
fn cache_file_round_trip_is_byte_identical() {
    let c = cache(&[1.0, 2.0, 3.0]);
    let text = serde_json::to_string(&c).unwrap();
    let back: BasisCache = serde_json::from_str(&text).unwrap();
    back.validate().unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), text);
    assert_eq!(back.lookup(48).unwrap(), &c.entries()[2].basis);
}
