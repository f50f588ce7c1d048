use ctxlab::prefopt::{
    aggregate, dpo_loss, kl_divergence, longpo_loss, optimal_policy, read_dataset, write_dataset, Aggregation,
    MultiTurnSample, PreferenceQuadruple, SequencePolicy, TabularPolicy, Turn,
};
use proptest::prelude::*;

fn table(contexts: Vec<Vec<u32>>, weights: Vec<Vec<f64>>) -> TabularPolicy {
    let n = weights[0].len();
    let responses = (0..n as u32).map(|r| vec![100 + r]).collect();
    TabularPolicy::from_weights(contexts, responses, weights).unwrap()
}

fn weights(rows: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01f64..10.0, n), rows)
}

proptest! {
    #[test]
    fn longpo_equals_dpo_when_contexts_coincide(
        pw in weights(1, 4), rw in weights(1, 4), w in 0usize..4, l in 0usize..4, beta in 0.01f64..2.0,
    ) {
        let x = vec![7u32, 8];
        let policy = table(vec![x.clone()], pw);
        let reference = table(vec![x.clone()], rw);
        let (yw, yl) = (vec![100 + w as u32], vec![100 + l as u32]);
        let quad = PreferenceQuadruple::new(x.clone(), x.clone(), yw.clone(), yl.clone()).unwrap();
        let a = longpo_loss(&policy, &reference, &quad, beta).unwrap();
        let b = dpo_loss(&policy, &reference, &x, &yw, &yl, beta).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(a > 0.0);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(w in weights(2, 6)) {
        let t = table(vec![vec![1], vec![2]], w);
        prop_assert!(kl_divergence(t.row(0), t.row(1)).unwrap() >= -1e-15);
        prop_assert_eq!(kl_divergence(t.row(0), t.row(0)).unwrap(), 0.0);
    }

    #[test]
    fn sum_prob_never_exceeds_the_best_turn_plus_log_count(lp in prop::collection::vec(-30.0f64..0.0, 1..6)) {
        let best = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let agg = aggregate(&lp, Aggregation::SumProb);
        prop_assert!(agg >= best - 1e-12);
        prop_assert!(agg <= best + (lp.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn optimal_policy_rows_are_distributions(w in weights(1, 5), r in prop::collection::vec(-3.0f64..3.0, 5), beta in 0.05f64..2.0) {
        let short = table(vec![vec![1]], w);
        let long_contexts = vec![vec![1, 9, 9], vec![1, 8]];
        let opt = optimal_policy(&short, long_contexts, &[0, 0], &[r.clone(), r.clone()], beta).unwrap();
        for row in opt.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(opt.seq_logprob(&[1, 8], &[100]).unwrap().is_finite());
    }
}

#[test]
fn dataset_survives_a_write_read_cycle() {
    let turn = |lo: usize, c: u32| Turn {
        span: [lo, lo + 3],
        instruction: vec![2, 4, 20, 3],
        chosen: vec![c, 1],
        rejected: vec![c + 1, 1],
        chosen_truncated: false,
        rejected_truncated: c % 2 == 0,
    };
    let samples = vec![
        MultiTurnSample::new(3, (10..40).collect(), vec![turn(0, 40), turn(10, 41)]).unwrap(),
        MultiTurnSample::new(4, (10..20).collect(), vec![turn(2, 44)]).unwrap(),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &samples).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, samples);
    let again = dir.path().join("e.jsonl");
    write_dataset(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
