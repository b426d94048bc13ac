use proptest::prelude::*;
use sdci::evaluation::{edge_accuracy, state_accuracy_aligned};
use sdci::sim::StateGraph;
use sdci::tensor::{gumbel_softmax_sample, softmax_with_temperature, Tape};
use sdci::training::kl_categorical_uniform;

fn graph_strategy(k: usize, n: usize, ne: usize) -> impl Strategy<Value = StateGraph> {
    prop::collection::vec(0..ne as u8, k * n * n).prop_map(move |mut e| {
        for s in 0..k {
            for i in 0..n {
                e[(s * n + i) * n + i] = 0;
            }
        }
        StateGraph::from_entries(k, n, ne, e).unwrap()
    })
}

fn rows(classes: usize) -> impl Strategy<Value = Vec<f64>> {
    (1usize..6).prop_flat_map(move |r| prop::collection::vec(-8.0f64..8.0, r * classes))
}

proptest! {
    #[test]
    fn kl_to_uniform_is_non_negative(logits in rows(3), tau in 0.1f64..2.0) {
        let q = softmax_with_temperature(&logits, 3, tau).unwrap();
        prop_assert!(kl_categorical_uniform(&q, 3, 1) >= -1e-6);
    }

    #[test]
    fn softmax_rows_are_distributions(logits in rows(4), tau in 0.05f64..3.0) {
        let q = softmax_with_temperature(&logits, 4, tau).unwrap();
        for row in q.chunks(4) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_softmax_tends_to_one_hot(logits in rows(3), noise_seed in 0u64..1000) {
        let mut rng = sdci::rng::stream(noise_seed, "noise", 0);
        let noise: Vec<f64> = sdci::tensor::gumbel_noise(&mut rng, logits.len());
        let log_q: Vec<f64> = {
            let q = softmax_with_temperature(&logits, 3, 1.0).unwrap();
            q.iter().map(|v| v.ln()).collect()
        };
        let mut tape = Tape::new();
        let lq = tape.constant_from([logits.len() / 3, 3], log_q.clone()).unwrap();
        let y = gumbel_softmax_sample(&mut tape, lq, &noise, 1e-4, false).unwrap();
        for (r, row) in tape.value(y).chunks(3).enumerate() {
            let perturbed: Vec<f64> = (0..3).map(|c| log_q[r * 3 + c] + noise[r * 3 + c]).collect();
            let mut order = perturbed.clone();
            order.sort_by(|a, b| b.partial_cmp(a).unwrap());
            // Near-ties are not separated even by a small temperature.
            prop_assume!(order[0] - order[1] > 1e-2);
            let best = perturbed.iter().position(|&v| v == order[0]).unwrap();
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row[best] > 1.0 - 1e-9);
        }
    }

    #[test]
    fn alignment_never_lowers_state_accuracy(
        pairs in prop::collection::vec((0u8..3, 0u8..3), 1..60),
    ) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let (raw, _) = state_accuracy_aligned(&pred, &truth, 3, false).unwrap();
        let (aligned, map) = state_accuracy_aligned(&pred, &truth, 3, true).unwrap();
        prop_assert!(aligned >= raw);
        let relabeled: Vec<u8> = pred.iter().map(|&p| map[usize::from(p)] as u8).collect();
        let (check, _) = state_accuracy_aligned(&relabeled, &truth, 3, false).unwrap();
        prop_assert!((check - aligned).abs() < 1e-12);
    }

    #[test]
    fn edge_accuracy_is_invariant_to_object_relabeling(
        pred in graph_strategy(2, 4, 3),
        truth in graph_strategy(2, 4, 3),
        perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let a = edge_accuracy(&pred, &truth, false, None).unwrap();
        let b = edge_accuracy(&pred.permute_objects(&perm), &truth.permute_objects(&perm), false, None).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=100.0).contains(&a));
    }
}
