//! Property tests over the public API.

use proptest::prelude::*;

use maml_core::autodiff::{ParamSet, Tensor};
use maml_core::harness::{read_metrics, MetricsRecord, MetricsWriter, RecordKind};
use maml_core::meta::{anneal_loss_weights, cosine_lr, derivative_order, Order};

proptest! {
    #[test]
    fn loss_weights_sum_to_one_and_respect_the_floor(
        progress in 0.0f64..400.0,
        steps in 1usize..10,
        pre in any::<bool>(),
        horizon in 0.5f64..200.0,
        floor in 0.0f64..0.01,
    ) {
        let w = anneal_loss_weights(progress, steps, pre, horizon, floor);
        prop_assert_eq!(w.weights.len(), steps + usize::from(pre));
        prop_assert_eq!(w.last_step(), steps);
        prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (last, early) = w.weights.split_last().unwrap();
        prop_assert!(early.iter().all(|&v| v >= floor && v <= *last + 1e-15));
    }

    #[test]
    fn loss_weights_move_toward_the_final_step(
        a in 0.0f64..300.0,
        d in 0.0f64..50.0,
        steps in 1usize..8,
        horizon in 1.0f64..150.0,
    ) {
        let w0 = anneal_loss_weights(a, steps, false, horizon, 0.001);
        let w1 = anneal_loss_weights(a + d, steps, false, horizon, 0.001);
        let n = steps - 1;
        prop_assert!(w1.weights[n] >= w0.weights[n] - 1e-15);
        prop_assert!((0..n).all(|i| w1.weights[i] <= w0.weights[i] + 1e-15));
    }

    #[test]
    fn cosine_lr_is_bounded_and_non_increasing(total in 1usize..5000, frac in 0.0f64..1.0, lo in 1e-7f64..1e-4) {
        let hi = 1e-3;
        let i = ((total as f64) * frac) as usize;
        let a = cosine_lr(i, total, hi, lo);
        let b = cosine_lr(i + 1, total, hi, lo);
        prop_assert!(b <= a);
        prop_assert!((lo..=hi).contains(&a));
        prop_assert_eq!(cosine_lr(total + 10, total, hi, lo), lo);
    }

    #[test]
    fn first_order_exactly_before_the_switch(epoch in 0usize..500, switch in 0usize..200) {
        let expected = if epoch < switch { Order::First } else { Order::Second };
        prop_assert_eq!(derivative_order(epoch, switch), expected);
    }

    #[test]
    fn param_set_flatten_round_trips(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 1..5),
        seed in any::<u64>(),
    ) {
        let mut p = ParamSet::new();
        let mut k = seed;
        for (i, s) in shapes.iter().enumerate() {
            let t = Tensor::from_fn(s, |_| {
                k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (k >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            });
            p.insert(format!("layer{i}/weight"), t).unwrap();
        }
        let flat = p.flatten();
        prop_assert_eq!(flat.len(), p.numel());
        let back = p.unflatten(&flat).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert!(p.unflatten(&flat[1..]).is_err());
    }
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        Just(0.0),
        Just(1e-300),
        Just(f64::MIN_POSITIVE)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_rows_round_trip(
        loss in finite(),
        support in prop::collection::vec(finite(), 0..6),
        target in prop::collection::vec(prop::option::of(finite()), 0..6),
        acc in prop::option::of(0.0f64..1.0),
        epoch in 0usize..1000,
        iteration in 0usize..100_000,
        note in "[a-z ,;\"]{0,12}",
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rec = MetricsRecord {
            kind: RecordKind::Iteration,
            run_id: "r".into(),
            seed: 3,
            epoch,
            iteration,
            loss: Some(loss),
            support_losses: support,
            target_losses: target,
            accuracy: acc,
            lr: Some(1e-3),
            order: Some(Order::Second),
            loss_weights: vec![0.25, 0.75],
            grad_norm: None,
            wall_ms: Some(12.5),
            backward_nodes: Some(7),
            val_accuracy: None,
            val_std_error: None,
            val_loss: None,
            note,
        };
        {
            let mut w = MetricsWriter::open(&path).unwrap();
            w.write(&rec).unwrap();
            w.write(&rec).unwrap();
        }
        let back = read_metrics(&path).unwrap();
        prop_assert_eq!(back, vec![rec.clone(), rec]);
    }
}
