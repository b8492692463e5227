use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::autodiff::{finite_difference_oracle, max_relative_error};
use crate::meta::{meta_loss_vanilla, Toggles};
use crate::network::NetworkSpec;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A 2-class task on 2-d inputs: class means at +-1 along a random axis.
fn vector_task(seed: u64, per_class: usize) -> Episode {
    let mut r = rng(seed);
    let noise = Normal::new(0.0f32, 0.7).unwrap();
    let axis = [noise.sample(&mut r) + 1.0, noise.sample(&mut r)];
    let mut draw = |n: usize| {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n * 2 {
            let y = i % 2;
            let s = if y == 0 { -1.0 } else { 1.0 };
            xs.push(s * axis[0] + noise.sample(&mut r));
            xs.push(s * axis[1] + noise.sample(&mut r));
            ys.push(y);
        }
        (Tensor::new(vec![n * 2, 2], xs).unwrap(), ys)
    };
    let (support_x, support_y) = draw(per_class);
    let (target_x, target_y) = draw(per_class);
    Episode {
        task_id: seed,
        support_x,
        support_y,
        target_x,
        target_y,
        classes: vec![0, 1],
        labels: vec![0, 1],
        support_ids: Vec::new(),
        target_ids: Vec::new(),
    }
}

fn mlp_learner(config: MetaConfig, hidden: usize) -> MetaLearner {
    let mut spec = NetworkSpec::mlp(2, vec![hidden], 2, config.inner_steps);
    config.configure_network(&mut spec);
    let net = Network::new(spec).unwrap();
    MetaLearner::new(
        net,
        config,
        RunPlan {
            epochs: 10,
            iterations_per_epoch: 10,
        },
    )
    .unwrap()
}

fn perturb<T: Element>(state: &mut MetaState<T>, seed: u64, sd: f64) {
    let mut r = rng(seed);
    let n = Normal::new(0.0, sd).unwrap();
    let flat: Vec<T> = state
        .params
        .flatten()
        .into_iter()
        .map(|v| v + T::from_f64(n.sample(&mut r)))
        .collect();
    state.params = state.params.unflatten(&flat).unwrap();
}

#[test]
fn lslr_state_has_one_rate_per_group_and_step() {
    let config = MetaConfig {
        inner_steps: 3,
        ..MetaConfig::default()
    };
    let learner = mlp_learner(config, 4);
    let state = learner.init_state::<f64, _>(&mut rng(0));
    let rates = state.inner_lrs();
    assert_eq!(rates.len(), 2 * 3);
    assert!(rates.contains("lr/fc1/step1") && rates.contains("lr/linear/step3"));
    assert!(rates.values().all(|r| r.item() == 0.1));
    for name in state.theta().names() {
        for s in 1..=3 {
            assert!(rates.contains(&lr_name(crate::network::layer_group(name), s)));
        }
    }
    assert!(state.adam.m.is_compatible(&state.params));
    let vanilla = mlp_learner(
        MetaConfig {
            inner_steps: 3,
            ..MetaConfig::vanilla()
        },
        4,
    );
    assert!(vanilla
        .init_state::<f64, _>(&mut rng(0))
        .inner_lrs()
        .is_empty());
}

#[test]
fn meta_gradient_matches_finite_differences() {
    let config = MetaConfig {
        inner_steps: 2,
        ..MetaConfig::default()
    };
    let learner = mlp_learner(config, 4);
    let mut state = learner.init_state::<f64, _>(&mut rng(1));
    perturb(&mut state, 2, 0.2);
    let tasks = [vector_task(3, 5), vector_task(4, 5)];
    let weights = learner.loss_weights(0, 0);
    assert_eq!(weights.weights, vec![0.5, 0.5]);
    let (_, grads) = learner
        .meta_gradient(&state, &tasks, Order::Second, &weights)
        .unwrap();
    let fd = finite_difference_oracle(
        |p| {
            let s = MetaState {
                params: p.clone(),
                ..state.clone()
            };
            learner.meta_objective(&s, &tasks, Order::Second, &weights)
        },
        &state.params,
        1e-4,
    )
    .unwrap();
    let err = max_relative_error(&grads, &fd, 1e-3);
    assert!(err < 1e-4, "max relative error {err}");
    for name in [
        "lr/fc1/step2",
        "bn1/step1/gamma",
        "bn1/step2/beta",
        "fc1/weight",
    ] {
        assert!(grads.get(name).unwrap().sum_sq() > 0.0, "{name}");
    }
}

#[test]
fn one_hot_weights_reproduce_vanilla_objective() {
    let config = MetaConfig {
        inner_steps: 3,
        ..MetaConfig::default()
    };
    let learner = mlp_learner(config.clone(), 4);
    let mut state = learner.init_state::<f64, _>(&mut rng(5));
    perturb(&mut state, 6, 0.1);
    let tasks = [vector_task(7, 4), vector_task(8, 4)];
    let one_hot = LossWeights::final_only(3, false);
    let (loss, grads) = learner
        .meta_gradient(&state, &tasks, Order::Second, &one_hot)
        .unwrap();

    // independent route: final-step losses only, combined by the vanilla objective
    let tape = Tape::new();
    let all = tape.leaves(&state.params);
    let theta = all.filter(is_inner_param);
    let bn = all.filter(is_bn_param);
    let rates = all.filter(is_lr_param);
    let mut per_task = Vec::new();
    for task in &tasks {
        let sx = tape.constant(&task.support_x.cast());
        let tx = tape.constant(&task.target_x.cast());
        let net = learner.network();
        let traj = adapt(
            &theta,
            |p, slot| {
                let logits = net.forward(
                    &with_bn(p, &bn)?,
                    &state.bn_stats,
                    &sx,
                    slot,
                    Mode::Train,
                    None,
                )?;
                cross_entropy(&logits, &task.support_y)
            },
            &InnerLr::PerLayer(&rates),
            3,
            Order::Second,
        )
        .unwrap();
        let last = net
            .forward(
                &with_bn(traj.last(), &bn).unwrap(),
                &state.bn_stats,
                &tx,
                3,
                Mode::Train,
                None,
            )
            .unwrap();
        let mut losses = vec![None; 4];
        losses[3] = Some(cross_entropy(&last, &task.target_y).unwrap());
        per_task.push(losses);
    }
    let vanilla = meta_loss_vanilla(&per_task).unwrap();
    let vgrads = tape
        .gradients_set(&vanilla, &all, false)
        .unwrap()
        .values_host();
    assert!((loss - vanilla.item()).abs() <= 1e-10 * loss.abs());
    assert!(max_relative_error(&grads, &vgrads, 1e-12) < 1e-10);
}

#[test]
fn outer_update_reduces_loss_and_updates_stats() {
    let config = MetaConfig {
        inner_steps: 2,
        task_batch: 4,
        lr_max: 0.01,
        ..MetaConfig::default()
    };
    let learner = mlp_learner(config, 8);
    let mut state = learner.init_state::<f64, _>(&mut rng(9));
    let tasks: Vec<Episode> = (0..4).map(|i| vector_task(100 + i, 5)).collect();
    let first = learner.outer_update(&mut state, &tasks, 0, 0).unwrap();
    assert_eq!(state.adam.step, 1);
    assert_eq!(first.support_losses.len(), 2);
    assert_eq!(first.target_losses.len(), 3);
    assert!(first.target_losses[0].is_none() && first.target_losses[2].is_some());
    assert!(state.bn_stats.slot(0, 2).count > 0);
    let mut last = first.loss;
    for it in 1..40 {
        last = learner
            .outer_update(&mut state, &tasks, 0, it)
            .unwrap()
            .loss;
    }
    assert!(last < first.loss, "{last} vs {}", first.loss);
}

#[test]
fn first_order_iteration_records_no_backward_nodes() {
    let learner = mlp_learner(
        MetaConfig {
            inner_steps: 2,
            ..MetaConfig::default()
        },
        4,
    );
    let mut state = learner.init_state::<f32, _>(&mut rng(0));
    let tasks = [vector_task(1, 3)];
    assert_eq!(learner.order(0), Order::First);
    let m = learner.outer_update(&mut state, &tasks, 0, 0).unwrap();
    assert_eq!(m.backward_nodes, 0);
    let m = learner.outer_update(&mut state, &tasks, 50, 1).unwrap();
    assert_eq!(m.order, Order::Second);
    assert!(m.backward_nodes > 0);
}

#[test]
fn divergence_leaves_state_untouched() {
    let learner = mlp_learner(
        MetaConfig {
            inner_steps: 2,
            ..MetaConfig::default()
        },
        4,
    );
    let mut state = learner.init_state::<f64, _>(&mut rng(0));
    *state.params.get_mut("linear/bias").unwrap() =
        Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
    let before = state.clone();
    let err = learner
        .outer_update(&mut state, &[vector_task(1, 3)], 0, 0)
        .unwrap_err();
    match err {
        Error::Diverged { per_step } => assert_eq!(per_step.len(), 4),
        other => panic!("unexpected {other}"),
    }
    assert_eq!(state.adam, before.adam);
    assert_eq!(state.bn_stats, before.bn_stats);
}

#[test]
fn schedules_follow_toggles() {
    let plain = mlp_learner(
        MetaConfig {
            inner_steps: 2,
            ..MetaConfig::vanilla()
        },
        4,
    );
    assert_eq!(plain.order(0), Order::Second);
    assert_eq!(plain.outer_lr(57), 0.001);
    assert_eq!(plain.loss_weights(0, 0).weights, vec![0.0, 1.0]);
    let pp = mlp_learner(
        MetaConfig {
            inner_steps: 2,
            ..MetaConfig::default()
        },
        4,
    );
    assert_eq!(pp.outer_lr(0), 0.001);
    assert_eq!(pp.outer_lr(100), 1e-5);
    let per_it = mlp_learner(
        MetaConfig {
            inner_steps: 2,
            msl_per_iteration: true,
            msl_horizon: 1.0,
            ..MetaConfig::default()
        },
        4,
    );
    assert_eq!(per_it.loss_weights(0, 5).weights, vec![0.25, 0.75]);
}

#[test]
fn mismatched_network_modes_are_rejected() {
    let spec = NetworkSpec::mlp(2, vec![4], 2, 2);
    let net = Network::new(spec).unwrap();
    let plan = RunPlan {
        epochs: 1,
        iterations_per_epoch: 1,
    };
    assert!(matches!(
        MetaLearner::new(net.clone(), MetaConfig::vanilla(), plan),
        Err(Error::Config(_))
    ));
    let too_many = MetaConfig {
        inner_steps: 4,
        ..MetaConfig::default()
    };
    assert!(matches!(
        MetaLearner::new(net, too_many, plan),
        Err(Error::Structure(_))
    ));
}

#[test]
fn prediction_is_a_distribution_and_repeatable() {
    let learner = mlp_learner(
        MetaConfig {
            inner_steps: 2,
            ..MetaConfig::default()
        },
        4,
    );
    let state = learner.init_state::<f32, _>(&mut rng(0));
    let task = vector_task(3, 4);
    let p = learner.predict(&state, &task, 2).unwrap();
    assert_eq!(p.shape(), &[8, 2]);
    for row in p.data().chunks(2) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    assert_eq!(p, learner.predict(&state, &task, 2).unwrap());
    assert!(learner.predict(&state, &task, 3).is_err());
}

/// Plain MAML written out directly against the tape: per-task unrolled SGD,
/// summed final-step target losses, gradients summed in task order, Adam.
fn reference_vanilla_step(
    learner: &MetaLearner,
    state: &MetaState<f64>,
    tasks: &[Episode],
    alpha: f64,
    steps: usize,
    lr: f64,
) -> (ParamSet<Tensor<f64>>, BatchNormState<f64>) {
    let net = learner.network();
    let mut total: Option<Vec<Vec<f64>>> = None;
    let mut bn_state = state.bn_stats.clone();
    let mut logs = Vec::new();
    for task in tasks {
        let tape = Tape::new();
        let leaves = tape.leaves(&state.params);
        let bn = leaves.filter(crate::network::is_bn_param);
        let mut theta = leaves.filter(|n| !crate::network::is_bn_param(n));
        let sx = tape.constant(&task.support_x.cast());
        let tx = tape.constant(&task.target_x.cast());
        let mut log = Vec::new();
        for i in 0..steps {
            let mut merged = theta.clone();
            merged.extend(bn.clone()).unwrap();
            let logits = net
                .forward(
                    &merged,
                    &state.bn_stats,
                    &sx,
                    i,
                    Mode::Train,
                    Some(&mut log),
                )
                .unwrap();
            let loss = cross_entropy(&logits, &task.support_y).unwrap();
            let g = tape.gradients_set(&loss, &theta, true).unwrap();
            let mut next = ParamSet::new();
            for ((name, p), gi) in theta.iter().zip(g.values()) {
                next.insert(name, p.sub(&gi.scale(alpha)).unwrap()).unwrap();
            }
            theta = next;
        }
        let mut merged = theta.clone();
        merged.extend(bn.clone()).unwrap();
        let logits = net
            .forward(
                &merged,
                &state.bn_stats,
                &tx,
                steps,
                Mode::Train,
                Some(&mut log),
            )
            .unwrap();
        let loss = cross_entropy(&logits, &task.target_y).unwrap();
        let vars: Vec<_> = leaves.values().copied().collect();
        let g: Vec<Vec<f64>> = tape
            .gradients(&loss, &vars, false)
            .unwrap()
            .iter()
            .map(|v| v.value().data().to_vec())
            .collect();
        total = Some(match total {
            None => g,
            Some(mut t) => {
                for (a, b) in t.iter_mut().zip(&g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += 1.0 * y;
                    }
                }
                t
            }
        });
        logs.push(log);
    }
    for log in &logs {
        bn_state.apply(log);
    }
    let (b1, b2, eps) = (0.9f64, 0.99f64, 1e-8f64);
    let t = state.adam.step as i32 + 1;
    let mut out = ParamSet::new();
    for (((name, p), g), (m, v)) in state
        .params
        .iter()
        .zip(total.unwrap())
        .zip(state.adam.m.values().zip(state.adam.v.values()))
    {
        let mut data = p.data().to_vec();
        for i in 0..data.len() {
            let mi = b1 * m.data()[i] + (1.0 - b1) * g[i];
            let vi = b2 * v.data()[i] + (1.0 - b2) * g[i] * g[i];
            let mh = mi / (1.0 - b1.powi(t));
            let vh = vi / (1.0 - b2.powi(t));
            data[i] -= lr * mh / (vh.sqrt() + eps);
        }
        out.insert(name, Tensor::new(p.shape().to_vec(), data).unwrap())
            .unwrap();
    }
    (out, bn_state)
}

#[test]
fn vanilla_update_matches_reference_bit_for_bit() {
    let config = MetaConfig {
        inner_steps: 2,
        inner_lr: 0.3,
        toggles: Toggles::NONE,
        ..MetaConfig::default()
    };
    let learner = mlp_learner(config, 6);
    let mut state = learner.init_state::<f64, _>(&mut rng(21));
    let tasks: Vec<Episode> = (0..3).map(|i| vector_task(40 + i, 4)).collect();
    for it in 0..3 {
        let (want, want_bn) = reference_vanilla_step(&learner, &state, &tasks, 0.3, 2, 0.001);
        learner.outer_update(&mut state, &tasks, 0, it).unwrap();
        for ((name, a), b) in state.params.iter().zip(want.values()) {
            let same = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "iteration {it}: {name} differs");
        }
        assert_eq!(state.bn_stats, want_bn);
    }
}
