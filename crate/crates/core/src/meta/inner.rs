use crate::autodiff::{Element, ParamSet, Var};
use crate::error::{Error, Result};
use crate::network::layer_group;

use super::schedule::{LossWeights, Order};

/// Name of the learnable inner learning rate of `group` at inner step
/// `step` (1-based).
pub fn lr_name(group: &str, step: usize) -> String {
    format!("lr/{group}/step{step}")
}

pub fn is_lr_param(name: &str) -> bool {
    name.starts_with("lr/")
}

/// Step size used by one inner update.
#[derive(Clone, Copy)]
pub enum InnerLr<'a, 't, T> {
    /// The same constant for every parameter and step.
    Fixed(f64),
    /// Learned per-layer, per-step scalars named by [`lr_name`].
    PerLayer(&'a ParamSet<Var<'t, T>>),
}

/// `params - lr * grads`, entry by entry. `step` is the 1-based index of
/// the update (selects the per-layer rate).
pub fn inner_step<'t, T: Element>(
    params: &ParamSet<Var<'t, T>>,
    grads: &ParamSet<Var<'t, T>>,
    lr: &InnerLr<'_, 't, T>,
    step: usize,
) -> Result<ParamSet<Var<'t, T>>> {
    if params.len() != grads.len() || params.names().zip(grads.names()).any(|(a, b)| a != b) {
        return Err(Error::Structure(
            "inner step: gradients do not match the parameter set".into(),
        ));
    }
    let mut out = ParamSet::new();
    for ((name, p), g) in params.iter().zip(grads.values()) {
        if p.shape() != g.shape() {
            return Err(Error::shape("inner_step", &[&p.shape(), &g.shape()]));
        }
        let delta = match lr {
            InnerLr::Fixed(a) => g.scale(*a),
            InnerLr::PerLayer(rates) => {
                let key = lr_name(layer_group(name), step);
                let rate = rates.get(&key).ok_or_else(|| {
                    Error::Structure(format!("missing inner learning rate {key:?}"))
                })?;
                g.scale_by(rate)?
            }
        };
        out.insert(name, p.sub(&delta)?)?;
    }
    Ok(out)
}

/// Parameters after every inner update and the support loss each update
/// was taken on.
pub struct Trajectory<'t, T> {
    /// `params[i]` is the state after `i` updates; `params[0]` is the start.
    pub params: Vec<ParamSet<Var<'t, T>>>,
    /// `support_losses[i]` was evaluated at `params[i]`.
    pub support_losses: Vec<Var<'t, T>>,
}

impl<'t, T> Trajectory<'t, T> {
    pub fn steps(&self) -> usize {
        self.params.len() - 1
    }

    pub fn last(&self) -> &ParamSet<Var<'t, T>> {
        self.params.last().expect("trajectory holds the start")
    }
}

/// Runs `steps` gradient-descent updates from `theta0` on
/// `support_loss(params, slot)`, where `slot = i` for the update from
/// `params[i]`. With [`Order::Second`] every inner gradient stays on the
/// tape and later differentiation goes through it; with [`Order::First`]
/// the gradients enter as constants.
pub fn adapt<'t, T, F>(
    theta0: &ParamSet<Var<'t, T>>,
    mut support_loss: F,
    lr: &InnerLr<'_, 't, T>,
    steps: usize,
    order: Order,
) -> Result<Trajectory<'t, T>>
where
    T: Element,
    F: FnMut(&ParamSet<Var<'t, T>>, usize) -> Result<Var<'t, T>>,
{
    let mut params = vec![theta0.clone()];
    let mut support_losses = Vec::with_capacity(steps);
    for i in 0..steps {
        let current = &params[i];
        let loss = support_loss(current, i)?;
        let tape = loss.tape();
        let grads = tape.gradients_set(&loss, current, order == Order::Second)?;
        let next = inner_step(current, &grads, lr, i + 1)?;
        support_losses.push(loss);
        params.push(next);
    }
    Ok(Trajectory {
        params,
        support_losses,
    })
}

/// Target losses of one task, indexed by step. Steps whose weight is zero
/// may be left out.
pub type StepLosses<'t, T> = Vec<Option<Var<'t, T>>>;

/// Evaluates `target_loss(params[i], i)` for every step with a nonzero
/// weight.
pub fn target_losses<'t, T, F>(
    traj: &Trajectory<'t, T>,
    weights: &LossWeights,
    mut target_loss: F,
) -> Result<StepLosses<'t, T>>
where
    T: Element,
    F: FnMut(&ParamSet<Var<'t, T>>, usize) -> Result<Var<'t, T>>,
{
    if weights.last_step() != traj.steps() {
        return Err(Error::Structure(format!(
            "loss weights end at step {} but the trajectory has {} steps",
            weights.last_step(),
            traj.steps()
        )));
    }
    let mut out = vec![None; traj.steps() + 1];
    for (step, w) in weights.iter() {
        if w != 0.0 {
            out[step] = Some(target_loss(&traj.params[step], step)?);
        }
    }
    Ok(out)
}

/// Sum over tasks of the target loss after the final inner step.
pub fn meta_loss_vanilla<'t, T: Element>(tasks: &[StepLosses<'t, T>]) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for (b, losses) in tasks.iter().enumerate() {
        let last =
            losses.last().copied().flatten().ok_or_else(|| {
                Error::Structure(format!("task {b} has no final-step target loss"))
            })?;
        total = Some(match total {
            None => last,
            Some(t) => t.add(&last)?,
        });
    }
    total.ok_or_else(|| Error::Structure("meta loss over an empty task batch".into()))
}

/// Sum over tasks of the weighted per-step target losses. Zero-weight
/// steps are skipped, so a one-hot final weight gives exactly the
/// vanilla objective.
pub fn multi_step_meta_loss<'t, T: Element>(
    tasks: &[StepLosses<'t, T>],
    weights: &LossWeights,
) -> Result<Var<'t, T>> {
    let sum: f64 = weights.weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Structure(format!(
            "loss weights must be nonnegative and sum to 1 (sum {sum})"
        )));
    }
    let mut total: Option<Var<'t, T>> = None;
    for (b, losses) in tasks.iter().enumerate() {
        if losses.len() != weights.last_step() + 1 {
            return Err(Error::Structure(format!(
                "task {b} has {} step losses, weights expect {}",
                losses.len(),
                weights.last_step() + 1
            )));
        }
        for (step, w) in weights.iter() {
            if w == 0.0 {
                continue;
            }
            let l = losses[step].ok_or_else(|| {
                Error::Structure(format!("task {b} is missing the step-{step} target loss"))
            })?;
            let term = if w == 1.0 { l } else { l.scale(w) };
            total = Some(match total {
                None => term,
                Some(t) => t.add(&term)?,
            });
        }
    }
    total.ok_or_else(|| Error::Structure("meta loss over an empty task batch".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn theta(tape: &Tape<f64>, v: f64) -> ParamSet<Var<'_, f64>> {
        let mut p = ParamSet::new();
        p.insert("theta", tape.leaf(&Tensor::scalar(v))).unwrap();
        p
    }

    // f(x; theta) = theta * x on the single example (x = 1, y = 0), squared error
    fn toy_loss<'t>(p: &ParamSet<Var<'t, f64>>, _: usize) -> Result<Var<'t, f64>> {
        let t = p.get("theta").unwrap();
        t.mul(t)
    }

    fn step_once(theta: f64, grad: f64, lr: f64) -> f64 {
        let tape = Tape::new();
        let p = self::theta(&tape, theta);
        let mut g = ParamSet::new();
        g.insert("theta", tape.constant(&Tensor::scalar(grad)))
            .unwrap();
        inner_step(&p, &g, &InnerLr::Fixed(lr), 1)
            .unwrap()
            .get("theta")
            .unwrap()
            .item()
    }

    #[test]
    fn inner_step_arithmetic() {
        assert!((step_once(1.0, 2.0, 0.1) - 0.8).abs() < 1e-15);
        assert!((step_once(1.0, 2.0, -0.1) - 1.2).abs() < 1e-15);
        assert_eq!(step_once(1.0, 0.0, 0.1), 1.0);
    }

    #[test]
    fn inner_step_rejects_mismatched_sets() {
        let tape = Tape::new();
        let p = theta(&tape, 1.0);
        let mut g = ParamSet::new();
        g.insert("other", tape.constant(&Tensor::scalar(1.0)))
            .unwrap();
        assert!(inner_step(&p, &g, &InnerLr::Fixed(0.1), 1).is_err());
        let mut g = ParamSet::new();
        g.insert("theta", tape.constant(&Tensor::zeros(&[2])))
            .unwrap();
        assert!(inner_step(&p, &g, &InnerLr::Fixed(0.1), 1).is_err());
    }

    #[test]
    fn flat_support_loss_makes_orders_agree() {
        // dead hidden units on the support inputs: zero gradient and zero
        // curvature, so the unrolled Jacobian is the identity
        let w1 = Tensor::new(vec![2, 3], vec![0.5, 0.3, 0.8, 0.2, 0.4, 0.6]).unwrap();
        let w2 = Tensor::new(vec![2, 2], vec![0.7, -0.2, 0.1, 0.9]).unwrap();
        let support = Tensor::new(vec![2, 3], vec![-1.0, -0.5, -1.0, -2.0, -0.4, -1.0]).unwrap();
        let target = Tensor::new(vec![2, 3], vec![1.0, 0.5, 0.2, 0.3, 1.0, -0.4]).unwrap();
        let mut grads = Vec::new();
        for order in [Order::First, Order::Second] {
            let tape = Tape::new();
            let mut p = ParamSet::new();
            p.insert("l1", tape.leaf(&w1)).unwrap();
            p.insert("l2", tape.leaf(&w2)).unwrap();
            let (sx, tx) = (tape.constant(&support), tape.constant(&target));
            fn model<'t>(
                p: &ParamSet<Var<'t, f64>>,
                x: &Var<'t, f64>,
                y: &[usize],
            ) -> Result<Var<'t, f64>> {
                let h = x.matmul_t(p.get("l1").unwrap(), false, true)?.relu();
                crate::autodiff::cross_entropy(&h.matmul_t(p.get("l2").unwrap(), false, true)?, y)
            }
            let traj = adapt(
                &p,
                |q, _| model(q, &sx, &[0, 1]),
                &InnerLr::Fixed(0.4),
                2,
                order,
            )
            .unwrap();
            let support_g = tape
                .gradients_set(&traj.support_losses[0], &p, false)
                .unwrap();
            assert!(support_g.values().all(|g| g.value().sum_sq() == 0.0));
            let w = LossWeights::final_only(2, false);
            let loss =
                meta_loss_vanilla(&[
                    target_losses(&traj, &w, |q, _| model(q, &tx, &[1, 0])).unwrap()
                ])
                .unwrap();
            grads.push(tape.gradients_set(&loss, &p, false).unwrap().values_host());
        }
        assert!(grads[0].flatten().iter().any(|&g| g != 0.0));
        assert!(crate::autodiff::max_relative_error(&grads[0], &grads[1], 1e-12) < 1e-8);
    }

    #[test]
    fn toy_single_and_double_step() {
        let tape = Tape::new();
        let t0 = theta(&tape, 1.0);
        let traj = adapt(&t0, toy_loss, &InnerLr::Fixed(0.25), 2, Order::Second).unwrap();
        assert_eq!(traj.params[1].get("theta").unwrap().item(), 0.5);
        assert_eq!(traj.params[2].get("theta").unwrap().item(), 0.25);
        assert_eq!(traj.support_losses[0].item(), 1.0);
        assert_eq!(traj.support_losses[1].item(), 0.25);
    }

    #[test]
    fn toy_vanilla_and_multi_step_losses() {
        let tape = Tape::new();
        let t0 = theta(&tape, 1.0);
        let traj = adapt(&t0, toy_loss, &InnerLr::Fixed(0.25), 1, Order::Second).unwrap();
        let w = LossWeights::final_only(1, false);
        let losses = target_losses(&traj, &w, toy_loss).unwrap();
        assert_eq!(meta_loss_vanilla(&[losses]).unwrap().item(), 0.25);

        let traj = adapt(&t0, toy_loss, &InnerLr::Fixed(0.25), 2, Order::Second).unwrap();
        let w = LossWeights {
            first_step: 1,
            weights: vec![0.5, 0.5],
        };
        let losses = target_losses(&traj, &w, toy_loss).unwrap();
        assert_eq!(multi_step_meta_loss(&[losses], &w).unwrap().item(), 0.15625);
    }

    #[test]
    fn toy_meta_gradient_by_order() {
        for (order, want) in [(Order::Second, 0.5), (Order::First, 1.0)] {
            let tape = Tape::new();
            let t0 = theta(&tape, 1.0);
            let traj = adapt(&t0, toy_loss, &InnerLr::Fixed(0.25), 1, order).unwrap();
            let w = LossWeights::final_only(1, false);
            let loss = meta_loss_vanilla(&[target_losses(&traj, &w, toy_loss).unwrap()]).unwrap();
            let g = tape.gradients_set(&loss, &t0, false).unwrap();
            assert_eq!(g.get("theta").unwrap().item(), want, "{order:?}");
        }
    }

    #[test]
    fn first_order_adds_no_backward_nodes() {
        let tape = Tape::new();
        let t0 = theta(&tape, 1.0);
        adapt(&t0, toy_loss, &InnerLr::Fixed(0.25), 3, Order::First).unwrap();
        assert_eq!(tape.backward_nodes(), 0);
        adapt(&t0, toy_loss, &InnerLr::Fixed(0.25), 3, Order::Second).unwrap();
        assert!(tape.backward_nodes() > 0);
    }

    #[test]
    fn learned_rate_equal_to_fixed_gives_same_trajectory() {
        let tape = Tape::new();
        let t0 = theta(&tape, 0.7);
        let mut rates = ParamSet::new();
        for s in 1..=3 {
            rates
                .insert(lr_name("theta", s), tape.leaf(&Tensor::scalar(0.1)))
                .unwrap();
        }
        let a = adapt(&t0, toy_loss, &InnerLr::Fixed(0.1), 3, Order::Second).unwrap();
        let b = adapt(&t0, toy_loss, &InnerLr::PerLayer(&rates), 3, Order::Second).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(
                pa.get("theta").unwrap().item().to_bits(),
                pb.get("theta").unwrap().item().to_bits()
            );
        }
        // and the rates receive a gradient
        let g = tape.gradients_set(
            &b.last()
                .get("theta")
                .unwrap()
                .mul(b.last().get("theta").unwrap())
                .unwrap(),
            &rates,
            false,
        );
        assert!(g.unwrap().values().all(|v| v.item() != 0.0));
    }

    #[test]
    fn missing_rate_is_an_error() {
        let tape = Tape::new();
        let t0 = theta(&tape, 1.0);
        let rates = ParamSet::new();
        assert!(matches!(
            adapt(&t0, toy_loss, &InnerLr::PerLayer(&rates), 1, Order::First),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn malformed_weights_are_rejected() {
        let tape = Tape::new();
        let t0 = theta(&tape, 1.0);
        let traj = adapt(&t0, toy_loss, &InnerLr::Fixed(0.25), 2, Order::First).unwrap();
        let w = LossWeights {
            first_step: 1,
            weights: vec![0.5, 0.5],
        };
        let losses = target_losses(&traj, &w, toy_loss).unwrap();
        let bad = LossWeights {
            first_step: 1,
            weights: vec![0.5, 0.6],
        };
        assert!(multi_step_meta_loss(std::slice::from_ref(&losses), &bad).is_err());
        let short = LossWeights {
            first_step: 1,
            weights: vec![1.0],
        };
        assert!(target_losses(&traj, &short, toy_loss).is_err());
        assert!(multi_step_meta_loss(&[losses], &short).is_err());
    }
}
