use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{accuracy, cross_entropy, Element, ParamSet, Tape, Tensor, Var};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::network::{is_bn_param, BatchNormState, Mode, Network, StatsLog};

use super::adam::{adam_step, AdamState};
use super::inner::{adapt, is_lr_param, lr_name, multi_step_meta_loss, target_losses, InnerLr};
use super::schedule::{anneal_loss_weights, cosine_lr, derivative_order, LossWeights, Order};
use super::MetaConfig;

/// Length of a training run, needed by the schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunPlan {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
}

impl RunPlan {
    pub fn total_iterations(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }
}

/// Everything the outer loop learns or accumulates.
///
/// `params` holds the initialization θ₀, the batch-norm scale/bias entries
/// (`bn*`) and, with LSLR, the inner rates (`lr/*`); Adam covers all of it.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState<T> {
    pub params: ParamSet<Tensor<T>>,
    pub bn_stats: BatchNormState<T>,
    pub adam: AdamState<T>,
}

impl<T: Element> MetaState<T> {
    /// Entries adapted in the inner loop.
    pub fn theta(&self) -> ParamSet<Tensor<T>> {
        self.params.filter(is_inner_param)
    }

    pub fn bn_params(&self) -> ParamSet<Tensor<T>> {
        self.params.filter(is_bn_param)
    }

    pub fn inner_lrs(&self) -> ParamSet<Tensor<T>> {
        self.params.filter(is_lr_param)
    }
}

fn is_inner_param(name: &str) -> bool {
    !is_bn_param(name) && !is_lr_param(name)
}

/// Result of one task's forward/backward pass.
#[derive(Debug, Clone)]
pub struct TaskOutcome<T> {
    /// Gradient of this task's weighted target loss w.r.t. every trainable.
    pub grads: Option<ParamSet<Tensor<T>>>,
    pub loss: f64,
    pub support_losses: Vec<f64>,
    /// Indexed by step; `None` where the weight was zero.
    pub target_losses: Vec<Option<f64>>,
    /// Target accuracy after the last inner step.
    pub accuracy: f64,
    pub stats: StatsLog<T>,
    pub backward_nodes: usize,
}

/// Per outer-iteration record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub epoch: usize,
    pub iteration: usize,
    pub order: Order,
    pub lr: f64,
    pub loss_weights: LossWeights,
    /// The optimized objective, summed over the task batch.
    pub loss: f64,
    /// Mean over tasks, one per inner step.
    pub support_losses: Vec<f64>,
    /// Mean over tasks, indexed by step.
    pub target_losses: Vec<Option<f64>>,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    /// Nodes recorded while differentiating inside the inner loop.
    pub backward_nodes: usize,
}

pub struct MetaLearner {
    network: Network,
    config: MetaConfig,
    plan: RunPlan,
}

impl MetaLearner {
    pub fn new(network: Network, config: MetaConfig, plan: RunPlan) -> Result<Self> {
        config.validate()?;
        let spec = network.spec();
        let (stats, params) = config.bn_modes();
        if spec.bn_stats != stats || spec.bn_params != params {
            return Err(Error::Config(format!(
                "network batch-norm modes ({:?}, {:?}) disagree with the toggles ({stats:?}, {params:?})",
                spec.bn_stats, spec.bn_params
            )));
        }
        let need = config.inner_steps.max(config.eval_steps());
        if spec.max_steps < need {
            return Err(Error::Structure(format!(
                "{need} inner steps need {} batch-norm slots, network has {}",
                need + 1,
                spec.max_steps + 1
            )));
        }
        Ok(Self {
            network,
            config,
            plan,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn config(&self) -> &MetaConfig {
        &self.config
    }

    pub fn plan(&self) -> RunPlan {
        self.plan
    }

    pub fn init_state<T: Element, R: Rng>(&self, rng: &mut R) -> MetaState<T> {
        let mut params = self.network.init_params(rng);
        if self.config.toggles.lslr {
            for group in self.network.layer_groups() {
                for step in 1..=self.config.inner_steps {
                    params
                        .insert(
                            lr_name(&group, step),
                            Tensor::scalar(T::from_f64(self.config.inner_lr)),
                        )
                        .expect("rate names are unique");
                }
            }
        }
        let adam = AdamState::new(&params);
        MetaState {
            params,
            bn_stats: self.network.init_bn_state(),
            adam,
        }
    }

    pub fn order(&self, epoch: usize) -> Order {
        if self.config.toggles.da {
            derivative_order(epoch, self.config.da_switch_epoch)
        } else {
            Order::Second
        }
    }

    pub fn outer_lr(&self, iteration: usize) -> f64 {
        if self.config.toggles.ca {
            cosine_lr(
                iteration,
                self.plan.total_iterations(),
                self.config.lr_max,
                self.config.lr_min,
            )
        } else {
            self.config.lr_max
        }
    }

    pub fn loss_weights(&self, epoch: usize, iteration: usize) -> LossWeights {
        let c = &self.config;
        if !c.toggles.msl {
            return LossWeights::final_only(c.inner_steps, c.include_pre_update_loss);
        }
        let progress = if c.msl_per_iteration {
            iteration as f64 / self.plan.iterations_per_epoch.max(1) as f64
        } else {
            epoch as f64
        };
        anneal_loss_weights(
            progress,
            c.inner_steps,
            c.include_pre_update_loss,
            c.msl_horizon,
            c.msl_floor,
        )
    }

    /// Forward/backward of a single task. Gradients are computed only if
    /// `want_grads`.
    pub fn run_task<T: Element>(
        &self,
        state: &MetaState<T>,
        task: &Episode,
        order: Order,
        weights: &LossWeights,
        want_grads: bool,
    ) -> Result<TaskOutcome<T>> {
        let steps = self.config.inner_steps;
        let tape = Tape::new();
        let all = tape.leaves(&state.params);
        let theta = all.filter(is_inner_param);
        let bn = all.filter(is_bn_param);
        let rates = all.filter(is_lr_param);
        let lr = if self.config.toggles.lslr {
            InnerLr::PerLayer(&rates)
        } else {
            InnerLr::Fixed(self.config.inner_lr)
        };
        let sx = tape.constant(&self.inputs(&task.support_x)?);
        let tx = tape.constant(&self.inputs(&task.target_x)?);
        let mut log = StatsLog::new();
        let net = &self.network;

        let traj = adapt(
            &theta,
            |p, slot| {
                let logits = net.forward(
                    &with_bn(p, &bn)?,
                    &state.bn_stats,
                    &sx,
                    slot,
                    Mode::Train,
                    Some(&mut log),
                )?;
                cross_entropy(&logits, &task.support_y)
            },
            &lr,
            steps,
            order,
        )?;
        let mut final_acc = f64::NAN;
        let losses = target_losses(&traj, weights, |p, slot| {
            let logits = net.forward(
                &with_bn(p, &bn)?,
                &state.bn_stats,
                &tx,
                slot,
                Mode::Train,
                Some(&mut log),
            )?;
            if slot == steps {
                final_acc = accuracy(&logits.value(), &task.target_y);
            }
            cross_entropy(&logits, &task.target_y)
        })?;
        let objective = multi_step_meta_loss(std::slice::from_ref(&losses), weights)?;
        let backward_nodes = tape.backward_nodes();
        let grads = if want_grads {
            Some(tape.gradients_set(&objective, &all, false)?.values_host())
        } else {
            None
        };
        tape.check()?;
        Ok(TaskOutcome {
            grads,
            loss: objective.item(),
            support_losses: traj.support_losses.iter().map(|l| l.item()).collect(),
            target_losses: losses.iter().map(|l| l.map(|v| v.item())).collect(),
            accuracy: final_acc,
            stats: log,
            backward_nodes,
        })
    }

    /// Runs every task (in parallel) and returns the outcomes in task order.
    pub fn run_tasks<T: Element>(
        &self,
        state: &MetaState<T>,
        tasks: &[Episode],
        order: Order,
        weights: &LossWeights,
        want_grads: bool,
    ) -> Result<Vec<TaskOutcome<T>>> {
        if tasks.is_empty() {
            return Err(Error::Structure("empty task batch".into()));
        }
        tasks
            .par_iter()
            .map(|t| self.run_task(state, t, order, weights, want_grads))
            .collect()
    }

    /// Summed meta-objective over `tasks`, without gradients or state changes.
    pub fn meta_objective<T: Element>(
        &self,
        state: &MetaState<T>,
        tasks: &[Episode],
        order: Order,
        weights: &LossWeights,
    ) -> Result<f64> {
        Ok(self
            .run_tasks(state, tasks, order, weights, false)?
            .iter()
            .map(|o| o.loss)
            .sum())
    }

    /// Summed meta-objective and its gradient w.r.t. every trainable.
    pub fn meta_gradient<T: Element>(
        &self,
        state: &MetaState<T>,
        tasks: &[Episode],
        order: Order,
        weights: &LossWeights,
    ) -> Result<(f64, ParamSet<Tensor<T>>)> {
        let outcomes = self.run_tasks(state, tasks, order, weights, true)?;
        let (loss, grads) = sum_outcomes(&outcomes)?;
        Ok((loss, grads))
    }

    /// One meta-optimizer step on a batch of tasks. On a non-finite loss
    /// or gradient the state is left untouched and [`Error::Diverged`]
    /// carries the per-step target losses.
    pub fn outer_update<T: Element>(
        &self,
        state: &mut MetaState<T>,
        tasks: &[Episode],
        epoch: usize,
        iteration: usize,
    ) -> Result<IterationMetrics> {
        let start = Instant::now();
        let order = self.order(epoch);
        let lr = self.outer_lr(iteration);
        let weights = self.loss_weights(epoch, iteration);
        let outcomes = self.run_tasks(state, tasks, order, &weights, true)?;
        let (loss, mut grads) = sum_outcomes(&outcomes)?;

        let b = outcomes.len() as f64;
        let steps = self.config.inner_steps;
        let target_losses: Vec<Option<f64>> = (0..=steps)
            .map(|i| {
                let vals: Option<Vec<f64>> = outcomes.iter().map(|o| o.target_losses[i]).collect();
                vals.map(|v| v.iter().sum::<f64>() / b)
            })
            .collect();
        let grad_norm = grads.l2_norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            let mut per_step: Vec<f64> = target_losses
                .iter()
                .map(|l| l.unwrap_or(f64::NAN))
                .collect();
            per_step.push(loss);
            return Err(Error::Diverged { per_step });
        }
        if let Some(max) = self.config.clip_norm {
            if grad_norm > max {
                grads = grads.map(|_, g| g.map(|v| v * T::from_f64(max / grad_norm)));
            }
        }
        adam_step(
            &mut state.params,
            &grads,
            &mut state.adam,
            lr,
            &self.config.adam,
        )?;
        for o in &outcomes {
            state.bn_stats.apply(&o.stats);
        }
        let support_losses = (0..steps)
            .map(|i| outcomes.iter().map(|o| o.support_losses[i]).sum::<f64>() / b)
            .collect();
        Ok(IterationMetrics {
            epoch,
            iteration,
            order,
            lr,
            loss_weights: weights,
            loss,
            support_losses,
            target_losses,
            accuracy: outcomes.iter().map(|o| o.accuracy).sum::<f64>() / b,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            backward_nodes: outcomes.iter().map(|o| o.backward_nodes).sum(),
        })
    }

    /// Casts episode inputs and flattens images for vector backbones.
    fn inputs<T: Element>(&self, x: &Tensor<f32>) -> Result<Tensor<T>> {
        let want = &self.network.spec().input_shape;
        let x = x.cast::<T>();
        if x.shape().len() == want.len() + 1 {
            return Ok(x);
        }
        let mut shape = vec![x.shape()[0]];
        shape.extend_from_slice(want);
        x.reshaped(&shape)
    }

    /// Adapts a copy of the initialization to `task`'s support set with
    /// `steps` first-order updates and returns softmax probabilities for
    /// its targets, `[targets, n_way]`. Targets use running statistics of
    /// slot `steps` where available.
    pub fn predict<T: Element>(
        &self,
        state: &MetaState<T>,
        task: &Episode,
        steps: usize,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let theta = tape.leaves(&state.theta());
        let bn = tape.constants(&state.bn_params());
        let rates = tape.constants(&state.inner_lrs());
        let lr = if self.config.toggles.lslr {
            InnerLr::PerLayer(&rates)
        } else {
            InnerLr::Fixed(self.config.inner_lr)
        };
        if self.config.toggles.lslr && steps > self.config.inner_steps {
            return Err(Error::Structure(format!(
                "{steps} evaluation steps but learned rates exist for {}",
                self.config.inner_steps
            )));
        }
        let sx = tape.constant(&self.inputs(&task.support_x)?);
        let tx = tape.constant(&self.inputs(&task.target_x)?);
        let net = &self.network;
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
            &lr,
            steps,
            Order::First,
        )?;
        let logits = net.forward(
            &with_bn(traj.last(), &bn)?,
            &state.bn_stats,
            &tx,
            steps,
            Mode::Eval,
            None,
        )?;
        tape.check()?;
        Ok(logits.softmax()?.value())
    }
}

fn with_bn<'t, T: Element>(
    theta: &ParamSet<Var<'t, T>>,
    bn: &ParamSet<Var<'t, T>>,
) -> Result<ParamSet<Var<'t, T>>> {
    let mut merged = theta.clone();
    merged.extend(bn.clone())?;
    Ok(merged)
}

/// Sums losses and gradients in task order.
fn sum_outcomes<T: Element>(outcomes: &[TaskOutcome<T>]) -> Result<(f64, ParamSet<Tensor<T>>)> {
    let mut loss = 0.0;
    let mut total: Option<ParamSet<Tensor<T>>> = None;
    for o in outcomes {
        loss += o.loss;
        let g = o
            .grads
            .as_ref()
            .ok_or_else(|| Error::Structure("task outcome without gradients".into()))?;
        match total.as_mut() {
            None => total = Some(g.clone()),
            Some(t) => t.add_scaled(g, T::one())?,
        }
    }
    total
        .map(|t| (loss, t))
        .ok_or_else(|| Error::Structure("empty task batch".into()))
}

#[cfg(test)]
mod tests;
