use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tensor, Var};
use crate::error::{Error, Result};

/// Where normalization statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnStatsMode {
    /// Always normalize by the current batch; nothing is accumulated.
    BatchStats,
    /// One running-statistics set shared by every inner step.
    SharedRunning,
    /// A running-statistics set per inner step (slots `0..=N`).
    PerStepRunning,
}

/// Whether the learnable scale/bias are shared or indexed by step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnParamsMode {
    Shared,
    /// Scale and bias per step slot.
    PerStep,
    /// Bias per step slot, scale shared.
    PerStepBiasOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: u64,
}

impl<T: Element> SlotStats<T> {
    fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            count: 0,
        }
    }
}

/// Exponential moving average of one slot's statistics:
/// `new = (1 - momentum) * old + momentum * batch`.
pub fn update_running_stats<T: Element>(
    slot: &mut SlotStats<T>,
    batch_mean: &[T],
    batch_var: &[T],
    momentum: f64,
) {
    debug_assert!(momentum > 0.0 && momentum <= 1.0);
    let m = T::from_f64(momentum);
    let keep = T::from_f64(1.0 - momentum);
    for (r, &b) in slot.mean.iter_mut().zip(batch_mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in slot.var.iter_mut().zip(batch_var) {
        *r = keep * *r + m * b;
    }
    slot.count += 1;
}

/// Batch statistics observed by a train-mode forward, waiting to be
/// folded into the running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate<T> {
    pub layer: usize,
    pub slot: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub type StatsLog<T> = Vec<StatUpdate<T>>;

/// Running statistics of every batch-norm layer, per step slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub mode: BnStatsMode,
    pub eps: f64,
    pub momentum: f64,
    /// `layers[l][slot]`
    pub layers: Vec<Vec<SlotStats<T>>>,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(
        mode: BnStatsMode,
        channels: &[usize],
        max_steps: usize,
        eps: f64,
        momentum: f64,
    ) -> Self {
        let slots = match mode {
            BnStatsMode::PerStepRunning => max_steps + 1,
            _ => 1,
        };
        Self {
            mode,
            eps,
            momentum,
            layers: channels
                .iter()
                .map(|&c| (0..slots).map(|_| SlotStats::fresh(c)).collect())
                .collect(),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// Storage slot backing `step`; shared modes alias every step to slot 0.
    pub fn slot_index(&self, step: usize) -> usize {
        match self.mode {
            BnStatsMode::PerStepRunning => step,
            _ => 0,
        }
    }

    pub fn slot(&self, layer: usize, step: usize) -> &SlotStats<T> {
        &self.layers[layer][self.slot_index(step)]
    }

    pub fn apply(&mut self, log: &[StatUpdate<T>]) {
        for u in log {
            let momentum = self.momentum;
            update_running_stats(&mut self.layers[u.layer][u.slot], &u.mean, &u.var, momentum);
        }
    }
}

/// Normalizes `x` (`[N, C, ...]`) per channel with the current batch
/// statistics (biased variance). Returns the output plus the batch mean
/// and variance values.
pub(crate) fn batch_norm_train<'t, T: Element>(
    x: &Var<'t, T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
    eps: f64,
) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
    let shape = x.shape();
    if shape[0] < 2 {
        return Err(Error::Numeric(format!(
            "batch statistics need at least 2 samples, got batch of {}",
            shape[0]
        )));
    }
    let per_channel = (x.numel() / shape[1]) as f64;
    let mean = x.sum_channels()?.scale(1.0 / per_channel);
    let centered = x.sub(&mean.expand_channels(&shape)?)?;
    let var = centered
        .mul(&centered)?
        .sum_channels()?
        .scale(1.0 / per_channel);
    let inv_std = var.add_scalar(eps).rsqrt();
    let normalized = centered.mul(&inv_std.mul(gamma)?.expand_channels(&shape)?)?;
    let y = normalized.add(&beta.expand_channels(&shape)?)?;
    Ok((y, mean.value().data().to_vec(), var.value().data().to_vec()))
}

/// Normalizes with fixed (running) statistics.
pub(crate) fn batch_norm_apply<'t, T: Element>(
    x: &Var<'t, T>,
    stats: &SlotStats<T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let c = shape[1];
    let tape = x.tape();
    let eps = T::from_f64(eps);
    let inv = Tensor::new(
        vec![c],
        stats
            .var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect(),
    )?;
    let mean = Tensor::new(vec![c], stats.mean.clone())?;
    let scale = gamma.mul(&tape.constant(&inv))?;
    let shift = beta.sub(&tape.constant(&mean).mul(&scale)?)?;
    x.mul(&scale.expand_channels(&shape)?)?
        .add(&shift.expand_channels(&shape)?)
}
