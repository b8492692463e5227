//! Bilevel optimization: inner-loop adaptation, the (multi-step)
//! meta-objective, the optimizer and its schedules, and the outer update.

mod adam;
mod inner;
mod learner;
mod schedule;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use inner::{
    adapt, inner_step, is_lr_param, lr_name, meta_loss_vanilla, multi_step_meta_loss,
    target_losses, InnerLr, StepLosses, Trajectory,
};
pub use learner::{IterationMetrics, MetaLearner, MetaState, RunPlan, TaskOutcome};
pub use schedule::{anneal_loss_weights, cosine_lr, derivative_order, LossWeights, Order};

use crate::error::{Error, Result};
use crate::network::{BnParamsMode, BnStatsMode, NetworkSpec};

/// Independent switches for the training-stability fixes. All off is
/// plain MAML.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    /// Weighted per-step target losses.
    pub msl: bool,
    /// Learned per-layer, per-step inner learning rates.
    pub lslr: bool,
    /// Per-step batch-norm running statistics.
    pub bnrs: bool,
    /// Per-step batch-norm scale and bias.
    pub bnwb: bool,
    /// First-order gradients before the switch epoch.
    pub da: bool,
    /// Cosine-annealed outer learning rate.
    pub ca: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        msl: true,
        lslr: true,
        bnrs: true,
        bnwb: true,
        da: true,
        ca: true,
    };
    pub const NONE: Toggles = Toggles {
        msl: false,
        lslr: false,
        bnrs: false,
        bnwb: false,
        da: false,
        ca: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner steps N during training.
    pub inner_steps: usize,
    /// Inner steps at evaluation; defaults to `inner_steps`.
    pub eval_steps: Option<usize>,
    /// Tasks per outer update.
    pub task_batch: usize,
    /// Fixed inner rate, and the initial value of every learned rate.
    pub inner_lr: f64,
    pub toggles: Toggles,
    /// With BNWB on, keep the scale shared and only the bias per step.
    pub bn_biases_only: bool,
    pub da_switch_epoch: usize,
    /// Epochs over which loss weights go from uniform to final-only.
    pub msl_horizon: f64,
    pub msl_floor: f64,
    /// Anneal by fractional epoch (iteration count) instead of whole epochs.
    pub msl_per_iteration: bool,
    /// Give the unadapted model's target loss a weight too.
    pub include_pre_update_loss: bool,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    /// Rescale the meta-gradient to at most this L2 norm. Off by default.
    pub clip_norm: Option<f64>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_steps: 5,
            eval_steps: None,
            task_batch: 16,
            inner_lr: 0.1,
            toggles: Toggles::ALL,
            bn_biases_only: false,
            da_switch_epoch: 50,
            msl_horizon: 100.0,
            msl_floor: 0.001,
            msl_per_iteration: false,
            include_pre_update_loss: false,
            lr_max: 0.001,
            lr_min: 1e-5,
            adam: AdamConfig::default(),
            clip_norm: None,
        }
    }
}

impl MetaConfig {
    pub fn vanilla() -> Self {
        Self {
            toggles: Toggles::NONE,
            ..Self::default()
        }
    }

    pub fn eval_steps(&self) -> usize {
        self.eval_steps.unwrap_or(self.inner_steps)
    }

    /// Batch-norm modes implied by the BNRS/BNWB toggles.
    pub fn bn_modes(&self) -> (BnStatsMode, BnParamsMode) {
        let stats = if self.toggles.bnrs {
            BnStatsMode::PerStepRunning
        } else {
            BnStatsMode::SharedRunning
        };
        let params = match (self.toggles.bnwb, self.bn_biases_only) {
            (false, _) => BnParamsMode::Shared,
            (true, false) => BnParamsMode::PerStep,
            (true, true) => BnParamsMode::PerStepBiasOnly,
        };
        (stats, params)
    }

    /// Sets the batch-norm modes and slot count of `spec` to match.
    pub fn configure_network(&self, spec: &mut NetworkSpec) {
        let (stats, params) = self.bn_modes();
        spec.bn_stats = stats;
        spec.bn_params = params;
        spec.max_steps = self.inner_steps.max(self.eval_steps());
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.inner_steps == 0 {
            return bad("meta.inner_steps must be at least 1".into());
        }
        if self.eval_steps == Some(0) {
            return bad("meta.eval_steps must be at least 1".into());
        }
        if self.task_batch == 0 {
            return bad("meta.task_batch must be at least 1".into());
        }
        if !self.inner_lr.is_finite() {
            return bad("meta.inner_lr must be finite".into());
        }
        let terms = self.inner_steps + usize::from(self.include_pre_update_loss);
        if !(0.0..1.0).contains(&(self.msl_floor * (terms - 1) as f64)) {
            return bad(format!(
                "meta.msl_floor {} leaves no weight for the final step",
                self.msl_floor
            ));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad(format!(
                "need 0 <= lr_min <= lr_max, lr_max > 0 (got {} / {})",
                self.lr_min, self.lr_max
            ));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("meta.adam needs betas in [0, 1) and eps > 0".into());
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("meta.clip_norm must be positive".into());
        }
        Ok(())
    }
}
