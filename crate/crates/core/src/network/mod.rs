//! The base learner: a strided convolutional classifier (or a small MLP)
//! whose batch-norm layers can keep statistics and scale/bias per inner
//! step.

mod batchnorm;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use batchnorm::{
    update_running_stats, BatchNormState, BnParamsMode, BnStatsMode, Mode, SlotStats, StatUpdate,
    StatsLog,
};

use crate::autodiff::{Element, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use batchnorm::{batch_norm_apply, batch_norm_train};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Backbone {
    /// Conv -> BN -> ReLU blocks, then flatten and a linear head.
    Conv {
        layers: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Linear -> BN -> ReLU blocks, then a linear head.
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-example shape: `[C, H, W]` for conv, `[features]` for MLP.
    pub input_shape: Vec<usize>,
    pub backbone: Backbone,
    pub n_way: usize,
    pub bn_stats: BnStatsMode,
    pub bn_params: BnParamsMode,
    /// Inner steps the batch-norm slots are allocated for.
    pub max_steps: usize,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_momentum() -> f64 {
    0.1
}

impl NetworkSpec {
    /// Four 64-filter 3x3 stride-2 conv blocks on 28x28 grayscale.
    pub fn conv4(n_way: usize, filters: usize, image_size: usize, max_steps: usize) -> Self {
        Self {
            input_shape: vec![1, image_size, image_size],
            backbone: Backbone::Conv {
                layers: 4,
                filters,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            n_way,
            bn_stats: BnStatsMode::PerStepRunning,
            bn_params: BnParamsMode::PerStep,
            max_steps,
            bn_eps: default_eps(),
            bn_momentum: default_momentum(),
        }
    }

    pub fn mlp(inputs: usize, hidden: Vec<usize>, n_way: usize, max_steps: usize) -> Self {
        Self {
            input_shape: vec![inputs],
            backbone: Backbone::Mlp { hidden },
            n_way,
            bn_stats: BnStatsMode::PerStepRunning,
            bn_params: BnParamsMode::PerStep,
            max_steps,
            bn_eps: default_eps(),
            bn_momentum: default_momentum(),
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Conv {
        name: String,
        weight_shape: [usize; 4],
        stride: usize,
        pad: usize,
    },
    Dense {
        name: String,
        weight_shape: [usize; 2],
    },
}

/// A validated [`NetworkSpec`] with resolved layer shapes.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    blocks: Vec<Block>,
    /// Channels of each BN layer (one per block).
    bn_channels: Vec<usize>,
    head_in: usize,
    feature_shape: Vec<usize>,
}

pub const HEAD: &str = "linear";

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        if spec.n_way == 0 {
            return Err(Error::Structure("n_way must be at least 1".into()));
        }
        if spec.bn_momentum <= 0.0 || spec.bn_momentum > 1.0 {
            return Err(Error::Structure(format!(
                "bn momentum {} outside (0, 1]",
                spec.bn_momentum
            )));
        }
        let per_step =
            spec.bn_stats == BnStatsMode::PerStepRunning || spec.bn_params != BnParamsMode::Shared;
        if per_step && spec.max_steps == 0 {
            return Err(Error::Structure(
                "per-step batch norm needs max_steps >= 1".into(),
            ));
        }
        let mut blocks = Vec::new();
        let mut bn_channels = Vec::new();
        let feature_shape;
        match &spec.backbone {
            Backbone::Conv {
                layers,
                filters,
                kernel,
                stride,
                padding,
            } => {
                if *layers == 0 || *filters == 0 || *kernel == 0 || *stride == 0 {
                    return Err(Error::Structure(format!(
                        "degenerate conv backbone {:?}",
                        spec.backbone
                    )));
                }
                let [c, h, w]: [usize; 3] =
                    spec.input_shape.as_slice().try_into().map_err(|_| {
                        Error::Structure(format!(
                            "conv backbone needs [C, H, W] input, got {:?}",
                            spec.input_shape
                        ))
                    })?;
                let geom = crate::autodiff::ConvGeom {
                    stride: *stride,
                    pad: *padding,
                };
                let (mut ch, mut hh, mut ww) = (c, h, w);
                for l in 0..*layers {
                    let (nh, nw) =
                        match (geom.out_extent(hh, *kernel), geom.out_extent(ww, *kernel)) {
                            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
                            _ => {
                                return Err(Error::Structure(format!(
                                    "conv{} collapses a {hh}x{ww} feature map below 1x1",
                                    l + 1
                                )))
                            }
                        };
                    blocks.push(Block::Conv {
                        name: format!("conv{}", l + 1),
                        weight_shape: [*filters, ch, *kernel, *kernel],
                        stride: *stride,
                        pad: *padding,
                    });
                    bn_channels.push(*filters);
                    (ch, hh, ww) = (*filters, nh, nw);
                }
                feature_shape = vec![ch, hh, ww];
            }
            Backbone::Mlp { hidden } => {
                let [mut width]: [usize; 1] =
                    spec.input_shape.as_slice().try_into().map_err(|_| {
                        Error::Structure(format!(
                            "mlp backbone needs [features] input, got {:?}",
                            spec.input_shape
                        ))
                    })?;
                for (l, &h) in hidden.iter().enumerate() {
                    if h == 0 {
                        return Err(Error::Structure("zero-width hidden layer".into()));
                    }
                    blocks.push(Block::Dense {
                        name: format!("fc{}", l + 1),
                        weight_shape: [h, width],
                    });
                    bn_channels.push(h);
                    width = h;
                }
                feature_shape = vec![width];
            }
        }
        let head_in = feature_shape.iter().product();
        Ok(Self {
            spec,
            blocks,
            bn_channels,
            head_in,
            feature_shape,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Shape of the features entering the linear head.
    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn bn_layers(&self) -> usize {
        self.bn_channels.len()
    }

    /// Number of batch-norm step slots (`N + 1` in per-step modes).
    pub fn step_slots(&self) -> usize {
        self.spec.max_steps + 1
    }

    /// Names of the layers adapted in the inner loop, in order.
    pub fn layer_groups(&self) -> Vec<String> {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Conv { name, .. } | Block::Dense { name, .. } => name.clone(),
            })
            .chain(std::iter::once(HEAD.to_string()))
            .collect()
    }

    fn bn_name(&self, layer: usize, step: usize, what: &str) -> String {
        let per_step = match self.spec.bn_params {
            BnParamsMode::Shared => false,
            BnParamsMode::PerStep => true,
            BnParamsMode::PerStepBiasOnly => what == "beta",
        };
        if per_step {
            format!("bn{}/step{step}/{what}", layer + 1)
        } else {
            format!("bn{}/{what}", layer + 1)
        }
    }

    /// Fresh parameters: fan-in scaled uniform weights, zero biases,
    /// unit BN scale and zero BN bias.
    pub fn init_params<T: Element, R: Rng>(&self, rng: &mut R) -> ParamSet<Tensor<T>> {
        let mut p = ParamSet::new();
        let uniform = |shape: &[usize], fan_in: usize, gain: f64, rng: &mut R| {
            let bound = (gain / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
        };
        for b in &self.blocks {
            let (name, shape): (&str, Vec<usize>) = match b {
                Block::Conv {
                    name, weight_shape, ..
                } => (name, weight_shape.to_vec()),
                Block::Dense { name, weight_shape } => (name, weight_shape.to_vec()),
            };
            let fan_in = shape[1..].iter().product();
            p.insert(format!("{name}/weight"), uniform(&shape, fan_in, 6.0, rng))
                .expect("unique");
        }
        let head_w = uniform(&[self.spec.n_way, self.head_in], self.head_in, 1.0, rng);
        p.insert(format!("{HEAD}/weight"), head_w).expect("unique");
        p.insert(format!("{HEAD}/bias"), Tensor::zeros(&[self.spec.n_way]))
            .expect("unique");

        let steps: Vec<usize> = match self.spec.bn_params {
            BnParamsMode::Shared => vec![0],
            _ => (0..self.step_slots()).collect(),
        };
        for (l, &c) in self.bn_channels.iter().enumerate() {
            for &s in &steps {
                for (what, v) in [("gamma", T::one()), ("beta", T::zero())] {
                    let name = self.bn_name(l, s, what);
                    if !p.contains(&name) {
                        p.insert(name, Tensor::full(&[c], v)).expect("unique");
                    }
                }
            }
        }
        p
    }

    pub fn init_bn_state<T: Element>(&self) -> BatchNormState<T> {
        BatchNormState::new(
            self.spec.bn_stats,
            &self.bn_channels,
            self.spec.max_steps,
            self.spec.bn_eps,
            self.spec.bn_momentum,
        )
    }

    /// Logits `[batch, n_way]`.
    ///
    /// `params` must hold the adapted weights and the batch-norm scale/bias
    /// entries. Train mode normalizes by batch statistics and, in running
    /// modes, pushes the observed statistics for slot `step` onto `log`.
    /// Eval mode normalizes by the running statistics of slot `step`, or by
    /// the batch when that slot has not been updated yet. In batch-stats
    /// mode the current batch is always used.
    pub fn forward<'t, T: Element>(
        &self,
        params: &ParamSet<Var<'t, T>>,
        bn: &BatchNormState<T>,
        inputs: &Var<'t, T>,
        step: usize,
        mode: Mode,
        mut log: Option<&mut StatsLog<T>>,
    ) -> Result<Var<'t, T>> {
        if step > self.spec.max_steps {
            return Err(Error::Structure(format!(
                "step index {step} exceeds the {} allocated batch-norm slots",
                self.spec.max_steps + 1
            )));
        }
        let xs = inputs.shape();
        if xs.len() != self.spec.input_shape.len() + 1 || xs[1..] != self.spec.input_shape[..] {
            return Err(Error::shape("forward", &[&xs, &self.spec.input_shape]));
        }
        let batch = xs[0];
        let batch_stats = mode == Mode::Train || self.spec.bn_stats == BnStatsMode::BatchStats;
        let mut h = *inputs;
        for (l, block) in self.blocks.iter().enumerate() {
            h = match block {
                Block::Conv {
                    name, stride, pad, ..
                } => h.conv2d(params.expect(&format!("{name}/weight"))?, *stride, *pad)?,
                Block::Dense { name, .. } => {
                    h.matmul_t(params.expect(&format!("{name}/weight"))?, false, true)?
                }
            };
            let gamma = params.expect(&self.bn_name(l, step, "gamma"))?;
            let beta = params.expect(&self.bn_name(l, step, "beta"))?;
            h = if batch_stats || bn.slot(l, step).count == 0 {
                let (y, mean, var) = batch_norm_train(&h, gamma, beta, self.spec.bn_eps)?;
                if mode == Mode::Train && bn.mode != BnStatsMode::BatchStats {
                    if let Some(log) = log.as_deref_mut() {
                        log.push(StatUpdate {
                            layer: l,
                            slot: bn.slot_index(step),
                            mean,
                            var,
                        });
                    }
                }
                y
            } else {
                batch_norm_apply(&h, bn.slot(l, step), gamma, beta, self.spec.bn_eps)?
            };
            h = h.relu();
        }
        let flat = h.reshape(&[batch, self.head_in])?;
        flat.matmul_t(params.expect(&format!("{HEAD}/weight"))?, false, true)?
            .add_bias(params.expect(&format!("{HEAD}/bias"))?)
    }

    /// Train-mode forward that folds the observed statistics straight
    /// into `bn`.
    pub fn forward_train<'t, T: Element>(
        &self,
        params: &ParamSet<Var<'t, T>>,
        bn: &mut BatchNormState<T>,
        inputs: &Var<'t, T>,
        step: usize,
    ) -> Result<Var<'t, T>> {
        let mut log = Vec::new();
        let out = self.forward(params, bn, inputs, step, Mode::Train, Some(&mut log))?;
        bn.apply(&log);
        Ok(out)
    }
}

pub fn is_bn_param(name: &str) -> bool {
    name.starts_with("bn")
}

/// Layer group an inner-loop parameter belongs to (`conv2/weight` -> `conv2`).
pub fn layer_group(name: &str) -> &str {
    name.split('/').next().unwrap_or(name)
}

/// Validates `spec` and draws initial parameters and batch-norm state.
pub fn build_network<T: Element, R: Rng>(
    spec: NetworkSpec,
    rng: &mut R,
) -> Result<(Network, ParamSet<Tensor<T>>, BatchNormState<T>)> {
    let net = Network::new(spec)?;
    let params = net.init_params(rng);
    let bn = net.init_bn_state();
    Ok((net, params, bn))
}
