use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether inner-loop gradients are differentiated through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    /// Inner gradients treated as constants.
    First,
    Second,
}

impl Order {
    pub fn as_str(self) -> &'static str {
        match self {
            Order::First => "first",
            Order::Second => "second",
        }
    }
}

impl std::str::FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Order::First),
            "second" => Ok(Order::Second),
            other => Err(Error::Structure(format!(
                "unknown derivative order {other:?}"
            ))),
        }
    }
}

/// First-order before `switch_epoch`, second-order from then on.
pub fn derivative_order(epoch: usize, switch_epoch: usize) -> Order {
    if epoch < switch_epoch {
        Order::First
    } else {
        Order::Second
    }
}

/// Single-cycle cosine decay from `lr_max` at iteration 0 to `lr_min`
/// at `total`.
pub fn cosine_lr(iteration: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || iteration >= total {
        return lr_min;
    }
    if iteration == 0 {
        return lr_max;
    }
    let phase = std::f64::consts::PI * iteration as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

/// Importance weights of the per-step target losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Step the first weight applies to (0 when the pre-update loss counts).
    pub first_step: usize,
    pub weights: Vec<f64>,
}

impl LossWeights {
    /// All weight on the final step.
    pub fn final_only(steps: usize, include_pre_update: bool) -> Self {
        let first_step = usize::from(!include_pre_update);
        let len = steps + 1 - first_step;
        let mut weights = vec![0.0; len];
        weights[len - 1] = 1.0;
        Self {
            first_step,
            weights,
        }
    }

    pub fn last_step(&self) -> usize {
        self.first_step + self.weights.len() - 1
    }

    /// `(step, weight)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .map(move |(j, &w)| (self.first_step + j, w))
    }

    pub fn weight(&self, step: usize) -> f64 {
        step.checked_sub(self.first_step)
            .and_then(|j| self.weights.get(j))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Linear interpolation from uniform weights at `progress = 0` to
/// one-hot on the final step at `progress >= horizon`, every non-final
/// weight floored at `floor` and the final weight taking the remainder so
/// the weights sum to one. `progress` is measured in epochs and may be
/// fractional.
pub fn anneal_loss_weights(
    progress: f64,
    steps: usize,
    include_pre_update: bool,
    horizon: f64,
    floor: f64,
) -> LossWeights {
    let first_step = usize::from(!include_pre_update);
    let len = steps + 1 - first_step;
    let t = if horizon > 0.0 {
        (progress / horizon).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let uniform = 1.0 / len as f64;
    let mut weights: Vec<f64> = (0..len - 1)
        .map(|_| ((1.0 - t) * uniform).max(floor))
        .collect();
    let rest: f64 = weights.iter().sum();
    weights.push(if t == 0.0 { uniform } else { 1.0 - rest });
    LossWeights {
        first_step,
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_order_switch() {
        assert_eq!(derivative_order(49, 50), Order::First);
        assert_eq!(derivative_order(50, 50), Order::Second);
        assert_eq!(derivative_order(0, 0), Order::Second);
        assert_eq!(derivative_order(1000, 0), Order::Second);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 1000, 0.001, 1e-5), 0.001);
        assert_eq!(cosine_lr(1000, 1000, 0.001, 1e-5), 1e-5);
        assert!((cosine_lr(500, 1000, 0.001, 1e-5) - (0.001 + 1e-5) / 2.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let lr = cosine_lr(i, 1000, 0.001, 1e-5);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn anneal_endpoints() {
        let v = anneal_loss_weights(0.0, 5, false, 100.0, 0.001);
        assert_eq!(v.first_step, 1);
        assert_eq!(v.weights, vec![0.2; 5]);
        let v = anneal_loss_weights(100.0, 5, false, 100.0, 0.001);
        let want = [0.001, 0.001, 0.001, 0.001, 0.996];
        for (a, b) in v.weights.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let v = anneal_loss_weights(3.0, 4, true, 10.0, 0.001);
        assert_eq!(v.first_step, 0);
        assert_eq!(v.weights.len(), 5);
    }

    #[test]
    fn anneal_is_monotone_and_normalized() {
        for include in [false, true] {
            let mut prev = anneal_loss_weights(0.0, 5, include, 100.0, 0.001);
            for e in 1..=150 {
                let v = anneal_loss_weights(e as f64, 5, include, 100.0, 0.001);
                let n = v.weights.len();
                assert!((v.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(v.weights[..n - 1].iter().all(|&w| w >= 0.001));
                assert!(v.weights[n - 1] >= prev.weights[n - 1]);
                for i in 0..n - 1 {
                    assert!(v.weights[i] <= prev.weights[i]);
                }
                prev = v;
            }
        }
    }

    #[test]
    fn final_only_weights() {
        let v = LossWeights::final_only(3, false);
        assert_eq!(v.weights, vec![0.0, 0.0, 1.0]);
        assert_eq!(v.last_step(), 3);
        assert_eq!(v.weight(3), 1.0);
        assert_eq!(v.weight(0), 0.0);
    }
}
