use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax_rows, Element, Tensor};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::meta::{MetaLearner, MetaState};

/// Validation result recorded at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Completed outer iterations at evaluation time.
    pub iteration: usize,
    pub accuracy: f64,
    pub std_error: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean per-episode target accuracy.
    pub accuracy: f64,
    /// Standard error of that mean over episodes.
    pub std_error: f64,
    /// Mean target cross-entropy of the (ensembled) probabilities.
    pub loss: f64,
    pub per_episode: Vec<f64>,
}

/// Element-wise mean of probability tables of equal shape.
pub fn average_probabilities<T: Element>(tables: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Structure("no probabilities to average".into()))?;
    let mut sum = vec![0.0f64; first.len()];
    for t in tables {
        if t.shape() != first.shape() {
            return Err(Error::shape(
                "average_probabilities",
                &[first.shape(), t.shape()],
            ));
        }
        for (s, v) in sum.iter_mut().zip(t.data()) {
            *s += v.to_f64();
        }
    }
    let n = tables.len() as f64;
    Tensor::new(
        first.shape().to_vec(),
        sum.into_iter().map(|s| T::from_f64(s / n)).collect(),
    )
}

/// Mean and standard error of the mean (sample standard deviation / sqrt n).
pub fn mean_and_std_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Adapts every state to every episode for `steps` inner steps and scores
/// the target predictions. With several states the per-target softmax
/// probabilities are averaged before the argmax.
pub fn evaluate<T: Element>(
    learner: &MetaLearner,
    states: &[&MetaState<T>],
    episodes: &[Episode],
    steps: usize,
) -> Result<EvalResult> {
    if episodes.is_empty() {
        return Err(Error::Structure(
            "evaluation needs at least one episode".into(),
        ));
    }
    if states.is_empty() {
        return Err(Error::Structure(
            "evaluation needs at least one model".into(),
        ));
    }
    for s in &states[1..] {
        if !s.params.is_compatible(&states[0].params) {
            return Err(Error::Structure(
                "ensemble members have different parameter structures".into(),
            ));
        }
    }
    let scored: Vec<(f64, f64)> = episodes
        .par_iter()
        .map(|ep| {
            let probs: Vec<Tensor<T>> = states
                .iter()
                .map(|s| learner.predict(s, ep, steps))
                .collect::<Result<_>>()?;
            let avg = average_probabilities(&probs)?;
            Ok(score(&avg, &ep.target_y))
        })
        .collect::<Result<_>>()?;
    let per_episode: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let (accuracy, std_error) = mean_and_std_error(&per_episode);
    let loss = scored.iter().map(|s| s.1).sum::<f64>() / scored.len() as f64;
    Ok(EvalResult {
        accuracy,
        std_error,
        loss,
        per_episode,
    })
}

/// Accuracy and mean negative log-probability of the true labels.
fn score<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> (f64, f64) {
    let k = probs.shape()[1];
    let pred = argmax_rows(probs.data(), k);
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    let nll: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.data()[i * k + y].to_f64().max(f64::MIN_POSITIVE).ln())
        .sum();
    (
        correct as f64 / labels.len() as f64,
        nll / labels.len() as f64,
    )
}

/// Epochs of the three best validation accuracies, best first; ties go to
/// the earlier epoch.
pub fn select_top3(history: &[EpochSummary]) -> Result<[usize; 3]> {
    if history.len() < 3 {
        return Err(Error::Selection(format!(
            "need 3 evaluated epochs, have {}",
            history.len()
        )));
    }
    let mut order: Vec<&EpochSummary> = history.iter().collect();
    order.sort_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then(a.epoch.cmp(&b.epoch))
    });
    Ok([order[0].epoch, order[1].epoch, order[2].epoch])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(accs: &[f64]) -> Vec<EpochSummary> {
        accs.iter()
            .enumerate()
            .map(|(e, &a)| EpochSummary {
                epoch: e,
                iteration: 0,
                accuracy: a,
                std_error: 0.0,
                loss: 0.0,
            })
            .collect()
    }

    #[test]
    fn top3_selection() {
        assert_eq!(
            select_top3(&history(&[0.8, 0.9, 0.7, 0.95])).unwrap(),
            [3, 1, 0]
        );
        assert_eq!(select_top3(&history(&[0.5; 5])).unwrap(), [0, 1, 2]);
        assert_eq!(select_top3(&history(&[0.1, 0.3, 0.2])).unwrap(), [1, 2, 0]);
        assert!(matches!(
            select_top3(&history(&[0.1, 0.3])),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn probability_average_decides_by_arithmetic() {
        // two models lean to class 0 at 0.6, one is sure of class 1 at 0.9
        let a = Tensor::new(vec![1, 3], vec![0.6f64, 0.3, 0.1]).unwrap();
        let b = a.clone();
        let c = Tensor::new(vec![1, 3], vec![0.05, 0.9, 0.05]).unwrap();
        let avg = average_probabilities(&[a, b, c]).unwrap();
        // hand average: (1.25, 1.5, 0.25) / 3
        let want = [1.25 / 3.0, 1.5 / 3.0, 0.25 / 3.0];
        for (x, y) in avg.data().iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(argmax_rows(avg.data(), 3), vec![1]);
        assert_eq!(score(&avg, &[1]).0, 1.0);
    }

    #[test]
    fn identical_members_average_to_themselves() {
        let a = Tensor::new(vec![2, 2], vec![0.3f32, 0.7, 0.9, 0.1]).unwrap();
        let avg = average_probabilities(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(argmax_rows(avg.data(), 2), argmax_rows(a.data(), 2));
    }

    #[test]
    fn standard_error() {
        assert_eq!(mean_and_std_error(&[1.0]), (1.0, 0.0));
        let (m, se) = mean_and_std_error(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
