use super::element::Element;
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<'t, T: Element>(logits: &Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] == 0 || s[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &[&s, &[labels.len()]]));
    }
    let (b, k) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Structure(format!(
            "cross_entropy: label {bad} out of range for {k} classes"
        )));
    }
    let mut onehot = vec![T::zero(); b * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = T::one();
    }
    let onehot = logits.tape().constant(&Tensor::new(vec![b, k], onehot)?);
    let picked = logits.mul(&onehot)?.sum_rows()?;
    Ok(logits.logsumexp()?.sub(&picked)?.mean())
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows<T: Element>(values: &[T], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let pred = argmax_rows(logits.data(), k);
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}
