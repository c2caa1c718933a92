use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct XentOutput<T: Scalar> {
    pub loss: f64,
    pub grad: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Row-wise softmax with the row max subtracted first.
pub fn softmax<T: Scalar>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    if scores.rank() != 2 {
        return Err(Error::invalid(format!(
            "softmax expects [N, classes], got {:?}",
            scores.shape()
        )));
    }
    let k = scores.shape()[1];
    let mut out = Vec::with_capacity(scores.len());
    for row in scores.data().chunks(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Ok(Tensor::from_parts(scores.shape().to_vec(), out))
}

/// Mean negative log-likelihood of `labels` under `softmax(scores)`.
///
/// With `class_weights`, sample `i` counts with weight `w[label_i]` and the
/// loss is normalized by the total weight of the batch; without, every
/// sample has weight 1 and the gradient is `(probs - onehot) / N`.
pub fn softmax_xent<T: Scalar>(
    scores: &Tensor<T>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<XentOutput<T>> {
    let probs = softmax(scores)?;
    let (n, k) = (scores.shape()[0], scores.shape()[1]);
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "softmax_xent: {} labels for {n} score rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!(
            "softmax_xent: label {bad} out of range for {k} classes"
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != k || w.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid(format!("class weights must be {k} non-negative values")));
        }
    }
    let weight = |l: usize| class_weights.map_or(1.0, |w| w[l]);
    let total: f64 = labels.iter().map(|&l| weight(l)).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("softmax_xent: batch has zero total weight"));
    }

    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (i, &l) in labels.iter().enumerate() {
        let row = &probs.data()[i * k..(i + 1) * k];
        // log p computed from the shifted scores for stability
        let srow = &scores.data()[i * k..(i + 1) * k];
        let max = srow.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + srow.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        let wi = weight(l);
        loss += wi * (lse - srow[l].as_f64());
        let scale = T::of(wi / total);
        for (c, &p) in row.iter().enumerate() {
            let y = if c == l { T::one() } else { T::zero() };
            grad.push((p - y) * scale);
        }
    }
    Ok(XentOutput {
        loss: loss / total,
        grad: Tensor::from_parts(vec![n, k], grad),
        probs,
    })
}
