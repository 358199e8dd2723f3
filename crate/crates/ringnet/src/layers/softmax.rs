//! Softmax with log loss, fused so the backward pass is (p - onehot)/N.
//! Rows are shifted by their max before exponentiation; the loss accumulates
//! in f64 regardless of model precision.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax probabilities for logits [N,K].
pub fn softmax_probs<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        ref other => return Err(Error::shape("softmax logits", "[N,K]", format!("{other:?}"))),
    };
    if k == 0 {
        return Err(Error::shape("softmax logits", "K >= 1", "K = 0"));
    }
    let mut probs = Tensor::zeros(&[n, k]);
    for row in 0..n {
        let src = &logits.data()[row * k..(row + 1) * k];
        let dst = &mut probs.data_mut()[row * k..(row + 1) * k];
        let mut max = src[0];
        for &v in &src[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0f64;
        for (d, &v) in dst.iter_mut().zip(src) {
            let e = (v - max).to_f64().exp();
            sum += e;
            *d = T::from_f64(e);
        }
        let inv = T::from_f64(1.0 / sum);
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Ok(probs)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax, plus the
/// gradient with respect to the logits.
pub fn softmax_logloss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        ref other => return Err(Error::shape("softmax logits", "[N,K]", format!("{other:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(
            "softmax labels",
            format!("{n} labels"),
            labels.len().to_string(),
        ));
    }
    if n == 0 {
        return Err(Error::EmptyDataset("softmax loss over zero examples".into()));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidArg(format!("label {l} at row {i} outside 0..{k}")));
        }
    }
    let mut probs = softmax_probs(logits)?;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut loss = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        let src = &logits.data()[row * k..(row + 1) * k];
        let mut max = src[0].to_f64();
        for &v in &src[1..] {
            max = max.max(v.to_f64());
        }
        // log p = (z_label - max) - ln(sum exp(z - max)): finite even when
        // the label's probability underflows to zero.
        let lse: f64 = src.iter().map(|&v| (v.to_f64() - max).exp()).sum::<f64>().ln();
        loss -= src[label].to_f64() - max - lse;
        let slot = &mut probs.data_mut()[row * k..(row + 1) * k];
        slot[label] -= T::one();
        for v in slot.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok((loss / n as f64, probs))
}
