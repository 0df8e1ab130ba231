//! Fused softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

fn check_labels(logits: &Tensor2, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("xent labels", logits.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: logits.cols(),
        });
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax, max-shifted.
pub fn softmax(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// `-log softmax(logits_i)[label_i]` per row.
pub fn per_sample_xent(logits: &Tensor2, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    let losses: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            // clamp at zero: rounding can leave -1e-16 on saturated rows
            (log_sum_exp(row) - row[y]).max(0.0)
        })
        .collect();
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("cross-entropy"));
    }
    Ok(losses)
}

/// `∂(Σ_i w_i · xent_i)/∂logits = w_i · (softmax_i − onehot(y_i))`.
pub fn xent_grad(logits: &Tensor2, labels: &[usize], weights: &[f64]) -> Result<Tensor2> {
    check_labels(logits, labels)?;
    if weights.len() != logits.rows() {
        return Err(Error::shape("loss weights", logits.rows(), weights.len()));
    }
    let mut g = softmax(logits);
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        let row = g.row_mut(i);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= w;
        }
    }
    Ok(g)
}
