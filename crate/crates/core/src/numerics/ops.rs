use super::Matrix;
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient through ReLU given the pre-activation; the subgradient at 0 is 0.
pub fn relu_backward(pre_activation: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    if pre_activation.shape() != grad_out.shape() {
        return Err(Error::dims("relu_backward", pre_activation.shape(), grad_out.shape()));
    }
    let data = pre_activation
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::new(grad_out.rows(), grad_out.cols(), data)
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean negative log-likelihood of `labels` under `probs`, together with the
/// gradient with respect to the logits that produced `probs` through softmax.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if probs.rows() != labels.len() {
        return Err(Error::dims("cross_entropy", probs.shape(), (labels.len(), 1)));
    }
    let classes = probs.cols();
    let mut grad = probs.clone();
    if labels.is_empty() {
        return Ok((0.0, grad));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Index {
                what: "class label",
                index: y,
                limit: classes,
            });
        }
        loss -= probs[(i, y)].max(PROB_FLOOR).ln();
        grad[(i, y)] -= 1.0;
    }
    let grad = grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

/// Mean binary cross-entropy of `n × 1` logits against a single domain
/// `target` (0 or 1), with the gradient with respect to the logits.
pub fn binary_cross_entropy(logits: &Matrix, target: f64) -> Result<(f64, Matrix)> {
    if logits.cols() != 1 {
        return Err(Error::dims("binary_cross_entropy", logits.shape(), (logits.rows(), 1)));
    }
    if logits.rows() == 0 {
        return Ok((0.0, logits.clone()));
    }
    let n = logits.rows() as f64;
    // -[y ln σ(z) + (1-y) ln(1-σ(z))] = y·softplus(-z) + (1-y)·softplus(z)
    let loss = logits
        .data()
        .iter()
        .map(|&z| target * softplus(-z) + (1.0 - target) * softplus(z))
        .sum::<f64>()
        / n;
    let grad = logits.map(|z| (sigmoid(z) - target) / n);
    Ok((loss, grad))
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("cosine_similarity", (1, a.len()), (1, b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
