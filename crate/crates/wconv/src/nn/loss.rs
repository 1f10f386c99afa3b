//! Loss functions: cross-entropy with label smoothing, and mean squared
//! error. Both return the scalar loss (mean over the batch) together with
//! the gradient with respect to the prediction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loss configuration carried by a model recipe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// Softmax cross-entropy against `(1 - eps) * onehot + eps / n` targets.
    CrossEntropy { epsilon: f64 },
    Mse,
}

/// Softmax cross-entropy over `[B, n]` logits with uniform label smoothing.
/// The gradient with respect to the logits is `(softmax - q) / B`.
pub fn cross_entropy_label_smoothing(
    logits: &Tensor,
    targets: &[usize],
    epsilon: f64,
) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!("logits must be [B,n], got {:?}", logits.shape())));
    }
    let (b, n) = (logits.shape()[0], logits.shape()[1]);
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {n}")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("label smoothing must lie in [0,1), got {epsilon}")));
    }
    if targets.len() != b {
        return Err(Error::ShapeMismatch(format!("{b} logit rows but {} targets", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::InvalidArgument(format!("class id {bad} out of range for {n} classes")));
    }

    let mut grad = vec![0.0; b * n];
    let mut loss = 0.0;
    let uniform = epsilon / n as f64;
    for bi in 0..b {
        let row = &logits.data()[bi * n..(bi + 1) * n];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for i in 0..n {
            let q = if i == targets[bi] { 1.0 - epsilon + uniform } else { uniform };
            loss += q * (lse - row[i]);
            let p = (row[i] - lse).exp();
            grad[bi * n + i] = (p - q) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(&[b, n], grad)?))
}

/// Mean of squared differences over every element; the gradient is
/// `2 (pred - target) / count`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mse: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let count = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p - t;
        loss += d * d;
        grad[i] = 2.0 * d / count;
    }
    Ok((loss / count, Tensor::new(pred.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{central_difference, gradient_rel_err};
    use crate::tensor::Rng;

    #[test]
    fn uniform_logits_give_log_n() {
        for n in [2usize, 5, 10] {
            let logits = Tensor::zeros(&[1, n]).unwrap();
            let (loss, _) = cross_entropy_label_smoothing(&logits, &[0], 0.0).unwrap();
            assert!((loss - (n as f64).ln()).abs() < 1e-12);
        }
        // Under a uniform softmax the smoothed target does not matter.
        let logits = Tensor::zeros(&[1, 2]).unwrap();
        let (loss, _) = cross_entropy_label_smoothing(&logits, &[1], 0.1).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_input() {
        let logits = Tensor::zeros(&[1, 3]).unwrap();
        assert!(cross_entropy_label_smoothing(&logits, &[3], 0.0).is_err());
        assert!(cross_entropy_label_smoothing(&logits, &[0], 1.0).is_err());
        assert!(cross_entropy_label_smoothing(&logits, &[0, 1], 0.0).is_err());
        let one = Tensor::zeros(&[1, 1]).unwrap();
        assert!(cross_entropy_label_smoothing(&one, &[0], 0.0).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::new(19);
        let logits = Tensor::fill_uniform(&[4, 6], -2.0, 2.0, &mut rng).unwrap();
        let targets = [2usize, 0, 5, 3];
        for eps in [0.0, 0.1] {
            let (_, grad) = cross_entropy_label_smoothing(&logits, &targets, eps).unwrap();
            let numeric = central_difference(
                |x| {
                    cross_entropy_label_smoothing(
                        &Tensor::new(&[4, 6], x.to_vec()).unwrap(),
                        &targets,
                        eps,
                    )
                    .unwrap()
                    .0
                },
                logits.data(),
                1e-5,
            );
            assert!(gradient_rel_err(grad.data(), &numeric) < 1e-6);
        }
    }

    #[test]
    fn mse_basics_and_gradient() {
        let mut rng = Rng::new(23);
        let t = Tensor::fill_uniform(&[2, 5], -1.0, 1.0, &mut rng).unwrap();
        let (loss, grad) = mse_loss(&t, &t).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));

        let shifted = t.map(|v| v + 0.1);
        let (loss, _) = mse_loss(&shifted, &t).unwrap();
        assert!((loss - 0.01).abs() < 1e-12);

        let pred = Tensor::fill_uniform(&[2, 5], -1.0, 1.0, &mut rng).unwrap();
        let (_, grad) = mse_loss(&pred, &t).unwrap();
        let numeric = central_difference(
            |x| mse_loss(&Tensor::new(&[2, 5], x.to_vec()).unwrap(), &t).unwrap().0,
            pred.data(),
            1e-6,
        );
        assert!(gradient_rel_err(grad.data(), &numeric) < 1e-8);

        assert!(mse_loss(&pred, &Tensor::zeros(&[3]).unwrap()).is_err());
    }
}
