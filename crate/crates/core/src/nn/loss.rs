use crate::error::{Error, Result};
use crate::nn::matrix::Matrix;

/// Row-wise softmax with max-subtraction stabilization.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (c, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..logits.cols() {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}

/// Mean cross-entropy of softmax(logits) against integer labels, plus the
/// gradient with respect to the logits: (softmax - onehot) / batch size.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::data(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::data("empty batch"));
    }
    for &y in labels {
        if y >= logits.cols() {
            return Err(Error::data(format!(
                "label index {y} out of range 0..{}",
                logits.cols()
            )));
        }
    }
    let n = logits.rows();
    let nf = n as f64;
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &z in row {
            sum += (z - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - row[labels[r]];
        for (c, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            let onehot = if c == labels[r] { 1.0 } else { 0.0 };
            grad.set(r, c, (p - onehot) / nf);
        }
    }
    Ok((loss / nf, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = Matrix::from_rows(&[vec![0.3; 5], vec![-2.0; 5]]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4]).unwrap();
        assert_relative_eq!(loss, 5.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn saturated_true_logit_loss_vanishes() {
        let logits = Matrix::from_rows(&[vec![0.0, 0.0, 100.0, 0.0, 0.0]]);
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!((0.0..1e-40).contains(&loss), "loss {loss}");
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Matrix::from_rows(&[vec![1.0, -0.5, 2.0, 0.0, 0.3], vec![5.0, 4.0, 3.0, 2.0, 1.0]]);
        let (_, grad) = softmax_cross_entropy(&logits, &[1, 3]).unwrap();
        for r in 0..grad.rows() {
            let s: f64 = grad.row(r).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let logits = Matrix::from_rows(&[vec![1000.0, 1000.0, 999.0]]);
        let p = softmax_rows(&logits);
        let s: f64 = p.row(0).iter().sum();
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        assert!(p.all_finite());
    }

    #[test]
    fn rejects_bad_labels() {
        let logits = Matrix::zeros(1, 5);
        assert!(softmax_cross_entropy(&logits, &[5]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }
}
