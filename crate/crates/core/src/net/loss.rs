//! Softmax cross-entropy.

use crate::error::{ProbeError, Result};
use crate::tensor::Tensor;

fn check_finite(logits: &Tensor) -> Result<()> {
    if let Some(pos) = logits.data.iter().position(|v| !v.is_finite()) {
        return Err(ProbeError::Numeric(format!(
            "non-finite logit at example {} class {}",
            pos / logits.shape.size(),
            pos % logits.shape.size()
        )));
    }
    Ok(())
}

/// Stable `log(sum(exp(row)))` and the row max.
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of `logits` (N x n) against class indices.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_finite(logits)?;
    let n = logits.count;
    let total: f64 = (0..n)
        .map(|i| {
            let row = logits.example(i);
            log_sum_exp(row) - row[labels[i]]
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    check_finite(logits)?;
    let n = logits.count;
    let inv_n = 1.0 / n as f64;
    let mut grad = Tensor::zeros(logits.shape, n);
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.example(i);
        let lse = log_sum_exp(row);
        total += lse - row[labels[i]];
        let g = grad.example_mut(i);
        for (gk, &zk) in g.iter_mut().zip(row) {
            *gk = (zk - lse).exp() * inv_n;
        }
        g[labels[i]] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = (0..logits.count)
        .filter(|&i| argmax(logits.example(i)) == labels[i])
        .count();
    hits as f64 / logits.count.max(1) as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::zeros(Shape::flat(10), 4);
        let l = cross_entropy(&logits, &[0, 3, 9, 2]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let logits = Tensor::new(Shape::flat(3), 1, vec![margin, 0.0, 0.0]).unwrap();
            let l = cross_entropy(&logits, &[0]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn matches_summed_negative_log_probabilities() {
        let vals = [0.3, -1.2, 2.0, 1.1, 0.0, -0.7];
        let logits = Tensor::new(Shape::flat(3), 2, vals.to_vec()).unwrap();
        let labels = [2, 0];
        let mut oracle = 0.0;
        for i in 0..2 {
            let row = &vals[i * 3..i * 3 + 3];
            let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            oracle += -(row[labels[i]].exp() / z).ln();
        }
        oracle /= 2.0;
        let l = cross_entropy(&logits, &labels).unwrap();
        assert!((l - oracle).abs() < 1e-12);
        let (l2, _) = cross_entropy_grad(&logits, &labels).unwrap();
        assert_eq!(l, l2);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let logits = Tensor::new(Shape::flat(2), 1, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(cross_entropy(&logits, &[0]), Err(ProbeError::Numeric(_))));
    }
}
