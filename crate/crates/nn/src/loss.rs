use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a batch of logits, with its gradient.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, k) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(NnError::Shape(format!("{} labels for {b} rows", labels.len())));
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut loss = T::zero();
    let inv_b = T::one() / T::from_usize(b.max(1)).unwrap();
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(NnError::Shape(format!("label {label} out of {k} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_denom = denom.ln() + max;
        loss += log_denom - row[label];
        let g = grad.row_mut(r);
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = (row[j] - log_denom).exp() * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Index of the largest entry of each row; ties resolve to the smallest index.
pub fn argmax_rows<T: Scalar>(x: &Tensor<T>) -> Vec<usize> {
    (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::<f64>::from_f64(&[2, 3], &[0.2, -1.0, 0.5, 1.5, 0.3, -0.7]).unwrap();
        let labels = [2, 0];
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let fd = (softmax_cross_entropy(&p, &labels).unwrap().0 - softmax_cross_entropy(&m, &labels).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[1, 4]);
        let (l, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }
}
