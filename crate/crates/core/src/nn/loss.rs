//! Softmax and cross-entropy with analytic gradients.

use super::{NnError, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Mean over the batch of `-log softmax(logits)[label]`, with its gradient
/// with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NnError> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(NnError::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(NnError::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }
    if n == 0 {
        return Ok((0.0, logits.clone()));
    }
    let logp = log_softmax_rows(logits);
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        loss -= logp.get(r, l);
        let row = grad.row_mut(r);
        row[l] -= 1.0;
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| argmax(logits.row(*r)) == l)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::from_rows(&[vec![0.3; 5], vec![-1.0; 5]]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_logits_give_vanishing_loss() {
        let logits = Tensor::from_rows(&[vec![60.0, 0.0, 0.0]]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-20);
        assert!(grad.norm() < 1e-20);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert_eq!(
            cross_entropy(&logits, &[3]).unwrap_err(),
            NnError::LabelOutOfRange { label: 3, classes: 3 }
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::from_rows(&[vec![1e3, -1e3, 0.5], vec![0.1, 0.2, 0.3]]).unwrap();
        let p = softmax_rows(&logits);
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
