//! Tape-free forward kernels shared by [`Tape`](super::Tape) operations.

use super::Tensor2;
use crate::{Error, Result};

const SMOOTH_SLOPE: f64 = 1.702;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(1.702 x)`, a smooth GELU approximant.
pub fn smooth_nonlinearity(x: &Tensor2) -> Tensor2 {
    x.map(|v| v * sigmoid(SMOOTH_SLOPE * v))
}

pub(crate) fn smooth_derivative(x: f64) -> f64 {
    let s = sigmoid(SMOOTH_SLOPE * x);
    s + SMOOTH_SLOPE * x * s * (1.0 - s)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Divides each row by `max(norm, eps)`; returns the indices of rows whose
/// norm fell below `eps`.
pub fn l2_normalize_rows(x: &Tensor2, eps: f64) -> Result<(Tensor2, Vec<usize>)> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("normalization eps must be > 0, got {eps}")));
    }
    let mut out = x.clone();
    let mut degenerate = Vec::new();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < eps {
            degenerate.push(i);
        }
        let denom = norm.max(eps);
        row.iter_mut().for_each(|v| *v /= denom);
    }
    Ok((out, degenerate))
}

/// Index of the largest entry, smallest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor2::row_vector(&[0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);

        // exp(-1000) underflows to zero in f64; the stabilized form never
        // evaluates exp(1000).
        let s = softmax_rows(&Tensor2::row_vector(&[1000.0, 0.0]));
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor2::row_vector(&[0.3, -1.2, 2.5, 0.0]);
        let a = softmax_rows(&x);
        for c in [-50.0, -1.0, 3.0, 700.0] {
            let b = softmax_rows(&x.map(|v| v + c));
            assert!(a.max_abs_diff(&b) < 1e-12, "shift {c}");
        }
    }

    #[test]
    fn normalize_examples() {
        let (y, bad) = l2_normalize_rows(&Tensor2::row_vector(&[3.0, 4.0]), 1e-12).unwrap();
        assert!((y.get(0, 0) - 0.6).abs() < 1e-15 && (y.get(0, 1) - 0.8).abs() < 1e-15);
        assert!(bad.is_empty());

        let unit = Tensor2::row_vector(&[0.6, 0.8]);
        let (y, _) = l2_normalize_rows(&unit, 1e-12).unwrap();
        assert!(y.max_abs_diff(&unit) < 1e-12);

        let (y, bad) = l2_normalize_rows(&Tensor2::zeros(1, 3), 1e-8).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(bad, vec![0]);

        assert!(l2_normalize_rows(&unit, 0.0).is_err());
    }

    #[test]
    fn smooth_examples() {
        let g = |x: f64| smooth_nonlinearity(&Tensor2::scalar(x)).item();
        assert_eq!(g(0.0), 0.0);
        assert!(g(-10.0).abs() < 1e-3);
        assert!((g(50.0) - 50.0).abs() < 1e-12);
        // 1 * sigmoid(1.702) = 1 / (1 + e^-1.702)
        assert!((g(1.0) - 0.845_795_765_932_821).abs() < 1e-14);
        assert!((g(1.0) - 0.8458).abs() < 1e-4);
    }

    #[test]
    fn argmax_prefers_smaller_index() {
        assert_eq!(argmax(&[0.5, 0.5, 0.0]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
