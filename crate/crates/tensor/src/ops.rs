//! Stand-alone tensor functions that do not record onto a tape.

use crate::error::{Result, TensorError};
use crate::graph::softmax_in_place;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax of `logits / temperature` over the last axis.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TensorError::Config(format!("softmax temperature must be positive, got {temperature}")));
    }
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(TensorError::Numeric("softmax input contains NaN".into()));
    }
    let inv = T::c(1.0 / temperature);
    let mut out = logits.map(|v| v * inv);
    let d = out.last_dim();
    for row in out.data_mut().chunks_exact_mut(d) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Log-softmax of `logits / temperature` over the last axis.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TensorError::Config(format!("softmax temperature must be positive, got {temperature}")));
    }
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(TensorError::Numeric("log_softmax input contains NaN".into()));
    }
    let inv = T::c(1.0 / temperature);
    let mut out = logits.map(|v| v * inv);
    let d = out.last_dim();
    for row in out.data_mut().chunks_exact_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
    Ok(out)
}

/// Plain (non-recording) matrix product `a [m, k] * b [k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a.data(), k, 1, b.data(), n, 1, T::zero(), &mut out, n, 1);
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn symmetric_logits_split_evenly() {
        let p = softmax(&Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn ln2_gap_gives_two_thirds() {
        let p = softmax(&Tensor::<f64>::from_f64(&[2], &[2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = softmax(&Tensor::<f32>::from_f64(&[2], &[1000.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
        assert!(p.is_finite());
    }

    #[test]
    fn rejects_bad_temperature_and_nan() {
        let t = Tensor::<f64>::from_f64(&[2], &[0.0, 1.0]);
        assert!(matches!(softmax(&t, 0.0), Err(TensorError::Config(_))));
        assert!(matches!(softmax(&t, -1.0), Err(TensorError::Config(_))));
        let nan = Tensor::<f64>::from_f64(&[2], &[f64::NAN, 1.0]);
        assert!(matches!(softmax(&nan, 1.0), Err(TensorError::Numeric(_))));
    }

    proptest! {
        #[test]
        fn rows_are_distributions_and_shift_invariant(
            vals in proptest::collection::vec(-30.0f64..30.0, 12),
            shift in -100.0f64..100.0,
            tau in 0.05f64..3.0,
        ) {
            let t = Tensor::from_vec(&[3, 4], vals.clone());
            let p = softmax(&t, tau).unwrap();
            for r in 0..3 {
                let row = p.row(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let shifted = softmax(&t.map(|v| v + shift), tau).unwrap();
            prop_assert!(p.max_abs_diff(&shifted) < 1e-6);
        }
    }
}
