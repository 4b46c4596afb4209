//! Finite-difference gradient oracle.
//!
//! Central differences over every coordinate of the input tensor. The
//! closure must be a deterministic function of its argument (fix seeds,
//! freeze bucket assignments and negative sets before calling).

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F: FnMut(&Tensor) -> f64>(mut f: F, x: &Tensor, step: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative error between two gradient vectors:
/// `||a - b||_2 / max(||a||_2, ||b||_2, floor)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}
