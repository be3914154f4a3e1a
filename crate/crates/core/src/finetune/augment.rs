use crate::scalar::Scalar;
use crate::tensor::TensorError;

/// Convex combination `λ·a + (1−λ)·b` of inputs and of label vectors.
pub fn mixup<T: Scalar>(
    xa: &[T],
    xb: &[T],
    ya: &[T],
    yb: &[T],
    lambda: f64,
) -> Result<(Vec<T>, Vec<T>), TensorError> {
    if xa.len() != xb.len() || ya.len() != yb.len() {
        return Err(TensorError::Contract(format!(
            "mixup shapes: inputs {} / {}, labels {} / {}",
            xa.len(),
            xb.len(),
            ya.len(),
            yb.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TensorError::Contract(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    Ok((mix(xa, xb, lambda), mix(ya, yb, lambda)))
}

pub(crate) fn mix<T: Scalar>(a: &[T], b: &[T], lambda: f64) -> Vec<T> {
    if lambda == 1.0 {
        return a.to_vec();
    }
    let (l, r) = (T::lit(lambda), T::lit(1.0 - lambda));
    a.iter().zip(b).map(|(&x, &y)| l * x + r * y).collect()
}

/// Circular shift: sample `i` moves to `(i + shift) mod len`.
pub fn time_roll<T: Copy>(x: &[T], shift: isize) -> Vec<T> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let k = shift.rem_euclid(n as isize) as usize;
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&x[n - k..]);
    out.extend_from_slice(&x[..n - k]);
    out
}
