//! Forward kernels. The differentiation graph calls into these, and they are
//! usable directly on plain tensors.

use super::{gemm, MatMut, MatRef, Result, Tensor, TensorError};
use crate::scalar::Scalar;

fn require_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch { op, lhs: t.shape().to_vec(), rhs: vec![0, 0] });
    }
    Ok(())
}

fn require_same<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_matrix("matmul", a)?;
    require_matrix("matmul", b)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), a.as_mat(), b.as_mat(), T::zero(), MatMut::new(&mut out, m, n));
    Tensor::new([m, n], out)?.check_finite("matmul")
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

fn zip_with<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    require_same(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)?.check_finite(op)
}

/// Adds a vector of length `cols` to every row.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if bias.len() != x.cols() {
        return Err(TensorError::ShapeMismatch { op: "add_bias", lhs: x.shape().to_vec(), rhs: bias.shape().to_vec() });
    }
    let b = bias.data();
    let cols = x.cols();
    let data = x.data().iter().enumerate().map(|(i, &v)| v + b[i % cols]).collect();
    Tensor::new(x.shape(), data)?.check_finite("add_bias")
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let dims = x.shape();
    if axis >= dims.len() {
        return Err(TensorError::InvalidAxis { op: "softmax", axis, rank: dims.len() });
    }
    let outer: usize = dims[..axis].iter().product();
    let n = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..n).map(|j| out[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..n {
                let e = (out[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..n {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(dims, out)?.check_finite("softmax")
}

/// In-place row softmax on a contiguous `rows × cols` block.
pub(crate) fn softmax_rows_inplace<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Layer normalisation over the last axis.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    layer_norm_parts(x, gamma, beta, eps).map(|(y, _, _)| y)
}

/// Returns `(output, normalised input, per-row 1/std)`.
pub(crate) fn layer_norm_parts<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let cols = x.cols();
    if gamma.len() != cols || beta.len() != cols {
        return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: x.shape().to_vec(), rhs: gamma.shape().to_vec() });
    }
    let n = T::lit(cols as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.rows());
    let mut out = vec![T::zero(); x.len()];
    let (g, b) = (gamma.data(), beta.data());
    for (r, row) in x.data().chunks(cols).enumerate() {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let base = r * cols;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[base + c] = h;
            out[base + c] = h * g[c] + b[c];
        }
    }
    let y = Tensor::new(x.shape(), out)?.check_finite("layer_norm")?;
    Ok((y, xhat, rstd))
}

/// Standard normal CDF.
pub(crate) fn phi_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

fn phi_pdf<T: Scalar>(x: T) -> T {
    T::lit(0.398_942_280_401_432_7) * (-(x * x) * T::lit(0.5)).exp()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * phi_cdf(v))
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    phi_cdf(x) + x * phi_pdf(x)
}

/// Multi-head scaled dot-product self-attention over equal-length segments.
///
/// `q`, `k`, `v` are `(segments·seq_len) × dim`; heads split `dim` into
/// contiguous column blocks. Returns the attended values and the attention
/// probabilities laid out as `[segment][head][query][key]`.
pub(crate) fn attention_parts<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    seq_len: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    require_matrix("attention", q)?;
    require_same("attention", q, k)?;
    require_same("attention", q, v)?;
    let (rows, dim) = (q.rows(), q.cols());
    if heads == 0 || dim % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
        return Err(TensorError::Contract(format!(
            "attention: dim {dim} / heads {heads}, rows {rows} / seq_len {seq_len} must divide"
        )));
    }
    let segments = rows / seq_len;
    let dh = dim / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let block = seq_len * seq_len;
    let mut probs = vec![T::zero(); segments * heads * block];
    let mut out = vec![T::zero(); rows * dim];
    for s in 0..segments {
        for h in 0..heads {
            let qs = q.as_mat().rows_slice(s * seq_len, seq_len).cols_slice(h * dh, dh);
            let ks = k.as_mat().rows_slice(s * seq_len, seq_len).cols_slice(h * dh, dh);
            let vs = v.as_mat().rows_slice(s * seq_len, seq_len).cols_slice(h * dh, dh);
            let p = &mut probs[(s * heads + h) * block..][..block];
            gemm(scale, qs, ks.t(), T::zero(), MatMut::new(p, seq_len, seq_len));
            softmax_rows_inplace(p, seq_len);
            let o = MatMut::new(&mut out, rows, dim).rows_slice(s * seq_len, seq_len).cols_slice(h * dh, dh);
            gemm(T::one(), MatRef::new(p, seq_len, seq_len), vs, T::zero(), o);
        }
    }
    Ok((Tensor::new([rows, dim], out)?.check_finite("attention")?, probs))
}

pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize, seq_len: usize) -> Result<Tensor<T>> {
    attention_parts(q, k, v, heads, seq_len).map(|(o, _)| o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = Tensor::new([2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let a = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::<f32>::zeros([2, 3]);
        assert!(matches!(matmul(&a, &a), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::new([2], vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.5, 0.5]);
        let one = Tensor::new([3, 1], vec![3.0f64, -1.0, 9.0]).unwrap();
        assert!(softmax(&one, 1).unwrap().data().iter().all(|&v| v == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 4, 5], &mut rng);
        let shifted = x.map(|v| v + 3.7);
        for axis in 0..3 {
            let a = softmax(&x, axis).unwrap();
            let b = softmax(&shifted, axis).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
        let rows = softmax(&x, 2).unwrap();
        for r in rows.data().chunks(5) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(matches!(softmax(&x, 3), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full([4], 1.0f64);
        let zeros = Tensor::zeros([4]);
        let c = Tensor::full([1, 4], 2.5f64);
        assert!(layer_norm(&c, &ones, &zeros, 1e-6).unwrap().data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // σ² ≈ 33 keeps the eps bias σ²/(σ²+eps) below 1e-7
        let x = random(&[1, 64], &mut rng).map(|v| v * 10.0);
        let ones = Tensor::full([64], 1.0f64);
        let zeros = Tensor::zeros([64]);
        let y = layer_norm(&x, &ones, &zeros, 1e-6).unwrap();
        let mean = y.data().iter().sum::<f64>() / 64.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);

        let fives = Tensor::full([64], 5.0f64);
        let y = layer_norm(&x, &zeros, &fives, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn gelu_values() {
        let x = Tensor::new([3], vec![0.0f64, 10.0, 1.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        // 1·Φ(1) = 0.5·(1 + erf(1/√2))
        let oracle = 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()));
        assert!((y.data()[2] - oracle).abs() < 1e-12);
        assert!((y.data()[2] - 0.841345).abs() < 1e-5);
    }

    #[test]
    fn attention_single_head_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, d) = (3, 4);
        let q = random(&[2 * l, d], &mut rng);
        let k = random(&[2 * l, d], &mut rng);
        let v = random(&[2 * l, d], &mut rng);
        let out = attention(&q, &k, &v, 2, l).unwrap();
        let dh = d / 2;
        for s in 0..2 {
            for h in 0..2 {
                for i in 0..l {
                    let qi = s * l + i;
                    let scores: Vec<f64> = (0..l)
                        .map(|j| {
                            let kj = s * l + j;
                            (0..dh).map(|c| q.data()[qi * d + h * dh + c] * k.data()[kj * d + h * dh + c]).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().copied().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for c in 0..dh {
                        let want: f64 =
                            (0..l).map(|j| (scores[j] - m).exp() / z * v.data()[(s * l + j) * d + h * dh + c]).sum();
                        assert!((out.data()[qi * d + h * dh + c] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
