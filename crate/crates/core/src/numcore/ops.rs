//! Eager tensor kernels. The autodiff graph calls into these for its forward
//! values, so both paths share one numeric implementation.

use crate::error::{dim_err, Error, Result};

use super::tensor::{check_matrix, Real, Tensor};

/// Lower bound applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub(crate) fn matmul_tn_kernel<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_matrix(a, "matmul lhs")?;
    let (k2, n) = check_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(dim_err!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Tensor::new(vec![m, n], matmul_kernel(a.data(), b.data(), m, k, n))
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Usage(format!(
            "softmax axis {} invalid for rank {}",
            axis,
            x.rank()
        )));
    }
    if !x.all_finite() {
        return Err(Error::NumericDomain("softmax input is not finite".into()));
    }
    let shape = x.shape();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let idx = |k: usize| base + k * inner;
            let mut max = T::neg_infinity();
            for k in 0..extent {
                max = max.max(data[idx(k)]);
            }
            let mut total = T::zero();
            for k in 0..extent {
                let e = (data[idx(k)] - max).exp();
                data[idx(k)] = e;
                total += e;
            }
            for k in 0..extent {
                data[idx(k)] = data[idx(k)] / total;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax over the last axis. `allowed` masks out entries
/// (probability zero) where false.
pub(crate) fn softmax_rows_kernel<T: Real>(
    x: &[T],
    rows: usize,
    cols: usize,
    allowed: Option<&[bool]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let ok = |c: usize| allowed.map_or(true, |m| m[r * cols + c]);
        let mut max = T::neg_infinity();
        for (c, &v) in xr.iter().enumerate() {
            if ok(c) {
                max = max.max(v);
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut total = T::zero();
        for c in 0..cols {
            if ok(c) {
                let e = (xr[c] - max).exp();
                orow[c] = e;
                total += e;
            }
        }
        for o in orow.iter_mut() {
            *o = *o / total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows_kernel<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = xr.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
}

/// Log-softmax of a logit vector, in f64.
pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    log_softmax_rows_kernel(&xs, 1, xs.len())
}

/// `Σ p·(ln p − ln q)` with `0·ln 0 := 0` and `q` floored at [`PROB_FLOOR`].
pub fn kl_divergence<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    if p.len() != q.len() {
        return Err(dim_err!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        ));
    }
    let floor = T::from_f64(PROB_FLOOR);
    let mut acc = T::zero();
    for (&pi, &qi) in p.data().iter().zip(q.data()) {
        if pi > T::zero() {
            acc += pi * (pi.max(floor).ln() - qi.max(floor).ln());
        }
    }
    Ok(acc)
}

/// KL(σ(teacher) ‖ σ(student)) directly from logits, in f64, with log
/// probabilities floored at `ln PROB_FLOOR`.
pub fn kl_from_logits<T: Real>(teacher: &[T], student: &[T]) -> f64 {
    let floor = PROB_FLOOR.ln();
    let lt = log_softmax(teacher);
    let ls = log_softmax(student);
    lt.iter()
        .zip(&ls)
        .map(|(&a, &b)| {
            let p = a.exp();
            if p > 0.0 {
                p * (a.max(floor) - b.max(floor))
            } else {
                0.0
            }
        })
        .sum()
}

/// Normalizes each position over the last axis, then applies `gain`/`bias`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    Ok(layer_norm_parts(x, gain, bias, eps)?.0)
}

/// Layer norm forward returning `(output, normalized, inverse std per row)`.
pub(crate) fn layer_norm_parts<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if !(eps > T::zero()) {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {}", eps)));
    }
    let (rows, cols) = x.dims2();
    if gain.len() != cols || bias.len() != cols {
        return Err(dim_err!(
            "layer_norm width {} but gain {:?} and bias {:?}",
            cols,
            gain.shape(),
            bias.shape()
        ));
    }
    let n = T::from_f64(cols as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut normed = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for c in 0..cols {
            let z = (xr[c] - mean) * is;
            normed[r * cols + c] = z;
            out[r * cols + c] = z * gain.data()[c] + bias.data()[c];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, normed, inv_std))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Output length of a 1D convolution, or `None` when it would be < 1.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) struct ConvGeom {
    pub t_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub t_out: usize,
}

pub(crate) fn conv_geom<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let (t_in, c_in) = check_matrix(x, "conv1d input")?;
    if kernel.rank() != 3 {
        return Err(dim_err!("conv1d kernel must be K×C_in×C_out, got {:?}", kernel.shape()));
    }
    let (k, kc_in, c_out) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if kc_in != c_in {
        return Err(dim_err!(
            "conv1d channel mismatch: input {:?}, kernel {:?}",
            x.shape(),
            kernel.shape()
        ));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv1d kernel size must be odd, got {}", k)));
    }
    if stride == 0 {
        return Err(Error::Config("conv1d stride must be >= 1".into()));
    }
    let t_out = conv1d_out_len(t_in, k, stride, padding).ok_or_else(|| {
        Error::Dimension(format!(
            "conv1d output length < 1 for T={}, K={}, stride={}, padding={}",
            t_in, k, stride, padding
        ))
    })?;
    Ok(ConvGeom {
        t_in,
        c_in,
        c_out,
        k,
        t_out,
    })
}

/// Input row feeding output row `t` at tap `tap`, if inside the unpadded signal.
#[inline]
pub(crate) fn conv_src(t: usize, tap: usize, stride: usize, padding: usize, t_in: usize) -> Option<usize> {
    let pos = (t * stride + tap).checked_sub(padding)?;
    (pos < t_in).then_some(pos)
}

/// 1D cross-correlation of `x[T×C_in]` with `kernel[K×C_in×C_out]`.
pub fn conv1d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, kernel, stride, padding)?;
    let mut out = vec![T::zero(); g.t_out * g.c_out];
    let w = kernel.data();
    for t in 0..g.t_out {
        let orow = &mut out[t * g.c_out..(t + 1) * g.c_out];
        for tap in 0..g.k {
            let Some(src) = conv_src(t, tap, stride, padding, g.t_in) else {
                continue;
            };
            let xrow = x.row(src);
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &w[(tap * g.c_in + ci) * g.c_out..(tap * g.c_in + ci + 1) * g.c_out];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![g.t_out, g.c_out], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = b[0].len();
        a.iter()
            .map(|row| {
                (0..n)
                    .map(|j| row.iter().enumerate().map(|(p, &x)| x * b[p][j]).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn matmul_small_and_identity() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let expect = naive_matmul(
            &[vec![1.0, 2.0], vec![3.0, 4.0]],
            &[vec![5.0, 6.0], vec![7.0, 8.0]],
        );
        assert_eq!(expect, vec![vec![19.0, 22.0], vec![43.0, 50.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);

        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn matmul_empty_contraction_is_zero() {
        let a = Tensor::<f64>::zeros(vec![3, 0]);
        let b = Tensor::<f64>::zeros(vec![0, 2]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::from_vec(vec![0.7f64; 4]);
        let y = softmax(&x, 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = Tensor::from_vec(vec![0.0f64, 3f64.ln()]);
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);

        let x = Tensor::from_vec(vec![0.3f64, -1.2, 2.5]);
        let shifted = x.map(|v| v + 40.0);
        let a = softmax(&x, 0).unwrap();
        let b = softmax(&shifted, 0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::from_rows(&[vec![0.0f64, 1.0], vec![0.0, 1.0]]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::from_vec(vec![0.0f32, f32::NAN]);
        assert!(matches!(softmax(&x, 0), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn kl_cases() {
        let p = Tensor::from_vec(vec![0.2f64, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);

        let p = Tensor::from_vec(vec![1.0f64, 0.0]);
        let q = Tensor::from_vec(vec![0.5f64, 0.5]);
        assert!((kl_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);

        let p = Tensor::from_vec(vec![0.5f64, 0.5]);
        let q = Tensor::from_vec(vec![0.9f64, 0.1]);
        let expect = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5f64.ln();
        assert!((kl_divergence(&p, &q).unwrap() - expect).abs() < 1e-15);

        let short = Tensor::from_vec(vec![1.0f64]);
        assert!(matches!(kl_divergence(&p, &short), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::from_vec(vec![1.0f64; 3]);
        let zero = Tensor::from_vec(vec![0.0f64; 3]);
        let x = Tensor::from_vec(vec![2.5f64; 3]);
        let y = layer_norm(&x, &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let one2 = Tensor::from_vec(vec![1.0f64; 2]);
        let zero2 = Tensor::from_vec(vec![0.0f64; 2]);
        let x = Tensor::from_vec(vec![1.0f64, -1.0]);
        let y = layer_norm(&x, &one2, &zero2, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-10 && (y.data()[1] + 1.0).abs() < 1e-10);

        let b = Tensor::from_vec(vec![0.1f64, -2.0, 3.0]);
        let x = Tensor::from_rows(&[vec![1.0, 5.0, -3.0], vec![0.0, 0.5, 9.0]]).unwrap();
        let y = layer_norm(&x, &zero, &b, 1e-5).unwrap();
        assert_eq!(y.row(0), b.data());
        assert_eq!(y.row(1), b.data());

        assert!(matches!(layer_norm(&x, &one, &zero, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn conv1d_cases() {
        let x = Tensor::new(vec![3, 1], vec![1.0f64, 2.0, 3.0]).unwrap();
        let k = Tensor::new(vec![3, 1, 1], vec![1.0f64; 3]).unwrap();
        // sliding-window oracle
        let padded = [0.0, 1.0, 2.0, 3.0, 0.0];
        let oracle: Vec<f64> = padded.windows(3).map(|w| w.iter().sum()).collect();
        assert_eq!(oracle, vec![3.0, 6.0, 5.0]);
        assert_eq!(conv1d(&x, &k, 1, 1).unwrap().data(), &oracle[..]);

        let x = Tensor::from_rows(&[vec![1.0f64, -2.0], vec![0.5, 4.0]]).unwrap();
        let eye = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv1d(&x, &eye, 1, 0).unwrap(), x);

        assert_eq!(conv1d_out_len(10, 3, 2, 1), Some(5));
        let x = Tensor::<f32>::zeros(vec![10, 1]);
        let k = Tensor::<f32>::zeros(vec![3, 1, 2]);
        assert_eq!(conv1d(&x, &k, 2, 1).unwrap().shape(), &[5, 2]);

        let x = Tensor::<f32>::zeros(vec![1, 1]);
        let k = Tensor::<f32>::zeros(vec![3, 1, 1]);
        assert!(matches!(conv1d(&x, &k, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.0] {
            let h = 1e-6;
            let num = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((num - gelu_grad_scalar(x)).abs() < 1e-8);
        }
        assert_eq!(gelu_scalar(0.0f64), 0.0);
    }
}
