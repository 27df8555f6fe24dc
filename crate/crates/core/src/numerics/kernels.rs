//! Value-level kernels shared by the tape and by callers that do not need
//! gradients.

use crate::error::{dim_err, Result};

use super::Tensor;

/// `c (+)= op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is stored as `m×k` (or `k×m` when `ta`), `b` as `k×n` (or `n×k` when
/// `tb`), `c` as `m×n`. With `accumulate` the product is added to `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the slices checked by the
    // debug assertions; matrixmultiply reads a/b and writes c within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(dim_err!(
            "matmul expects matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(dim_err!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// `(outer, len, inner)` view of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} invalid for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_into(x: &[f64], shape: &[usize], axis: usize, out: &mut [f64]) -> Result<()> {
    let (outer, len, inner) = axis_split(shape, axis)?;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    Ok(())
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.check_finite("softmax input")?;
    let mut out = vec![0.0; x.numel()];
    softmax_into(x.data(), x.shape(), axis, &mut out)?;
    Tensor::new(x.shape().to_vec(), out)
}

/// `log(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `log σ(z) = -softplus(-z)`.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Returns `(log σ(z), log σ(-z))`, i.e. `log β` and `log(1 - β)`.
pub fn stable_log_sigmoid_pair(z: &Tensor) -> (Tensor, Tensor) {
    let pos = z.data().iter().map(|&v| log_sigmoid(v)).collect();
    let neg = z.data().iter().map(|&v| log_sigmoid(-v)).collect();
    (
        Tensor::new(z.shape().to_vec(), pos).expect("same shape"),
        Tensor::new(z.shape().to_vec(), neg).expect("same shape"),
    )
}

pub(crate) fn reversed_cumsum_into(
    x: &[f64],
    shape: &[usize],
    axis: usize,
    out: &mut [f64],
) -> Result<()> {
    let (outer, len, inner) = axis_split(shape, axis)?;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut acc = 0.0;
            for j in (0..len).rev() {
                acc += x[base + j * inner];
                out[base + j * inner] = acc;
            }
        }
    }
    Ok(())
}

/// `out[i] = Σ_{j ≥ i} x[j]` along `axis`.
pub fn reversed_cumsum(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut out = vec![0.0; x.numel()];
    reversed_cumsum_into(x.data(), x.shape(), axis, &mut out)?;
    Tensor::new(x.shape().to_vec(), out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x log x` with `0 log 0 = 0`.
#[inline]
pub(crate) fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_small_product() {
        let id = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = Tensor::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&id, &v).unwrap().data(), &[3.0, 4.0]);
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn gemm_transposed_layouts() {
        // a^T b^T against explicit transposes
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3x2 stored, used as 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 2x3 stored, used as 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, true, &b, true, &mut c, false);
        // a^T = [[1,3,5],[2,4,6]], b^T = [[1,2],[0.5,0],[-1,1]]
        assert_eq!(c, [1.0 + 1.5 - 5.0, 2.0 + 0.0 + 5.0, 2.0 + 2.0 - 6.0, 4.0 + 6.0]);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap(), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_non_last_axis() {
        let x = Tensor::from_rows(&[&[1.0, 5.0], &[1.0, 2.0]]);
        let s = softmax(&x, 0).unwrap();
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 1) + s.get(1, 1) - 1.0).abs() < 1e-15);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn log_sigmoid_pair_limits() {
        let (p, n) = stable_log_sigmoid_pair(&Tensor::vector(vec![0.0, 50.0, -1e4, 1e4]).unwrap());
        assert!((p.data()[0] - 0.5f64.ln()).abs() < 1e-15);
        assert!((n.data()[0] - 0.5f64.ln()).abs() < 1e-15);
        assert!(p.data()[1].abs() < 1e-20);
        assert!((n.data()[1] + 50.0).abs() < 1e-12);
        assert!((p.data()[2] + 1e4).abs() < 1e-9);
        assert!(n.data()[3] <= 0.0 && (n.data()[3] + 1e4).abs() < 1e-9);
        assert!(p.data().iter().chain(n.data()).all(|v| v.is_finite() && *v <= 0.0));
    }

    #[test]
    fn reversed_cumsum_small_cases() {
        let r = reversed_cumsum(&Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap(), 0).unwrap();
        assert_eq!(r.data(), &[3.0, 2.0, 1.0]);
        let r = reversed_cumsum(&Tensor::vector(vec![7.5]).unwrap(), 0).unwrap();
        assert_eq!(r.data(), &[7.5]);
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(reversed_cumsum(&m, 0).unwrap().data(), &[4.0, 6.0, 3.0, 4.0]);
        assert_eq!(reversed_cumsum(&m, 1).unwrap().data(), &[3.0, 2.0, 7.0, 4.0]);
    }
}
