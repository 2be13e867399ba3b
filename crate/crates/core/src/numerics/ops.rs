use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

fn matrix_dims<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(op, alloc::format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.dim(0), t.dim(1)))
}

/// `a · b` for `a: M×P`, `b: P×Q`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_metered(a, b, &mut 0)
}

/// `a · b`, adding `M·P·Q` to `macs`.
pub fn matmul_metered<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, macs: &mut u64) -> Result<Tensor<T>> {
    let (m, p) = matrix_dims("matmul", a)?;
    let (p2, q) = matrix_dims("matmul", b)?;
    if p != p2 {
        return Err(Error::dim(
            "matmul",
            alloc::format!("inner extents {} and {} differ", p, p2),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * q];
    for i in 0..m {
        let orow = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = ad[i * p + k];
            let brow = &bd[k * q..(k + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    *macs += (m * p * q) as u64;
    Tensor::new(&[m, q], out)
}

/// `a · bᵀ` for `a: M×P`, `b: Q×P`, adding `M·P·Q` to `macs`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, macs: &mut u64) -> Result<Tensor<T>> {
    let (m, p) = matrix_dims("matmul_nt", a)?;
    let (q, p2) = matrix_dims("matmul_nt", b)?;
    if p != p2 {
        return Err(Error::dim(
            "matmul_nt",
            alloc::format!("inner extents {} and {} differ", p, p2),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(m * q);
    for i in 0..m {
        let arow = &ad[i * p..(i + 1) * p];
        for j in 0..q {
            let brow = &bd[j * p..(j + 1) * p];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    *macs += (m * p * q) as u64;
    Tensor::new(&[m, q], out)
}

/// `aᵀ · b` for `a: P×M`, `b: P×Q`, adding `M·P·Q` to `macs`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, macs: &mut u64) -> Result<Tensor<T>> {
    let (p, m) = matrix_dims("matmul_tn", a)?;
    let (p2, q) = matrix_dims("matmul_tn", b)?;
    if p != p2 {
        return Err(Error::dim(
            "matmul_tn",
            alloc::format!("inner extents {} and {} differ", p, p2),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * q];
    for k in 0..p {
        let brow = &bd[k * q..(k + 1) * q];
        for i in 0..m {
            let aki = ad[k * m + i];
            let orow = &mut out[i * q..(i + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    *macs += (m * p * q) as u64;
    Tensor::new(&[m, q], out)
}

/// Softmax of one row in place. Returns `false` when every entry is `-inf`,
/// in which case the row is set to zeros.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> bool {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return false;
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    true
}

/// Row-wise softmax over the last axis.
///
/// Rows consisting only of `-inf` come back as zeros and are reported
/// through `log::warn!`.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = out.last_dim();
    let mut degenerate = 0usize;
    if c > 0 {
        for row in out.data_mut().chunks_mut(c) {
            if !softmax_in_place(row) {
                degenerate += 1;
            }
        }
    }
    if degenerate > 0 {
        log::warn!("softmax_rows: {degenerate} fully masked row(s) set to zero");
    }
    out
}

/// Per-vector statistics kept by [`layernorm_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T = f32> {
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per vector.
    pub rstd: Vec<T>,
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis followed by `gamma * x + beta`.
pub fn layernorm<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Tensor<T> {
    layernorm_cached(x, gamma, beta, eps).0
}

pub fn layernorm_cached<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, LayerNormCache<T>) {
    let d = x.last_dim();
    debug_assert_eq!(gamma.len(), d);
    debug_assert_eq!(beta.len(), d);
    let dn = T::of(d as f64);
    let mut out = x.clone();
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for (orow, hrow) in out
        .data_mut()
        .chunks_mut(d)
        .zip(xhat.data_mut().chunks_mut(d))
    {
        let mean = hrow.iter().copied().sum::<T>() / dn;
        let var = hrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for i in 0..d {
            let h = (hrow[i] - mean) * r;
            hrow[i] = h;
            orow[i] = h * gamma[i] + beta[i];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Indices of the `k` largest values, ties resolved toward the lower index,
/// returned in ascending index order.
pub fn topk_indices<T: PartialOrd + Copy>(v: &[T], k: usize) -> Result<Vec<usize>> {
    if k > v.len() {
        return Err(Error::Argument(alloc::format!(
            "topk: k = {} exceeds length {}",
            k,
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Cosine similarity of two equal-length vectors, accumulated in f64.
/// Two zero vectors are defined to have similarity 1.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64(), y.to_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (libm::sqrt(na) * libm::sqrt(nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_scalar_and_hand_cases() {
        let mut macs = 0;
        let p = matmul_metered(&t(&[1, 1], &[2.0]), &t(&[1, 1], &[3.0]), &mut macs).unwrap();
        assert_eq!(p.data(), &[6.0]);
        assert_eq!(macs, 1);
        // hand arithmetic: [[1*5+2*7, 1*6+2*8], [3*5+4*7, 3*6+4*8]]
        let p = matmul(&t(&[2, 2], &[1., 2., 3., 4.]), &t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
        assert_eq!(p.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_identity_is_exact() {
        let x = t(&[3, 3], &[0.1, -2.5, 3.25, 7.0, 1e-3, -0.0, 9.5, 4.4, -8.1]);
        let p = matmul(&Tensor::identity(3), &x).unwrap();
        assert_eq!(p, x);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn nt_and_tn_agree_with_plain_matmul() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[0.5, -1., 2., 0., 1., 3.]);
        let bt = t(&[2, 3], &[0.5, 2., 1., -1., 0., 3.]);
        let at = t(&[3, 2], &[1., 4., 2., 5., 3., 6.]);
        let reference = matmul(&a, &b).unwrap();
        let mut m1 = 0;
        let mut m2 = 0;
        assert_eq!(matmul_nt(&a, &bt, &mut m1).unwrap(), reference);
        assert_eq!(matmul_tn(&at, &b, &mut m2).unwrap(), reference);
        assert_eq!(m1, 12);
        assert_eq!(m2, 12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[1, 2], &[0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[1, 2], &[1000.0, 0.0]));
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1].abs() < 1e-6);
        // closed form: e^{ln 2} / (e^{ln 2} + 1) = 2/3
        let s = softmax_rows(&t(&[1, 2], &[core::f32::consts::LN_2, 0.0]));
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_all_masked_row_is_zero() {
        let s = softmax_rows(&t(&[2, 2], &[f32::NEG_INFINITY, f32::NEG_INFINITY, 0.0, 0.0]));
        assert_eq!(s.data(), &[0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn layernorm_examples() {
        let eps = LAYERNORM_EPS as f32;
        let out = layernorm(&t(&[4], &[1., 1., 1., 1.]), &[1.; 4], &[0.; 4], eps);
        assert_eq!(out.data(), &[0.0; 4]);
        let out = layernorm(&t(&[2], &[-1., 1.]), &[1.; 2], &[0.; 2], eps);
        assert!((out.data()[0] + 1.0).abs() < 1e-4 && (out.data()[1] - 1.0).abs() < 1e-4);
        // mean 1, var 1 -> xhat = [-1, 1] -> 2*xhat + 1 = [-1, 3]
        let out = layernorm(&t(&[2], &[0., 2.]), &[2.; 2], &[1.; 2], eps);
        assert!((out.data()[0] + 1.0).abs() < 1e-4 && (out.data()[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.4, 0.1, 0.3, 0.2], 2).unwrap(), vec![0, 2]);
        assert!(topk_indices(&[0.4, 0.1], 0).unwrap().is_empty());
        assert_eq!(topk_indices(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        assert!(matches!(topk_indices(&[1.0], 2), Err(Error::Argument(_))));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -1.0, -0.2, 0.0, 0.3, 1.5, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0f32, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0f32, 0.0], &[0.0, 1.0]), 0.0);
    }
}
