//! Forward kernels on plain tensors. The autodiff graph calls these for its
//! forward pass, and callers that need no gradients use them directly.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// `c = alpha * op(a) * op(b) + beta * c` for one `m x n` block, where
/// `op(a)` is `m x k` (stored transposed when `ta`), `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    let av = if ta {
        ArrayView2::from_shape((k, m), a).expect("gemm a").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let bv = if tb {
        ArrayView2::from_shape((n, k), b).expect("gemm b").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(alpha, &av, &bv, beta, &mut cv);
}

/// Geometry of a (possibly batched, possibly transposed) matrix product.
#[derive(Clone, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatmulDims> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let b_batched = !b_batch.is_empty();
    if b_batched && a_batch != b_batch {
        return Err(mismatch());
    }
    let mut out_shape = a_batch.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulDims {
        batch: a_batch.iter().product(),
        b_batched,
        m,
        k,
        n,
        out_shape,
    })
}

/// Matrix product over the last two axes; leading axes are batch axes and must
/// agree, except that a rank-2 right operand is shared across the batch.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, b, false, false)
}

/// [`matmul`] with optional transposition of either operand's last two axes.
pub fn matmul_ex<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let dims = matmul_dims(a.shape(), b.shape(), ta, tb)?;
    let mut out = Tensor::zeros(dims.out_shape.clone());
    let (sa, sb, sc) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
    for bi in 0..dims.batch {
        let bo = if dims.b_batched { bi * sb } else { 0 };
        gemm(
            dims.m,
            dims.k,
            dims.n,
            T::one(),
            &a.data()[bi * sa..(bi + 1) * sa],
            ta,
            &b.data()[bo..bo + sb],
            tb,
            T::zero(),
            &mut out.data_mut()[bi * sc..(bi + 1) * sc],
        );
    }
    Ok(out)
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` when read through the broadcast `out` shape.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output position with the matching flat offsets into both inputs.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    loop {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        if o >= numel {
            break;
        }
        let mut d = rank - 1;
        loop {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape(), op)?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut res = Tensor::zeros(out.clone());
    let (ad, bd) = (a.data(), b.data());
    let rd = res.data_mut();
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| rd[o] = f(ad[ia], bd[ib]));
    Ok(res)
}

/// Zero-mean, unit-variance rows over the last axis. Returns the normalized
/// values and the per-row inverse standard deviation.
pub(crate) fn normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let d = x.last_dim();
    if d == 0 || x.rank() == 0 {
        return dim_err("layer_norm", "last axis has length 0");
    }
    let inv_d = T::one() / T::of(d as f64);
    let mut out = x.clone();
    let mut inv_stds = Vec::with_capacity(x.rows());
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let mut var = T::zero();
        for v in row.iter_mut() {
            *v -= mean;
            var += *v * *v;
        }
        let inv_std = T::one() / (var * inv_d + eps).sqrt();
        for v in row.iter_mut() {
            *v *= inv_std;
        }
        inv_stds.push(inv_std);
    }
    Ok((out, inv_stds))
}

/// Layer normalization over the last axis: biased variance, `eps` inside the
/// square root, followed by the affine map `gain * x_hat + bias`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (xhat, _) = normalize_rows(x, eps)?;
    let scaled = broadcast_binary(&xhat, gain, "layer_norm", |a, g| a * g)?;
    broadcast_binary(&scaled, bias, "layer_norm", |a, b| a + b)
}

/// Additive-mask softmax over the last axis. `mask` holds 0 (visible) or −∞
/// (hidden) and either matches `logits` or its trailing axes.
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let d = logits.last_dim();
    if d == 0 {
        return dim_err("masked_softmax", "last axis has length 0");
    }
    if let Some(m) = mask {
        let ls = logits.shape();
        let ms = m.shape();
        if ms.len() > ls.len() || ls[ls.len() - ms.len()..] != *ms {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: ls.to_vec(),
                rhs: ms.to_vec(),
            });
        }
    }
    let mut out = logits.clone();
    let mask_data = mask.map(|m| m.data());
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        if let Some(md) = mask_data {
            let off = (r * d) % md.len();
            for (v, &mv) in row.iter_mut().zip(&md[off..off + d]) {
                *v += mv;
            }
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            return Err(Error::EmptyAttentionRow { row: r });
        }
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    ReluSquared,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Elu => {
                if z >= T::zero() {
                    z
                } else {
                    z.exp() - T::one()
                }
            }
            Activation::ReluSquared => {
                let r = z.max(T::zero());
                r * r
            }
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
        }
    }

    #[inline]
    pub(crate) fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Elu => {
                if z >= T::zero() {
                    T::one()
                } else {
                    z.exp()
                }
            }
            Activation::ReluSquared => T::of(2.0) * z.max(T::zero()),
            Activation::Sigmoid => {
                let s = self.apply(z);
                s * (T::one() - s)
            }
        }
    }
}

pub fn activate<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|z| kind.apply(z))
}

pub(crate) fn check_rotary_width(r: usize, head_dim: usize) -> Result<()> {
    if r % 2 != 0 {
        return Err(Error::Config(format!("rotary width {r} must be even")));
    }
    if r > head_dim {
        return Err(Error::Config(format!(
            "rotary width {r} exceeds head dimension {head_dim}"
        )));
    }
    Ok(())
}

/// Rotates channel pairs `(2j, 2j+1)`, `j < r/2`, of every row along axis -2
/// by `sign * position * base^(-2j/r)`. Channels `>= r` pass through.
pub(crate) fn rope_rows<T: Scalar>(
    x: &Tensor<T>,
    positions: &[usize],
    r: usize,
    base: f64,
    sign: f64,
) -> Result<Tensor<T>> {
    let d = x.last_dim();
    check_rotary_width(r, d)?;
    let t = x.axis_rows();
    if positions.len() != t {
        return dim_err(
            "rope_partial",
            format!("{} positions for {} rows", positions.len(), t),
        );
    }
    let mut out = x.clone();
    if r == 0 {
        return Ok(out);
    }
    let freqs: Vec<f64> = (0..r / 2)
        .map(|j| base.powf(-2.0 * j as f64 / r as f64))
        .collect();
    let mut table = Vec::with_capacity(t * r / 2);
    for &p in positions {
        for &f in &freqs {
            let (s, c) = (sign * p as f64 * f).sin_cos();
            table.push((T::of(c), T::of(s)));
        }
    }
    for (ri, row) in out.data_mut().chunks_mut(d).enumerate() {
        let ti = ri % t;
        for j in 0..r / 2 {
            let (c, s) = table[ti * (r / 2) + j];
            let (a, b) = rotate_pair(row[2 * j], row[2 * j + 1], c, s);
            row[2 * j] = a;
            row[2 * j + 1] = b;
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn rotate_pair<T: Scalar>(a: T, b: T, cos: T, sin: T) -> (T, T) {
    (a * cos - b * sin, a * sin + b * cos)
}

/// Partial rotary embedding of a single row at one sequence position.
pub fn rope_partial<T: Scalar>(x: &Tensor<T>, position: usize, r: usize, base: f64) -> Result<Tensor<T>> {
    let rows = x.axis_rows();
    rope_rows(x, &vec![position; rows], r, base, 1.0)
}

/// Euclidean norm of every row over the last axis.
pub fn row_norms<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let d = x.last_dim();
    if d == 0 {
        return vec![T::zero(); 0];
    }
    x.data()
        .chunks(d)
        .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
