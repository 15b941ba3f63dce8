//! Raw numeric kernels over flat row-major buffers.

use super::Real;
use crate::error::{shape_err, Result};

/// `c = op(a) * op(b) + beta * c`, where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// With `trans_a`, `a` is stored as `k x m`; with `trans_b`, `b` is stored as
/// `n x k`. `c` is always `m x n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    beta: T,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = *v * beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents checked above; strides describe the row-major layouts
    // documented for each operand, and `c` is a distinct mutable slice.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strides of `src` expressed over the axes of `out` (zero on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < off || src[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

enum Access {
    Same,
    Scalar,
    Suffix(usize),
    Strided(Vec<usize>),
}

fn access_for(src: &[usize], out: &[usize]) -> Access {
    let numel: usize = src.iter().product();
    if src == out {
        Access::Same
    } else if numel == 1 {
        Access::Scalar
    } else {
        // src equals the trailing axes of out (ignoring leading 1s in src)
        let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            Access::Suffix(numel)
        } else {
            Access::Strided(broadcast_strides(src, out))
        }
    }
}

/// Visits every element of a broadcast over `out`, yielding
/// `(out_index, a_index, b_index)`.
pub(crate) fn for_each_broadcast2(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    let acc_a = access_for(a, out);
    let acc_b = access_for(b, out);
    match (&acc_a, &acc_b) {
        (Access::Same, Access::Same) => (0..numel).for_each(|i| f(i, i, i)),
        (Access::Same, Access::Scalar) => (0..numel).for_each(|i| f(i, i, 0)),
        (Access::Scalar, Access::Same) => (0..numel).for_each(|i| f(i, 0, i)),
        (Access::Same, Access::Suffix(n)) => (0..numel).for_each(|i| f(i, i, i % n)),
        (Access::Suffix(n), Access::Same) => (0..numel).for_each(|i| f(i, i % n, i)),
        _ => {
            let sa = match acc_a {
                Access::Strided(s) => s,
                _ => broadcast_strides(a, out),
            };
            let sb = match acc_b {
                Access::Strided(s) => s,
                _ => broadcast_strides(b, out),
            };
            let rank = out.len();
            let mut idx = vec![0usize; rank];
            let (mut ia, mut ib) = (0usize, 0usize);
            for o in 0..numel {
                f(o, ia, ib);
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    ia += sa[d];
                    ib += sb[d];
                    if idx[d] < out[d] {
                        break;
                    }
                    ia -= sa[d] * out[d];
                    ib -= sb[d] * out[d];
                    idx[d] = 0;
                }
            }
        }
    }
}

/// Sums `grad` (shaped `out`) down to `target` under broadcasting rules.
pub(crate) fn reduce_to_shape<T: Real>(grad: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    if out == target {
        return grad.to_vec();
    }
    let mut res = vec![T::zero(); target.iter().product()];
    for_each_broadcast2(out, out, target, |o, _, t| {
        res[t] = res[t] + grad[o];
    });
    res
}

/// Materialises `src` broadcast up to `out`.
pub(crate) fn expand<T: Real>(src: &[T], src_shape: &[usize], out: &[usize]) -> Vec<T> {
    let mut res = vec![T::zero(); out.iter().product()];
    for_each_broadcast2(out, out, src_shape, |o, _, s| res[o] = src[s]);
    res
}

/// Generic axis permutation: `out.shape[i] = in.shape[perm[i]]`.
pub(crate) fn permute<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = src.len();
    let mut out = Vec::with_capacity(numel);
    if rank == 0 || numel == 0 {
        return src.to_vec();
    }
    // innermost axis handled in a tight loop
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let outer = numel / inner;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// (outer, axis extent, inner) decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for j in 0..n {
                y[at(j)] = y[at(j)] * inv;
            }
        }
    }
    y
}

pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, ho*wo]` columns.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
