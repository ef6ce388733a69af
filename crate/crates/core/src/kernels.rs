//! Shared compute kernels: matrix multiply, reductions, broadcasts, im2col.
//!
//! Reductions accumulate sequentially in index order and parallel loops only
//! ever split over disjoint output regions, so results do not depend on the
//! worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Cap the global worker pool at `n` threads. Takes effect only if called
/// before the first parallel kernel runs; later calls report an error.
pub fn cap_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool already started: {e}")))
}

/// Index set a reduction collapses over; the complement is kept.
///
/// `PerSampleGroup` carries the *group size* in channels, so a size of `c`
/// reduces over whole samples and a size of 1 over single channels.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReduceSet {
    /// Everything: output is a scalar.
    All,
    /// Over batch and spatial axes: output is `(1, C, 1, 1)`.
    PerChannel,
    /// Over channels and spatial axes: output is `(N, 1, 1, 1)`.
    PerSample,
    /// Over spatial axes only: output is `(N, C, 1, 1)`.
    PerSampleChannel,
    /// Over channel groups of the given size and spatial axes: `(N, C/size, 1, 1)`.
    PerSampleGroup(usize),
}

impl ReduceSet {
    /// Shape of the reduced tensor.
    pub fn reduced_shape(&self, s: Shape4) -> Result<Shape4> {
        match *self {
            ReduceSet::All => Ok(Shape4::new(1, 1, 1, 1)),
            ReduceSet::PerChannel => Ok(Shape4::new(1, s.c, 1, 1)),
            ReduceSet::PerSample => Ok(Shape4::new(s.n, 1, 1, 1)),
            ReduceSet::PerSampleChannel => Ok(Shape4::new(s.n, s.c, 1, 1)),
            ReduceSet::PerSampleGroup(size) => {
                if size == 0 || s.c % size != 0 {
                    return Err(Error::Config(format!(
                        "group size {size} does not divide {} channels",
                        s.c
                    )));
                }
                Ok(Shape4::new(s.n, s.c / size, 1, 1))
            }
        }
    }

    /// Number of elements collapsed into each output slot.
    pub fn count(&self, s: Shape4) -> Result<usize> {
        Ok(s.numel() / self.reduced_shape(s)?.numel())
    }

    /// Map a full-tensor coordinate to its slot in the reduced tensor.
    #[inline]
    fn slot(&self, s: Shape4, n: usize, c: usize) -> usize {
        match *self {
            ReduceSet::All => 0,
            ReduceSet::PerChannel => c,
            ReduceSet::PerSample => n,
            ReduceSet::PerSampleChannel => n * s.c + c,
            ReduceSet::PerSampleGroup(size) => n * (s.c / size) + c / size,
        }
    }
}

/// Sum over the reduce set, sequentially in row-major order.
pub fn reduce_sum<S: Scalar>(x: &Tensor4<S>, set: ReduceSet) -> Result<Tensor4<S>> {
    let s = x.shape();
    let mut out = Tensor4::zeros(set.reduced_shape(s)?);
    let od = out.data_mut();
    let xd = x.data();
    let plane = s.h * s.w;
    let mut i = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let slot = set.slot(s, n, c);
            let mut acc = S::zero();
            for v in &xd[i..i + plane] {
                acc += *v;
            }
            od[slot] += acc;
            i += plane;
        }
    }
    Ok(out)
}

/// Broadcast a reduced tensor back to `target`, inverse of [`reduce_sum`].
pub fn expand<S: Scalar>(r: &Tensor4<S>, set: ReduceSet, target: Shape4) -> Result<Tensor4<S>> {
    let want = set.reduced_shape(target)?;
    if r.shape() != want {
        return Err(Error::Shape(format!(
            "expand source {} does not match reduced shape {want} of target {target}",
            r.shape()
        )));
    }
    let mut out = Tensor4::zeros(target);
    let od = out.data_mut();
    let rd = r.data();
    let plane = target.h * target.w;
    let mut i = 0;
    for n in 0..target.n {
        for c in 0..target.c {
            let v = rd[set.slot(target, n, c)];
            od[i..i + plane].fill(v);
            i += plane;
        }
    }
    Ok(out)
}

fn transposed_copy<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c = (or +=) op(a) * op(b)` on row-major slices.
///
/// `a` is `ar x ac` before the optional transpose, likewise `b`. Dimensions
/// must already agree; `c` has one row per row of `op(a)`. Output rows are
/// independent (and may be computed in parallel); the inner loop over the
/// contraction axis always runs in ascending order.
#[allow(clippy::too_many_arguments)]
pub fn matmul_slices<S: Scalar>(
    c: &mut [S],
    a: &[S],
    ar: usize,
    ac: usize,
    ta: bool,
    b: &[S],
    br: usize,
    bc: usize,
    tb: bool,
    acc: bool,
) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    debug_assert_eq!(k, kb, "matmul contraction dims");
    debug_assert_eq!(c.len(), m * n, "matmul output size");
    let a_eff: std::borrow::Cow<'_, [S]> =
        if ta { std::borrow::Cow::Owned(transposed_copy(a, ar, ac)) } else { std::borrow::Cow::Borrowed(a) };
    let b_eff: std::borrow::Cow<'_, [S]> =
        if tb { std::borrow::Cow::Owned(transposed_copy(b, br, bc)) } else { std::borrow::Cow::Borrowed(b) };
    let a_eff = &a_eff[..];
    let b_eff = &b_eff[..];

    let row = |crow: &mut [S], i: usize| {
        if !acc {
            crow.fill(S::zero());
        }
        let arow = &a_eff[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b_eff[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };

    if m > 1 && m * n * k >= 1 << 16 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(crow, i));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(crow, i);
        }
    }
}

/// Effective `(rows, cols)` of a matrix operand under optional transpose.
pub fn mat_dims<S: Scalar>(a: &Tensor4<S>, t: bool) -> (usize, usize) {
    let s = a.shape();
    if t {
        (s.c, s.n)
    } else {
        (s.n, s.c)
    }
}

/// `op(a) * op(b)` on matrix-shaped tensors.
pub fn matmul<S: Scalar>(
    a: &Tensor4<S>,
    ta: bool,
    b: &Tensor4<S>,
    tb: bool,
) -> Result<Tensor4<S>> {
    if !a.shape().is_matrix() || !b.shape().is_matrix() {
        return Err(Error::Shape(format!(
            "matmul expects matrix shapes, got {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = mat_dims(a, ta);
    let (kb, n) = mat_dims(b, tb);
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {}{} vs {}{}",
            a.shape(),
            if ta { "^T" } else { "" },
            b.shape(),
            if tb { "^T" } else { "" }
        )));
    }
    let mut out = Tensor4::zeros(Shape4::matrix(m, n));
    let (ar, ac) = (a.shape().n, a.shape().c);
    let (br, bc) = (b.shape().n, b.shape().c);
    matmul_slices(out.data_mut(), a.data(), ar, ac, ta, b.data(), br, bc, tb, false);
    Ok(out)
}

/// Convolution output length along one axis; exact division only.
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!("kernel {k} larger than padded input {padded}")));
    }
    let span = padded - k;
    if span % stride != 0 {
        return Err(Error::Config(format!(
            "conv geometry not integral: (({input} + 2*{pad}) - {k}) not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// Pooling output length with ceil rounding; partial windows are allowed as
/// long as each one starts inside the real input or its left padding.
pub fn pool_out_len(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if pad >= k {
        return Err(Error::Config(format!("pool padding {pad} must be smaller than window {k}")));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!("pool window {k} larger than padded input {padded}")));
    }
    let mut out = (padded - k).div_ceil(stride) + 1;
    // A window starting at or past the end of the real+left-pad extent would
    // see no data; drop it (matches common ceil-mode pooling semantics).
    if (out - 1) * stride >= input + pad {
        out -= 1;
    }
    Ok(out)
}

/// Unfold one sample `(C, h, w)` into a `(C*kh*kw, oh*ow)` column matrix,
/// zero-filling padded positions.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    let l = oh * ow;
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(col.len(), c * kh * kw * l);
    col.fill(S::zero());
    for ch in 0..c {
        let chan = &x[ch * h * w..(ch + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let crow = &mut col[((ch * kh + dy) * kw + dx) * l..][..l];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &chan[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        crow[oy * ow + ox] = row[ix as usize];
                    }
                }
            }
        }
    }
}

/// Permute `(N, C, H, W)` into `(N*H*W, C)` channel vectors, one row per
/// spatial position, positions in `(n, h, w)` row-major order.
pub fn channel_rows<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let s = x.shape();
    let mut out = Tensor4::zeros(Shape4::matrix(s.n * s.h * s.w, s.c));
    let od = out.data_mut();
    let xd = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    od[((n * s.h + h) * s.w + w) * s.c + c] = xd[s.idx(n, c, h, w)];
                }
            }
        }
    }
    out
}

/// Inverse of [`channel_rows`].
pub fn channel_rows_inv<S: Scalar>(m: &Tensor4<S>, target: Shape4) -> Tensor4<S> {
    let s = target;
    let mut out = Tensor4::zeros(s);
    let od = out.data_mut();
    let md = m.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    od[s.idx(n, c, h, w)] = md[((n * s.h + h) * s.w + w) * s.c + c];
                }
            }
        }
    }
    out
}

/// Cut `(N, C, H, W)` into non-overlapping `ph x pw` patches, each flattened
/// channel-major into a row; patch rows in `(n, patch_y, patch_x)` order.
pub fn patch_rows<S: Scalar>(x: &Tensor4<S>, ph: usize, pw: usize) -> Tensor4<S> {
    let s = x.shape();
    let (py, px) = (s.h / ph, s.w / pw);
    let d = s.c * ph * pw;
    let mut out = Tensor4::zeros(Shape4::matrix(s.n * py * px, d));
    let od = out.data_mut();
    let xd = x.data();
    for n in 0..s.n {
        for gy in 0..py {
            for gx in 0..px {
                let row = (n * py + gy) * px + gx;
                for c in 0..s.c {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            od[row * d + (c * ph + dy) * pw + dx] =
                                xd[s.idx(n, c, gy * ph + dy, gx * pw + dx)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patch_rows`].
pub fn patch_rows_inv<S: Scalar>(
    m: &Tensor4<S>,
    target: Shape4,
    ph: usize,
    pw: usize,
) -> Tensor4<S> {
    let s = target;
    let (py, px) = (s.h / ph, s.w / pw);
    let d = s.c * ph * pw;
    let mut out = Tensor4::zeros(s);
    let od = out.data_mut();
    let md = m.data();
    for n in 0..s.n {
        for gy in 0..py {
            for gx in 0..px {
                let row = (n * py + gy) * px + gx;
                for c in 0..s.c {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            od[s.idx(n, c, gy * ph + dy, gx * pw + dx)] =
                                md[row * d + (c * ph + dy) * pw + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add a column-matrix gradient back onto one sample `(C, h, w)`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<S: Scalar>(
    dx: &mut [S],
    c: usize,
    h: usize,
    w: usize,
    dcol: &[S],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let l = oh * ow;
    debug_assert_eq!(dx.len(), c * h * w);
    debug_assert_eq!(dcol.len(), c * kh * kw * l);
    for ch in 0..c {
        let chan = &mut dx[ch * h * w..(ch + 1) * h * w];
        for dy in 0..kh {
            for dxk in 0..kw {
                let crow = &dcol[((ch * kh + dy) * kw + dxk) * l..][..l];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + dxk) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[ix as usize] += crow[oy * ow + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduce_then_expand_shapes() {
        let x = Tensor4::<f64>::ones(Shape4::new(2, 4, 3, 3));
        for set in [
            ReduceSet::All,
            ReduceSet::PerChannel,
            ReduceSet::PerSample,
            ReduceSet::PerSampleChannel,
            ReduceSet::PerSampleGroup(2),
        ] {
            let r = reduce_sum(&x, set).unwrap();
            assert_eq!(r.shape(), set.reduced_shape(x.shape()).unwrap());
            let count = set.count(x.shape()).unwrap() as f64;
            assert!(r.data().iter().all(|&v| v == count));
            let e = expand(&r, set, x.shape()).unwrap();
            assert!(e.data().iter().all(|&v| v == count));
        }
    }

    #[test]
    fn group_size_must_divide_channels() {
        assert!(ReduceSet::PerSampleGroup(3).reduced_shape(Shape4::new(1, 4, 1, 1)).is_err());
    }

    #[test]
    fn matmul_small_known_product() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor4::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor4::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, false, &b, false).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transpose_flags_agree_with_explicit_transpose() {
        let a = Tensor4::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor4::matrix(2, 3, vec![7.0, 8.0, 9.0, 1.0, 2.0, 3.0]).unwrap();
        // a^T (3x2) * b (2x3) -> 3x3
        let c = matmul(&a, true, &b, false).unwrap();
        let at = Tensor4::matrix(3, 2, transposed_copy(a.data(), 2, 3)).unwrap();
        let want = matmul(&at, false, &b, false).unwrap();
        assert_eq!(c.data(), want.data());
        // a (2x3) * b^T (3x2) -> 2x2
        let c = matmul(&a, false, &b, true).unwrap();
        let bt = Tensor4::matrix(3, 2, transposed_copy(b.data(), 2, 3)).unwrap();
        let want = matmul(&a, false, &bt, false).unwrap();
        assert_eq!(c.data(), want.data());
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Tensor4::<f64>::ones(Shape4::new(2, 3, 1, 1));
        let b = Tensor4::<f64>::ones(Shape4::new(2, 3, 1, 1));
        assert!(matmul(&a, false, &b, false).is_err());
        let spatial = Tensor4::<f64>::ones(Shape4::new(2, 3, 2, 2));
        assert!(matmul(&spatial, false, &b, true).is_err());
    }

    #[test]
    fn conv_lengths_are_exact_or_error() {
        assert_eq!(conv_out_len(32, 5, 1, 2).unwrap(), 32);
        assert_eq!(conv_out_len(4, 4, 1, 0).unwrap(), 1);
        assert!(conv_out_len(5, 2, 2, 0).is_err()); // (5-2)/2 not integral
    }

    #[test]
    fn pool_lengths_use_ceil_rounding() {
        // 3x3 window, stride 2, no padding: 32 -> 16 -> 8 -> 4
        assert_eq!(pool_out_len(32, 3, 2, 0).unwrap(), 16);
        assert_eq!(pool_out_len(16, 3, 2, 0).unwrap(), 8);
        assert_eq!(pool_out_len(8, 3, 2, 0).unwrap(), 4);
        // exact cases unchanged
        assert_eq!(pool_out_len(4, 4, 1, 0).unwrap(), 1);
        assert_eq!(pool_out_len(4, 2, 2, 0).unwrap(), 2);
    }

    #[test]
    fn im2col_identity_kernel_geometry() {
        // 1x1 kernel, stride 1: columns are just the pixels in order.
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut col = vec![0.0; 12];
        im2col(&x, 3, 2, 2, 1, 1, 1, 0, 2, 2, &mut col);
        assert_eq!(col, x);
    }
}
