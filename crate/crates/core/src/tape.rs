//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! replays the record once in reverse. Tapes are cheap and rebuilt for every
//! forward pass, which lets layers make data-dependent choices (per-sample
//! context parameters, skipped mixture components) without any graph
//! bookkeeping.
//!
//! Gradient conventions at non-differentiable points: `relu` uses subgradient
//! 0 at the origin, and max-pooling routes the gradient to the first maximal
//! element of each window in row-major order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{self, ReduceSet};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a reduction combines the elements of each index set.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Pooling flavor for [`Tape::pool2d`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Everything a backward rule may look at.
struct BackCtx<'a, S: Scalar> {
    inputs: &'a [&'a Tensor4<S>],
    output: &'a Tensor4<S>,
    grad: &'a Tensor4<S>,
    needs: &'a [bool],
}

type BackFn<S> = Box<dyn Fn(&BackCtx<'_, S>) -> Vec<Option<Tensor4<S>>>>;

struct Node<S: Scalar> {
    value: Tensor4<S>,
    parents: Vec<usize>,
    requires_grad: bool,
    back: Option<BackFn<S>>,
}

/// Operation record for one forward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor4<S>>>,
    ran_backward: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), ran_backward: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed for `v` during the forward pass.
    pub fn value(&self, v: Var) -> &Tensor4<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// reached it. Absent means "not reachable" (i.e. zero) or grads not
    /// required for this node.
    pub fn grad(&self, v: Var) -> Option<&Tensor4<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // Note: values are allowed to go non-finite on the tape; a diverging run
    // must surface as a NaN loss the training loop can report, not a panic.
    fn push(&mut self, value: Tensor4<S>, parents: Vec<usize>, back: Option<BackFn<S>>) -> Var {
        let requires_grad =
            !parents.is_empty() && parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node { value, parents, requires_grad, back });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor; its `requires_grad` flag decides whether
    /// gradients accumulate for it.
    pub fn leaf(&mut self, t: Tensor4<S>) -> Var {
        let rg = t.requires_grad;
        debug_assert!(t.all_finite(), "non-finite leaf recorded on tape");
        self.nodes.push(Node { value: t, parents: Vec::new(), requires_grad: rg, back: None });
        Var(self.nodes.len() - 1)
    }

    /// Record an input that never receives gradients.
    pub fn constant(&mut self, t: Tensor4<S>) -> Var {
        self.leaf(t.requires_grad(false))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<Shape4> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::Shape(format!("{op} operands differ: {sa} vs {sb}")));
        }
        Ok(sa)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|ctx: &BackCtx<'_, S>| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.clone()),
                ]
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|ctx: &BackCtx<'_, S>| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.map(|g| -g)),
                ]
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|ctx: &BackCtx<'_, S>| {
                vec![
                    ctx.needs[0].then(|| zip(ctx.grad, ctx.inputs[1], |g, y| g * y)),
                    ctx.needs[1].then(|| zip(ctx.grad, ctx.inputs[0], |g, x| g * x)),
                ]
            })),
        ))
    }

    /// Elementwise quotient; the caller keeps the denominator away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|ctx: &BackCtx<'_, S>| {
                vec![
                    ctx.needs[0].then(|| zip(ctx.grad, ctx.inputs[1], |g, y| g / y)),
                    ctx.needs[1].then(|| {
                        zip3(ctx.grad, ctx.output, ctx.inputs[1], |g, o, y| -(g * o / y))
                    }),
                ]
            })),
        ))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: &BackCtx<'_, S>| vec![ctx.needs[0].then(|| ctx.grad.clone())])),
        )
    }

    pub fn mul_scalar(&mut self, a: Var, c: S) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * c);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| ctx.grad.map(|g| g * c))]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| {
                    zip(ctx.grad, ctx.inputs[0], |g, x| if x > S::zero() { g } else { S::zero() })
                })]
            })),
        )
    }

    /// Elementwise square root; inputs must be positive for a finite gradient.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.sqrt());
        let half = S::cast(0.5);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| zip(ctx.grad, ctx.output, |g, o| half * g / o))]
            })),
        )
    }

    /// Elementwise reciprocal square root, `x^(-1/2)`.
    pub fn rsqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.sqrt().recip());
        let mhalf = S::cast(-0.5);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| zip(ctx.grad, ctx.output, |g, o| mhalf * g * o * o * o))]
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.exp());
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| zip(ctx.grad, ctx.output, |g, o| g * o))]
            })),
        )
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(softplus_val);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| zip(ctx.grad, ctx.inputs[0], |g, x| g * sigmoid_val(x)))]
            })),
        )
    }

    // ---- reductions and broadcasts ---------------------------------------

    pub fn reduce(&mut self, a: Var, set: ReduceSet, how: Reduction) -> Result<Var> {
        let shape = self.nodes[a.0].value.shape();
        let count = set.count(shape)?;
        let mut v = kernels::reduce_sum(&self.nodes[a.0].value, set)?;
        if how == Reduction::Mean {
            let inv = S::cast(1.0 / count as f64);
            for x in v.data_mut() {
                *x *= inv;
            }
        }
        Ok(self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| {
                    let mut g = kernels::expand(ctx.grad, set, shape).expect("reduce backward");
                    if how == Reduction::Mean {
                        let inv = S::cast(1.0 / count as f64);
                        for x in g.data_mut() {
                            *x *= inv;
                        }
                    }
                    g
                })]
            })),
        ))
    }

    /// Broadcast a reduced tensor back over `target`; adjoint of `reduce` with
    /// `Reduction::Sum`.
    pub fn expand(&mut self, a: Var, set: ReduceSet, target: Shape4) -> Result<Var> {
        let v = kernels::expand(&self.nodes[a.0].value, set, target)?;
        Ok(self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| {
                    kernels::reduce_sum(ctx.grad, set).expect("expand backward")
                })]
            })),
        ))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let v = kernels::matmul(&self.nodes[a.0].value, ta, &self.nodes[b.0].value, tb)?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let da = ctx.needs[0].then(|| {
                    if ta {
                        kernels::matmul(b, tb, g, true)
                    } else {
                        kernels::matmul(g, false, b, !tb)
                    }
                    .expect("matmul backward dA")
                });
                let db = ctx.needs[1].then(|| {
                    if tb {
                        kernels::matmul(g, true, a, ta)
                    } else {
                        kernels::matmul(a, !ta, g, false)
                    }
                    .expect("matmul backward dB")
                });
                vec![da, db]
            })),
        ))
    }

    /// Row `r` of a matrix as a `(1, cols)` matrix.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let s = self.nodes[a.0].value.shape();
        if !s.is_matrix() || r >= s.n {
            return Err(Error::Shape(format!("row {r} out of matrix {s}")));
        }
        let v = Tensor4::matrix(1, s.c, self.nodes[a.0].value.row(r).to_vec())?;
        Ok(self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| {
                    let mut dx = Tensor4::zeros(s);
                    dx.data_mut()[r * s.c..(r + 1) * s.c].copy_from_slice(ctx.grad.data());
                    dx
                })]
            })),
        ))
    }

    /// Column `j` of a matrix as a `(rows, 1)` matrix.
    pub fn col(&mut self, a: Var, j: usize) -> Result<Var> {
        let s = self.nodes[a.0].value.shape();
        if !s.is_matrix() || j >= s.c {
            return Err(Error::Shape(format!("col {j} out of matrix {s}")));
        }
        let src = self.nodes[a.0].value.data();
        let v = Tensor4::matrix(s.n, 1, (0..s.n).map(|r| src[r * s.c + j]).collect())?;
        Ok(self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| {
                    let mut dx = Tensor4::zeros(s);
                    let gd = ctx.grad.data();
                    let dd = dx.data_mut();
                    for r in 0..s.n {
                        dd[r * s.c + j] = gd[r];
                    }
                    dx
                })]
            })),
        ))
    }

    /// Select rows of a `(T, E)` table by index; gradients scatter-add back,
    /// so repeated indices accumulate.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.nodes[table.0].value.shape();
        if !s.is_matrix() {
            return Err(Error::Shape(format!("gather_rows expects a matrix, got {s}")));
        }
        for &id in ids {
            if id >= s.n {
                return Err(Error::Input(format!("row index {id} out of table with {} rows", s.n)));
            }
        }
        let src = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * s.c);
        for &id in ids {
            data.extend_from_slice(&src[id * s.c..(id + 1) * s.c]);
        }
        let v = Tensor4::matrix(ids.len(), s.c, data)?;
        let ids: Vec<usize> = ids.to_vec();
        Ok(self.push(
            v,
            vec![table.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| {
                    let mut dt = Tensor4::zeros(s);
                    let gd = ctx.grad.data();
                    let dd = dt.data_mut();
                    for (n, &id) in ids.iter().enumerate() {
                        let row = &gd[n * s.c..(n + 1) * s.c];
                        for (slot, &g) in dd[id * s.c..(id + 1) * s.c].iter_mut().zip(row) {
                            *slot += g;
                        }
                    }
                    dt
                })]
            })),
        ))
    }

    /// View with a different shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: Shape4) -> Result<Var> {
        let old = self.nodes[a.0].value.shape();
        let v = self.nodes[a.0].value.clone().reshaped(shape)?;
        Ok(self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| {
                    ctx.grad.clone().reshaped(old).expect("reshape backward")
                })]
            })),
        ))
    }

    /// `(N, C, H, W)` viewed as `(N, C*H*W)` rows, for a classifier head.
    pub fn flatten_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.shape();
        self.reshape(a, Shape4::matrix(s.n, s.c * s.h * s.w))
    }

    /// Permute `(N, C, H, W)` into `(N*H*W, C)` channel vectors, one row per
    /// spatial position, positions in `(n, h, w)` row-major order.
    pub fn channel_vectors(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.shape();
        let v = kernels::channel_rows(&self.nodes[a.0].value);
        Ok(self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| kernels::channel_rows_inv(ctx.grad, s))]
            })),
        ))
    }

    /// Inverse of [`Tape::channel_vectors`]: rows back into `(N, C, H, W)`.
    pub fn channel_vectors_rev(&mut self, a: Var, target: Shape4) -> Result<Var> {
        let s = self.nodes[a.0].value.shape();
        if !s.is_matrix() || s.n != target.n * target.h * target.w || s.c != target.c {
            return Err(Error::Shape(format!(
                "channel vector matrix {s} does not match target {target}"
            )));
        }
        let v = kernels::channel_rows_inv(&self.nodes[a.0].value, target);
        Ok(self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| kernels::channel_rows(ctx.grad))]
            })),
        ))
    }

    /// Cut `(N, C, H, W)` into non-overlapping `ph x pw` patches and flatten
    /// each into a row of length `C*ph*pw` (channel-major). Patch rows are
    /// ordered `(n, patch_y, patch_x)` row-major.
    pub fn patch_vectors(&mut self, a: Var, ph: usize, pw: usize) -> Result<Var> {
        let s = self.nodes[a.0].value.shape();
        if ph == 0 || pw == 0 || s.h % ph != 0 || s.w % pw != 0 {
            return Err(Error::Config(format!(
                "patch {ph}x{pw} does not tile spatial extent {}x{}",
                s.h, s.w
            )));
        }
        let v = kernels::patch_rows(&self.nodes[a.0].value, ph, pw);
        Ok(self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| kernels::patch_rows_inv(ctx.grad, s, ph, pw))]
            })),
        ))
    }

    /// Inverse of [`Tape::patch_vectors`].
    pub fn patch_vectors_rev(
        &mut self,
        a: Var,
        target: Shape4,
        ph: usize,
        pw: usize,
    ) -> Result<Var> {
        let s = self.nodes[a.0].value.shape();
        if ph == 0 || pw == 0 || target.h % ph != 0 || target.w % pw != 0 {
            return Err(Error::Config(format!(
                "patch {ph}x{pw} does not tile spatial extent {}x{}",
                target.h, target.w
            )));
        }
        let patches = target.n * (target.h / ph) * (target.w / pw);
        if !s.is_matrix() || s.n != patches || s.c != target.c * ph * pw {
            return Err(Error::Shape(format!(
                "patch matrix {s} does not match target {target} with {ph}x{pw} patches"
            )));
        }
        let v = kernels::patch_rows_inv(&self.nodes[a.0].value, target, ph, pw);
        Ok(self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| kernels::patch_rows(ctx.grad, ph, pw))]
            })),
        ))
    }

    // ---- structured ops --------------------------------------------------

    /// 2-D cross-correlation with zero padding. Kernel is `(Cout, Cin, kh, kw)`;
    /// spatial geometry must divide exactly (no implicit truncation).
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        let xs = self.nodes[x.0].value.shape();
        let ks = self.nodes[kernel.0].value.shape();
        if ks.c != xs.c {
            return Err(Error::Shape(format!(
                "conv kernel expects {} input channels, got {}",
                ks.c, xs.c
            )));
        }
        let oh = kernels::conv_out_len(xs.h, ks.h, stride, pad)?;
        let ow = kernels::conv_out_len(xs.w, ks.w, stride, pad)?;
        let (cin, kh, kw, cout) = (ks.c, ks.h, ks.w, ks.n);
        let ckk = cin * kh * kw;
        let l = oh * ow;

        let mut out = Tensor4::zeros(Shape4::new(xs.n, cout, oh, ow));
        {
            let xv = &self.nodes[x.0].value;
            let kv = &self.nodes[kernel.0].value;
            // samples are independent; each worker gets its own column buffer
            out.data_mut().par_chunks_mut(cout * l).enumerate().for_each(|(n, on)| {
                let mut col = vec![S::zero(); ckk * l];
                let xn = &xv.data()[n * cin * xs.h * xs.w..(n + 1) * cin * xs.h * xs.w];
                kernels::im2col(xn, cin, xs.h, xs.w, kh, kw, stride, pad, oh, ow, &mut col);
                kernels::matmul_slices(on, kv.data(), cout, ckk, false, &col, ckk, l, false, false);
            });
        }

        Ok(self.push(
            out,
            vec![x.0, kernel.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                let (xv, kv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let dx = ctx.needs[0].then(|| {
                    let mut dx = Tensor4::zeros(xs);
                    dx.data_mut()
                        .par_chunks_mut(cin * xs.h * xs.w)
                        .enumerate()
                        .for_each(|(n, dxn)| {
                            let gn = &g.data()[n * cout * l..(n + 1) * cout * l];
                            let mut dcol = vec![S::zero(); ckk * l];
                            kernels::matmul_slices(
                                &mut dcol,
                                kv.data(),
                                cout,
                                ckk,
                                true,
                                gn,
                                cout,
                                l,
                                false,
                                false,
                            );
                            kernels::col2im_add(
                                dxn, cin, xs.h, xs.w, &dcol, kh, kw, stride, pad, oh, ow,
                            );
                        });
                    dx
                });
                let dk = ctx.needs[1].then(|| {
                    // accumulate over samples in index order
                    let mut dk = Tensor4::zeros(ks);
                    let mut col = vec![S::zero(); ckk * l];
                    for n in 0..xs.n {
                        let xn = &xv.data()[n * cin * xs.h * xs.w..(n + 1) * cin * xs.h * xs.w];
                        kernels::im2col(xn, cin, xs.h, xs.w, kh, kw, stride, pad, oh, ow, &mut col);
                        let gn = &g.data()[n * cout * l..(n + 1) * cout * l];
                        kernels::matmul_slices(
                            dk.data_mut(),
                            gn,
                            cout,
                            l,
                            false,
                            &col,
                            ckk,
                            l,
                            true,
                            true,
                        );
                    }
                    dk
                });
                vec![dx, dk]
            })),
        ))
    }

    /// 2-D pooling with ceil-mode geometry (partial edge windows allowed).
    ///
    /// Max windows ignore padded/out-of-range cells; average windows divide by
    /// the number of window cells inside the padded extent, counting explicit
    /// zero padding but not ceil-mode overhang.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize, pad: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(Error::Config("pool window and stride must be positive".into()));
        }
        let xs = self.nodes[x.0].value.shape();
        let oh = kernels::pool_out_len(xs.h, k, stride, pad)?;
        let ow = kernels::pool_out_len(xs.w, k, stride, pad)?;
        let os = Shape4::new(xs.n, xs.c, oh, ow);
        let mut out = Tensor4::zeros(os);
        let mut argmax: Vec<usize> = if kind == PoolKind::Max { vec![0; os.numel()] } else { Vec::new() };

        {
            let xd = self.nodes[x.0].value.data();
            let od = out.data_mut();
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let base = xs.idx(n, c, 0, 0);
                    let chan = &xd[base..base + xs.h * xs.w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let oi = os.idx(n, c, oy, ox);
                            match kind {
                                PoolKind::Max => {
                                    let mut best = S::neg_infinity();
                                    let mut best_i = 0usize;
                                    for dy in 0..k {
                                        let iy = (oy * stride + dy) as isize - pad as isize;
                                        if iy < 0 || iy >= xs.h as isize {
                                            continue;
                                        }
                                        for dx in 0..k {
                                            let ix = (ox * stride + dx) as isize - pad as isize;
                                            if ix < 0 || ix >= xs.w as isize {
                                                continue;
                                            }
                                            let v = chan[iy as usize * xs.w + ix as usize];
                                            // strict '>' keeps the first maximum
                                            if v > best {
                                                best = v;
                                                best_i =
                                                    base + iy as usize * xs.w + ix as usize;
                                            }
                                        }
                                    }
                                    od[oi] = best;
                                    argmax[oi] = best_i;
                                }
                                PoolKind::Avg => {
                                    let mut acc = S::zero();
                                    let mut count = 0usize;
                                    for dy in 0..k {
                                        let iy = (oy * stride + dy) as isize - pad as isize;
                                        let in_pad = iy >= -(pad as isize)
                                            && iy < (xs.h + pad) as isize;
                                        for dx in 0..k {
                                            let ix = (ox * stride + dx) as isize - pad as isize;
                                            let in_pad = in_pad
                                                && ix >= -(pad as isize)
                                                && ix < (xs.w + pad) as isize;
                                            if in_pad {
                                                count += 1;
                                            }
                                            if iy >= 0
                                                && iy < xs.h as isize
                                                && ix >= 0
                                                && ix < xs.w as isize
                                            {
                                                acc += chan[iy as usize * xs.w + ix as usize];
                                            }
                                        }
                                    }
                                    od[oi] = acc / S::cast(count as f64);
                                }
                            }
                        }
                    }
                }
            }
        }

        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| {
                    let mut dx = Tensor4::zeros(xs);
                    let gd = ctx.grad.data();
                    match kind {
                        PoolKind::Max => {
                            let dd = dx.data_mut();
                            for (oi, &src) in argmax.iter().enumerate() {
                                dd[src] += gd[oi];
                            }
                        }
                        PoolKind::Avg => {
                            let dd = dx.data_mut();
                            for n in 0..xs.n {
                                for c in 0..xs.c {
                                    let base = xs.idx(n, c, 0, 0);
                                    for oy in 0..oh {
                                        for ox in 0..ow {
                                            let g = gd[os.idx(n, c, oy, ox)];
                                            let mut count = 0usize;
                                            for dy in 0..k {
                                                let iy =
                                                    (oy * stride + dy) as isize - pad as isize;
                                                let in_pad = iy >= -(pad as isize)
                                                    && iy < (xs.h + pad) as isize;
                                                for dx_ in 0..k {
                                                    let ix = (ox * stride + dx_) as isize
                                                        - pad as isize;
                                                    if in_pad
                                                        && ix >= -(pad as isize)
                                                        && ix < (xs.w + pad) as isize
                                                    {
                                                        count += 1;
                                                    }
                                                }
                                            }
                                            let share = g / S::cast(count as f64);
                                            for dy in 0..k {
                                                let iy =
                                                    (oy * stride + dy) as isize - pad as isize;
                                                if iy < 0 || iy >= xs.h as isize {
                                                    continue;
                                                }
                                                for dx_ in 0..k {
                                                    let ix = (ox * stride + dx_) as isize
                                                        - pad as isize;
                                                    if ix < 0 || ix >= xs.w as isize {
                                                        continue;
                                                    }
                                                    dd[base + iy as usize * xs.w + ix as usize] +=
                                                        share;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    dx
                })]
            })),
        ))
    }

    /// Row-wise softmax of a matrix (over the column axis).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.shape();
        if !s.is_matrix() {
            return Err(Error::Shape(format!("softmax_rows expects a matrix, got {s}")));
        }
        let mut v = Tensor4::zeros(s);
        for r in 0..s.n {
            softmax_row(self.nodes[a.0].value.row(r), &mut v.data_mut()[r * s.c..(r + 1) * s.c]);
        }
        Ok(self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| {
                    let mut dx = Tensor4::zeros(s);
                    let (y, g) = (ctx.output.data(), ctx.grad.data());
                    for r in 0..s.n {
                        let yr = &y[r * s.c..(r + 1) * s.c];
                        let gr = &g[r * s.c..(r + 1) * s.c];
                        let dot: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for (slot, (&yv, &gv)) in
                            dx.data_mut()[r * s.c..(r + 1) * s.c].iter_mut().zip(yr.iter().zip(gr))
                        {
                            *slot = yv * (gv - dot);
                        }
                    }
                    dx
                })]
            })),
        ))
    }

    /// Mean softmax cross-entropy of `(N, L)` logits against class labels;
    /// returns a scalar. Fused and numerically stable.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.nodes[logits.0].value.shape();
        if !s.is_matrix() {
            return Err(Error::Shape(format!("cross-entropy expects matrix logits, got {s}")));
        }
        if labels.len() != s.n {
            return Err(Error::Input(format!(
                "{} labels for {} logit rows",
                labels.len(),
                s.n
            )));
        }
        for &l in labels {
            if l >= s.c {
                return Err(Error::Input(format!("label {l} out of {} classes", s.c)));
            }
        }
        let mut probs = Tensor4::zeros(s);
        let mut loss = S::zero();
        for r in 0..s.n {
            let row = self.nodes[logits.0].value.row(r);
            let pr = &mut probs.data_mut()[r * s.c..(r + 1) * s.c];
            let lse = softmax_row(row, pr);
            loss += lse - row[labels[r]];
        }
        loss /= S::cast(s.n as f64);
        let labels: Vec<usize> = labels.to_vec();
        Ok(self.push(
            Tensor4::scalar(loss),
            vec![logits.0],
            Some(Box::new(move |ctx: &BackCtx<'_, S>| {
                vec![ctx.needs[0].then(|| {
                    let gscale = ctx.grad.scalar_value() / S::cast(s.n as f64);
                    let mut dl = probs.clone();
                    for (r, &lab) in labels.iter().enumerate() {
                        dl.data_mut()[r * s.c + lab] -= S::one();
                    }
                    for v in dl.data_mut() {
                        *v *= gscale;
                    }
                    dl
                })]
            })),
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate gradients of the scalar `root` into every recorded node that
    /// requires them. Visits each operation exactly once, in reverse record
    /// order. A tape can only run backward once.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.ran_backward {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if !self.nodes[root.0].value.shape().is_scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got {}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.ran_backward = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor4::scalar(S::one()));

        for id in (0..=root.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let node = &self.nodes[id];
            let Some(back) = &node.back else { continue };
            let needs: Vec<bool> =
                node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let inputs: Vec<&Tensor4<S>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = {
                let g = self.grads[id].as_ref().expect("grad present");
                debug_assert_eq!(g.shape(), node.value.shape(), "gradient shape");
                back(&BackCtx { inputs: &inputs, output: &node.value, grad: g, needs: &needs })
            };
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            let parents = node.parents.clone();
            for (slot, pg) in parents.into_iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), self.nodes[slot].value.shape());
                match &mut self.grads[slot] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    empty => *empty = Some(pg),
                }
            }
        }
        Ok(())
    }
}

// ---- free helpers --------------------------------------------------------

fn zip<S: Scalar>(a: &Tensor4<S>, b: &Tensor4<S>, f: impl Fn(S, S) -> S) -> Tensor4<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor4::from_vec(a.shape(), data).expect("zip shape")
}

fn zip3<S: Scalar>(
    a: &Tensor4<S>,
    b: &Tensor4<S>,
    c: &Tensor4<S>,
    f: impl Fn(S, S, S) -> S,
) -> Tensor4<S> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor4::from_vec(a.shape(), data).expect("zip3 shape")
}

fn softplus_val<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_val<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        ((-x).exp() + S::one()).recip()
    } else {
        let e = x.exp();
        e / (e + S::one())
    }
}

/// Stable softmax of one row into `out`; returns the log-sum-exp.
fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) -> S {
    let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    z.ln() + mx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape4, data: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn add_mul_chain_gradients() {
        // loss = sum((a + b) * a) => dl/da = 2a + b, dl/db = a
        let mut tape = Tape::new();
        let a = tape.leaf(t(Shape4::matrix(1, 3), vec![1.0, 2.0, 3.0]).requires_grad(true));
        let b = tape.leaf(t(Shape4::matrix(1, 3), vec![10.0, 20.0, 30.0]).requires_grad(true));
        let s = tape.add(a, b).unwrap();
        let p = tape.mul(s, a).unwrap();
        let loss = tape.reduce(p, ReduceSet::All, Reduction::Sum).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[12.0, 24.0, 36.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar_root_and_runs_once() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(Shape4::matrix(1, 2), vec![1.0, 2.0]).requires_grad(true));
        assert!(matches!(tape.backward(a), Err(Error::Usage(_))));
        let mut tape = Tape::new();
        let a = tape.leaf(t(Shape4::matrix(1, 2), vec![1.0, 2.0]).requires_grad(true));
        let l = tape.reduce(a, ReduceSet::All, Reduction::Sum).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(Shape4::matrix(1, 2), vec![1.0, 2.0]).requires_grad(true));
        let c = tape.constant(t(Shape4::matrix(1, 2), vec![3.0, 4.0]));
        let p = tape.mul(a, c).unwrap();
        let l = tape.reduce(p, ReduceSet::All, Reduction::Sum).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn gradient_is_linear_in_upstream_scale() {
        let run = |scale: f64| {
            let mut tape = Tape::new();
            let a = tape.leaf(t(Shape4::matrix(1, 3), vec![0.5, -1.0, 2.0]).requires_grad(true));
            let e = tape.exp(a);
            let l = tape.reduce(e, ReduceSet::All, Reduction::Sum).unwrap();
            let l = tape.mul_scalar(l, scale);
            tape.backward(l).unwrap();
            tape.grad(a).unwrap().data().to_vec()
        };
        let g1 = run(1.0);
        let g3 = run(3.0);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(Shape4::matrix(2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]));
        let y = tape.softmax_rows(a).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // huge logits stay finite
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(Shape4::matrix(2, 4), vec![0.0; 8]));
        let l = tape.softmax_cross_entropy(a, &[0, 3]).unwrap();
        assert!((tape.value(l).scalar_value() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn maxpool_first_occurrence_tie_break() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            t(Shape4::new(1, 1, 2, 2), vec![5.0, 5.0, 5.0, 5.0]).requires_grad(true),
        );
        let y = tape.pool2d(x, PoolKind::Max, 2, 2, 0).unwrap();
        let l = tape.reduce(y, ReduceSet::All, Reduction::Sum).unwrap();
        tape.backward(l).unwrap();
        // all four tie; gradient goes to the first element scanned
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let mut tape = Tape::<f64>::new();
        let table =
            tape.leaf(t(Shape4::matrix(3, 2), vec![1., 2., 3., 4., 5., 6.]).requires_grad(true));
        let g = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        let l = tape.reduce(g, ReduceSet::All, Reduction::Sum).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(table).unwrap().data(), &[1., 1., 2., 2., 0., 0.]);
        assert!(tape.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn channel_and_patch_vector_round_trips() {
        let s = Shape4::new(2, 3, 4, 4);
        let data: Vec<f64> = (0..s.numel()).map(|v| v as f64).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(s, data.clone()));
        let cv = tape.channel_vectors(x).unwrap();
        let back = tape.channel_vectors_rev(cv, s).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
        let pv = tape.patch_vectors(x, 2, 2).unwrap();
        assert_eq!(tape.value(pv).shape(), Shape4::matrix(2 * 4, 3 * 4));
        let back = tape.patch_vectors_rev(pv, s, 2, 2).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }
}
