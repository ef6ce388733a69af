//! Central-difference verification of every gradient the tape produces.
//!
//! A check target owns a parameter store and a recipe that rebuilds a scalar
//! loss from it on a fresh tape. The harness runs backward once to collect
//! analytic gradients, then nudges chosen coordinates by `±h` and compares
//! slopes. Targets come in three scopes: single operations, normalization
//! layers, and a whole convolutional model.
//!
//! Inputs that feed kinked ops (relu, max-pool) are generated away from the
//! kink — a tie inside a pooling window or an activation within `h` of zero
//! makes the two-sided difference measure a subgradient, not the gradient.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::context::{CnMode, CnSpec, ContextNorm};
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::kernels::ReduceSet;
use crate::model::{ConvNet, ConvNetSpec, InferenceChoice};
use crate::norm::{AxisNorm, BatchNorm, ForwardDiag, ForwardMode, MixtureNorm, NormMode, NormSpec};
use crate::param::{Bindings, ParamStore};
use crate::tape::{PoolKind, Reduction, Tape, Var};
use crate::tensor::{Shape4, Tensor4};

/// Step used by the central differences (f64 throughout).
pub const FD_STEP: f64 = 1e-4;
/// A target fails when any checked coordinate disagrees worse than this.
pub const TOLERANCE: f64 = 1e-4;
/// Two difference quotients at step h and h/2 that disagree worse than this
/// mark a coordinate where the loss is not locally smooth; the comparison is
/// skipped there instead of scored.
const SMOOTH_GATE: f64 = 1e-3;
/// Differences below this are roundoff, not signal; coordinates whose
/// gradient is this small carry no finite-difference information either way.
const FD_ATOL: f64 = 1e-7;

/// Relative disagreement with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs()).max(1e-8)
    }
}

fn scored_err(analytic: f64, fd: f64) -> f64 {
    if (analytic - fd).abs() <= FD_ATOL {
        0.0
    } else {
        rel_err(analytic, fd)
    }
}

/// What to check: individual tape ops, normalization layers, or a full model.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Scope {
    Op,
    Layer,
    Model,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" | "ops" => Ok(Scope::Op),
            "layer" | "layers" => Ok(Scope::Layer),
            "model" => Ok(Scope::Model),
            other => Err(Error::Config(format!(
                "unknown gradcheck scope '{other}' (expected op, layer, or model)"
            ))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Layer => "layer",
            Scope::Model => "model",
        })
    }
}

/// Worst disagreement observed for one target.
#[derive(Clone, Debug)]
pub struct CheckEntry {
    pub target: String,
    pub coords: usize,
    /// Coordinates where the loss was not locally smooth at the step size
    /// (a relu or pooling argmax flipped inside the probed interval), so no
    /// valid difference quotient exists.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl CheckEntry {
    pub fn ok(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// Everything one `run` produced.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub scope: Scope,
    pub seed: u64,
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(CheckEntry::ok)
    }

    pub fn worst(&self) -> Option<&CheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// One line per target, plus a verdict footer.
    pub fn render(&self) -> String {
        let mut out = format!(
            "gradient check — scope {}, seed {}, tolerance {:e}\n",
            self.scope, self.seed, TOLERANCE
        );
        let width = self.entries.iter().map(|e| e.target.len()).max().unwrap_or(6).max(6);
        out.push_str(&format!(
            "{:width$}  {:>6}  {:>7}  {:>12}  status\n",
            "target", "coords", "skipped", "max rel err"
        ));
        for e in &self.entries {
            out.push_str(&format!(
                "{:width$}  {:>6}  {:>7}  {:>12.3e}  {}\n",
                e.target,
                e.coords,
                e.skipped,
                e.max_rel_err,
                if e.ok() { "ok" } else { "FAIL" }
            ));
        }
        match self.worst() {
            Some(w) => out.push_str(&format!(
                "{}: worst {:.3e} at {}\n",
                if self.passed() { "pass" } else { "FAIL" },
                w.max_rel_err,
                w.target
            )),
            None => out.push_str("no targets ran\n"),
        }
        out
    }
}

type BuildFn = Box<dyn Fn(&mut Tape<f64>, &mut Bindings, &mut ParamStore<f64>) -> Result<Var>>;

struct Target {
    name: String,
    /// Most coordinates checked per tensor; smaller tensors get all of them.
    cap: usize,
    /// Central-difference step. Op and layer targets use [`FD_STEP`]; the
    /// model target probes through thousands of relu and pooling kinks whose
    /// accumulated distortion shrinks linearly with the step, so it uses a
    /// smaller one (still far above f64 roundoff on the loss).
    step: f64,
    store: ParamStore<f64>,
    build: BuildFn,
}

/// Run the suite for one scope.
pub fn run(scope: Scope, seed: u64) -> Result<CheckReport> {
    let targets = match scope {
        Scope::Op => op_targets(seed)?,
        Scope::Layer => layer_targets(seed)?,
        Scope::Model => model_targets(seed)?,
    };
    let mut entries = Vec::new();
    for t in targets {
        entries.push(check_target(t, seed)?);
    }
    if scope == Scope::Op {
        entries.push(linearity_entry(seed)?);
    }
    if scope == Scope::Layer {
        entries.extend(mu_chain_entries(seed)?);
    }
    Ok(CheckReport { scope, seed, entries })
}

fn eval_loss(build: &BuildFn, store: &mut ParamStore<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let mut b = Bindings::new();
    let loss = build(&mut tape, &mut b, store)?;
    Ok(tape.value(loss).data()[0])
}

fn check_target(mut t: Target, seed: u64) -> Result<CheckEntry> {
    {
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let loss = (t.build)(&mut tape, &mut b, &mut t.store)?;
        tape.backward(loss)?;
        b.collect_grads(&tape, &mut t.store)?;
    }
    let names: Vec<String> = t
        .store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut rng = salted(seed, &t.name);
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    let mut skipped = 0usize;
    for name in &names {
        let grad = t
            .store
            .get(name)?
            .tensor
            .grad
            .clone()
            .ok_or_else(|| Error::Usage(format!("no gradient collected for '{name}'")))?;
        let n = grad.len();
        let picks: Vec<usize> = if n <= t.cap {
            (0..n).collect()
        } else {
            let mut v = rand::seq::index::sample(&mut rng, n, t.cap).into_vec();
            v.sort_unstable();
            v
        };
        for i in picks {
            let base = t.store.get(name)?.tensor.data()[i];
            let at = |delta: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                store.get_mut(name)?.tensor.data_mut()[i] = base + delta;
                eval_loss(&t.build, store)
            };
            let h = t.step;
            let p1 = at(h, &mut t.store)?;
            let m1 = at(-h, &mut t.store)?;
            let p2 = at(h / 2.0, &mut t.store)?;
            let m2 = at(-h / 2.0, &mut t.store)?;
            t.store.get_mut(name)?.tensor.data_mut()[i] = base;
            let fd_h = (p1 - m1) / (2.0 * h);
            let fd_h2 = (p2 - m2) / h;
            // Consistency across step sizes separates the two failure modes:
            // a kink inside the interval makes the quotients disagree with
            // each other (skip — there is no derivative to compare), while a
            // wrong backward rule gives consistent quotients that disagree
            // with the analytic value (fail).
            if scored_err(fd_h, fd_h2) > SMOOTH_GATE {
                skipped += 1;
                continue;
            }
            // A kink in the outer interval only pollutes fd_h; score against
            // the best consistent estimate. A wrong rule disagrees with all
            // three, so nothing real slips through.
            let rich = (4.0 * fd_h2 - fd_h) / 3.0;
            let err = scored_err(grad[i], fd_h)
                .min(scored_err(grad[i], fd_h2))
                .min(scored_err(grad[i], rich));
            worst = worst.max(err);
            coords += 1;
        }
    }
    Ok(CheckEntry { target: t.name, coords, skipped, max_rel_err: worst })
}

// ---- random tensor builders ------------------------------------------------

fn salted(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &by in name.as_bytes() {
        h = (h ^ by as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape4, lo: f64, hi: f64) -> Tensor4<f64> {
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor4::from_vec(shape, data).expect("sized by construction")
}

/// Random values whose magnitude never drops below `margin` (relu, divisors).
fn off_kink(rng: &mut ChaCha8Rng, shape: Shape4, margin: f64, hi: f64) -> Tensor4<f64> {
    let data = (0..shape.numel())
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * rng.random_range(margin..hi)
        })
        .collect();
    Tensor4::from_vec(shape, data).expect("sized by construction")
}

/// A shuffled lattice over [-2, 2]: all entries distinct with pairwise gaps
/// far above `2h`, so max-pool argmaxes cannot flip under the perturbation.
fn lattice(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4<f64> {
    let n = shape.numel();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let data = idx.iter().map(|&p| -2.0 + 4.0 * (p as f64 + 0.5) / n as f64).collect();
    Tensor4::from_vec(shape, data).expect("sized by construction")
}

fn weighted_sum(tape: &mut Tape<f64>, out: Var, w: &Tensor4<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    tape.reduce(prod, ReduceSet::All, Reduction::Sum)
}

/// Target whose leaves are listed up front and whose recipe already returns a
/// scalar.
fn simple(
    name: &str,
    cap: usize,
    leaves: Vec<(&'static str, Tensor4<f64>)>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Result<Target> {
    let mut store = ParamStore::new();
    let names: Vec<String> = leaves.iter().map(|(n, _)| n.to_string()).collect();
    for (n, t) in leaves {
        store.insert(n, t, true)?;
    }
    let build: BuildFn = Box::new(move |tape, b, store| {
        let vars: Vec<Var> =
            names.iter().map(|n| b.bind(tape, store, n)).collect::<Result<_>>()?;
        f(tape, &vars)
    });
    Ok(Target { name: name.to_string(), cap, step: FD_STEP, store, build })
}

/// Like [`simple`], but the recipe returns a tensor; a probe pass sizes a
/// fixed random cotangent that folds it to a scalar.
fn probed(
    name: &str,
    cap: usize,
    rng: &mut ChaCha8Rng,
    leaves: Vec<(&'static str, Tensor4<f64>)>,
    raw: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Result<Target> {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            leaves.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let out = raw(&mut tape, &vars)?;
        tape.value(out).shape()
    };
    let w = uniform(rng, out_shape, -1.0, 1.0);
    simple(name, cap, leaves, move |tape, vars| {
        let out = raw(tape, vars)?;
        weighted_sum(tape, out, &w)
    })
}

// ---- op scope --------------------------------------------------------------

fn op_targets(seed: u64) -> Result<Vec<Target>> {
    let mut v = Vec::new();
    let s = Shape4::new(2, 3, 2, 2);

    for (name, which) in [("op.add", 0u8), ("op.sub", 1), ("op.mul", 2)] {
        let mut rng = salted(seed, name);
        let a = uniform(&mut rng, s, -2.0, 2.0);
        let b = uniform(&mut rng, s, -2.0, 2.0);
        v.push(probed(name, 64, &mut rng, vec![("a", a), ("b", b)], move |t, x| match which {
            0 => t.add(x[0], x[1]),
            1 => t.sub(x[0], x[1]),
            _ => t.mul(x[0], x[1]),
        })?);
    }
    {
        let mut rng = salted(seed, "op.div");
        let a = uniform(&mut rng, s, -2.0, 2.0);
        let b = off_kink(&mut rng, s, 0.5, 2.0);
        v.push(probed("op.div", 64, &mut rng, vec![("a", a), ("b", b)], |t, x| {
            t.div(x[0], x[1])
        })?);
    }
    {
        let mut rng = salted(seed, "op.scalar_affine");
        let a = uniform(&mut rng, s, -2.0, 2.0);
        v.push(probed("op.scalar_affine", 64, &mut rng, vec![("a", a)], |t, x| {
            let shifted = t.add_scalar(x[0], 0.7);
            Ok(t.mul_scalar(shifted, -1.3))
        })?);
    }
    {
        let mut rng = salted(seed, "op.relu");
        let a = off_kink(&mut rng, s, 0.05, 2.0);
        v.push(probed("op.relu", 64, &mut rng, vec![("a", a)], |t, x| Ok(t.relu(x[0])))?);
    }
    {
        let mut rng = salted(seed, "op.sqrt");
        let a = uniform(&mut rng, s, 0.25, 2.25);
        v.push(probed("op.sqrt", 64, &mut rng, vec![("a", a)], |t, x| Ok(t.sqrt(x[0])))?);
    }
    {
        let mut rng = salted(seed, "op.rsqrt");
        let a = uniform(&mut rng, s, 0.25, 2.25);
        v.push(probed("op.rsqrt", 64, &mut rng, vec![("a", a)], |t, x| Ok(t.rsqrt(x[0])))?);
    }
    {
        let mut rng = salted(seed, "op.exp");
        let a = uniform(&mut rng, s, -2.0, 2.0);
        v.push(probed("op.exp", 64, &mut rng, vec![("a", a)], |t, x| Ok(t.exp(x[0])))?);
    }
    {
        let mut rng = salted(seed, "op.softplus");
        let a = uniform(&mut rng, s, -2.0, 2.0);
        v.push(probed("op.softplus", 64, &mut rng, vec![("a", a)], |t, x| {
            Ok(t.softplus(x[0]))
        })?);
    }
    {
        let mut rng = salted(seed, "op.reduce");
        let sx = Shape4::new(2, 4, 2, 2);
        let x = uniform(&mut rng, sx, -2.0, 2.0);
        let w1 = uniform(&mut rng, Shape4::new(1, 4, 1, 1), -1.0, 1.0);
        let w2 = uniform(&mut rng, Shape4::new(2, 2, 1, 1), -1.0, 1.0);
        v.push(simple("op.reduce", 64, vec![("x", x)], move |t, vars| {
            let per_c = t.reduce(vars[0], ReduceSet::PerChannel, Reduction::Mean)?;
            let a = weighted_sum(t, per_c, &w1)?;
            let grouped = t.reduce(vars[0], ReduceSet::PerSampleGroup(2), Reduction::Sum)?;
            let b = weighted_sum(t, grouped, &w2)?;
            t.add(a, b)
        })?);
    }
    {
        let mut rng = salted(seed, "op.expand");
        let target = Shape4::new(2, 3, 3, 3);
        let g = uniform(&mut rng, Shape4::new(1, 3, 1, 1), -2.0, 2.0);
        let h = uniform(&mut rng, Shape4::new(2, 3, 1, 1), -2.0, 2.0);
        let w1 = uniform(&mut rng, target, -1.0, 1.0);
        let w2 = uniform(&mut rng, target, -1.0, 1.0);
        v.push(simple("op.expand", 64, vec![("g", g), ("h", h)], move |t, vars| {
            let a = t.expand(vars[0], ReduceSet::PerChannel, target)?;
            let b = t.expand(vars[1], ReduceSet::PerSampleChannel, target)?;
            let sa = weighted_sum(t, a, &w1)?;
            let sb = weighted_sum(t, b, &w2)?;
            t.add(sa, sb)
        })?);
    }
    {
        let mut rng = salted(seed, "op.matmul");
        let a = uniform(&mut rng, Shape4::matrix(4, 3), -2.0, 2.0);
        let b = uniform(&mut rng, Shape4::matrix(3, 5), -2.0, 2.0);
        v.push(probed("op.matmul", 64, &mut rng, vec![("a", a), ("b", b)], |t, x| {
            t.matmul(x[0], false, x[1], false)
        })?);
    }
    {
        let mut rng = salted(seed, "op.matmul_t");
        let a = uniform(&mut rng, Shape4::matrix(3, 4), -2.0, 2.0);
        let b = uniform(&mut rng, Shape4::matrix(5, 3), -2.0, 2.0);
        v.push(probed("op.matmul_t", 64, &mut rng, vec![("a", a), ("b", b)], |t, x| {
            t.matmul(x[0], true, x[1], true)
        })?);
    }
    {
        let mut rng = salted(seed, "op.row_col");
        let m = uniform(&mut rng, Shape4::matrix(3, 4), -2.0, 2.0);
        let w1 = uniform(&mut rng, Shape4::matrix(1, 4), -1.0, 1.0);
        let w2 = uniform(&mut rng, Shape4::matrix(3, 1), -1.0, 1.0);
        v.push(simple("op.row_col", 64, vec![("m", m)], move |t, vars| {
            let r = t.row(vars[0], 1)?;
            let c = t.col(vars[0], 2)?;
            let sr = weighted_sum(t, r, &w1)?;
            let sc = weighted_sum(t, c, &w2)?;
            t.add(sr, sc)
        })?);
    }
    {
        let mut rng = salted(seed, "op.gather_rows");
        let table = uniform(&mut rng, Shape4::matrix(4, 5), -2.0, 2.0);
        v.push(probed("op.gather_rows", 64, &mut rng, vec![("table", table)], |t, x| {
            t.gather_rows(x[0], &[2, 0, 3, 0, 1])
        })?);
    }
    {
        let mut rng = salted(seed, "op.reshape_flatten");
        let x = uniform(&mut rng, s, -2.0, 2.0);
        let w1 = uniform(&mut rng, Shape4::matrix(2, 12), -1.0, 1.0);
        let w2 = uniform(&mut rng, Shape4::new(4, 3, 1, 2), -1.0, 1.0);
        v.push(simple("op.reshape_flatten", 64, vec![("x", x)], move |t, vars| {
            let flat = t.flatten_rows(vars[0])?;
            let re = t.reshape(vars[0], Shape4::new(4, 3, 1, 2))?;
            let sa = weighted_sum(t, flat, &w1)?;
            let sb = weighted_sum(t, re, &w2)?;
            t.add(sa, sb)
        })?);
    }
    {
        let mut rng = salted(seed, "op.channel_vectors");
        let x = uniform(&mut rng, s, -2.0, 2.0);
        let m = uniform(&mut rng, Shape4::matrix(8, 3), -1.0, 1.0);
        v.push(probed("op.channel_vectors", 64, &mut rng, vec![("x", x)], move |t, vars| {
            let cv = t.channel_vectors(vars[0])?;
            let mv = t.constant(m.clone());
            let scaled = t.mul(cv, mv)?;
            t.channel_vectors_rev(scaled, s)
        })?);
    }
    {
        let mut rng = salted(seed, "op.patch_vectors");
        let sx = Shape4::new(2, 3, 4, 4);
        let x = uniform(&mut rng, sx, -2.0, 2.0);
        let m = uniform(&mut rng, Shape4::matrix(8, 12), -1.0, 1.0);
        v.push(probed("op.patch_vectors", 64, &mut rng, vec![("x", x)], move |t, vars| {
            let pv = t.patch_vectors(vars[0], 2, 2)?;
            let mv = t.constant(m.clone());
            let scaled = t.mul(pv, mv)?;
            t.patch_vectors_rev(scaled, sx, 2, 2)
        })?);
    }
    {
        let mut rng = salted(seed, "op.conv2d");
        let x = uniform(&mut rng, Shape4::new(2, 2, 5, 5), -2.0, 2.0);
        let k = uniform(&mut rng, Shape4::new(3, 2, 3, 3), -2.0, 2.0);
        v.push(probed("op.conv2d", 64, &mut rng, vec![("x", x), ("k", k)], |t, v| {
            t.conv2d(v[0], v[1], 1, 1)
        })?);
    }
    {
        let mut rng = salted(seed, "op.conv2d_strided");
        let x = uniform(&mut rng, Shape4::new(1, 2, 7, 7), -2.0, 2.0);
        let k = uniform(&mut rng, Shape4::new(2, 2, 3, 3), -2.0, 2.0);
        v.push(probed("op.conv2d_strided", 64, &mut rng, vec![("x", x), ("k", k)], |t, v| {
            t.conv2d(v[0], v[1], 2, 0)
        })?);
    }
    {
        let mut rng = salted(seed, "op.maxpool");
        let x = lattice(&mut rng, Shape4::new(2, 2, 6, 6));
        v.push(probed("op.maxpool", 64, &mut rng, vec![("x", x)], |t, v| {
            t.pool2d(v[0], PoolKind::Max, 3, 2, 1)
        })?);
    }
    {
        let mut rng = salted(seed, "op.avgpool");
        let x = uniform(&mut rng, Shape4::new(2, 3, 6, 6), -2.0, 2.0);
        v.push(probed("op.avgpool", 64, &mut rng, vec![("x", x)], |t, v| {
            t.pool2d(v[0], PoolKind::Avg, 2, 2, 0)
        })?);
    }
    {
        let mut rng = salted(seed, "op.softmax_rows");
        let a = uniform(&mut rng, Shape4::matrix(4, 5), -2.0, 2.0);
        v.push(probed("op.softmax_rows", 64, &mut rng, vec![("a", a)], |t, x| {
            t.softmax_rows(x[0])
        })?);
    }
    {
        let mut rng = salted(seed, "op.softmax_xent");
        let a = uniform(&mut rng, Shape4::matrix(4, 7), -2.0, 2.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..7)).collect();
        v.push(simple("op.softmax_xent", 64, vec![("a", a)], move |t, x| {
            t.softmax_cross_entropy(x[0], &labels)
        })?);
    }
    {
        let mut rng = salted(seed, "op.composed");
        let x = uniform(&mut rng, Shape4::new(2, 2, 6, 6), -2.0, 2.0);
        let k = uniform(&mut rng, Shape4::new(3, 2, 3, 3), -2.0, 2.0);
        let w = uniform(&mut rng, Shape4::matrix(27, 4), -1.0, 1.0);
        let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..4)).collect();
        v.push(simple("op.composed", 64, vec![("x", x), ("k", k)], move |t, vars| {
            let conv = t.conv2d(vars[0], vars[1], 1, 1)?;
            let act = t.relu(conv);
            let pooled = t.pool2d(act, PoolKind::Avg, 2, 2, 0)?;
            let flat = t.flatten_rows(pooled)?;
            let wv = t.constant(w.clone());
            let logits = t.matmul(flat, false, wv, false)?;
            t.softmax_cross_entropy(logits, &labels)
        })?);
    }
    Ok(v)
}

/// grad(α·loss) must equal α·grad(loss); checked directly, not by differences.
fn linearity_entry(seed: u64) -> Result<CheckEntry> {
    let mut rng = salted(seed, "op.backward_linearity");
    let s = Shape4::new(2, 3, 2, 2);
    let a = uniform(&mut rng, s, -2.0, 2.0);
    let b = uniform(&mut rng, s, -2.0, 2.0);
    let alpha = 3.75f64;

    let grads = |scale: Option<f64>| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone().requires_grad(true));
        let bv = tape.constant(b.clone());
        let prod = tape.mul(av, bv)?;
        let mut loss = tape.reduce(prod, ReduceSet::All, Reduction::Sum)?;
        if let Some(c) = scale {
            loss = tape.mul_scalar(loss, c);
        }
        tape.backward(loss)?;
        Ok(tape.grad(av).expect("leaf requires grad").data().to_vec())
    };
    let g1 = grads(None)?;
    let g2 = grads(Some(alpha))?;
    let mut worst = 0.0f64;
    for (x, y) in g1.iter().zip(&g2) {
        worst = worst.max(rel_err(alpha * x, *y));
    }
    Ok(CheckEntry {
        target: "op.backward_linearity".into(),
        coords: g1.len(),
        skipped: 0,
        max_rel_err: worst,
    })
}

// ---- layer scope -----------------------------------------------------------

fn layer_targets(seed: u64) -> Result<Vec<Target>> {
    let mut v = Vec::new();
    {
        let mut rng = salted(seed, "layer.batch_norm");
        let sx = Shape4::new(4, 3, 3, 3);
        let mut store = ParamStore::new();
        store.insert("x", uniform(&mut rng, sx, -2.0, 2.0), true)?;
        let bn = BatchNorm::init(&mut store, "bn", 3, &NormSpec::new(NormMode::Batch))?;
        let w = uniform(&mut rng, sx, -1.0, 1.0);
        let build: BuildFn = Box::new(move |tape, b, store| {
            let x = b.bind(tape, store, "x")?;
            let out = bn.forward(tape, store, b, x, ForwardMode::Collect)?;
            weighted_sum(tape, out, &w)
        });
        v.push(Target { name: "layer.batch_norm".into(), cap: 48, step: FD_STEP, store, build });
    }
    for (name, mode) in [
        ("layer.layer_norm", NormMode::Layer),
        ("layer.instance_norm", NormMode::Instance),
        ("layer.group_norm", NormMode::Group(2)),
    ] {
        let mut rng = salted(seed, name);
        let sx = Shape4::new(3, 4, 2, 2);
        let mut store = ParamStore::new();
        store.insert("x", uniform(&mut rng, sx, -2.0, 2.0), true)?;
        let norm = AxisNorm::init(&mut store, "n", 4, &NormSpec::new(mode))?;
        let w = uniform(&mut rng, sx, -1.0, 1.0);
        let build: BuildFn = Box::new(move |tape, b, store| {
            let x = b.bind(tape, store, "x")?;
            let out = norm.forward(tape, store, b, x)?;
            weighted_sum(tape, out, &w)
        });
        v.push(Target { name: name.into(), cap: 48, step: FD_STEP, store, build });
    }
    {
        let mut rng = salted(seed, "layer.mixture_norm");
        let sx = Shape4::new(6, 3, 2, 2);
        let mut store = ParamStore::new();
        store.insert("x", uniform(&mut rng, sx, -2.0, 2.0), true)?;
        let mn = MixtureNorm::init(&mut store, "mn", 3, &NormSpec::new(NormMode::Mixture(2)))?;
        let means: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vars: Vec<f64> = (0..6).map(|_| rng.random_range(0.4..1.5)).collect();
        let gmm = GmmModel::with_uniform_weights(2, 3, means, vars)?;
        mn.set_gmm(&mut store, &gmm)?;
        let w = uniform(&mut rng, sx, -1.0, 1.0);
        let build: BuildFn = Box::new(move |tape, b, store| {
            let x = b.bind(tape, store, "x")?;
            let mut diag = ForwardDiag::default();
            let out = mn.forward(tape, store, b, x, ForwardMode::Collect, &mut diag)?;
            weighted_sum(tape, out, &w)
        });
        v.push(Target { name: "layer.mixture_norm".into(), cap: 48, step: FD_STEP, store, build });
    }
    {
        let mut rng = salted(seed, "layer.context_channels");
        let sx = Shape4::new(5, 3, 4, 4);
        let mut store = ParamStore::new();
        store.insert("x", uniform(&mut rng, sx, -2.0, 2.0), true)?;
        let cn = ContextNorm::init(&mut store, "cn", 3, &CnSpec::new(3), seed ^ 0x51)?;
        let ctx = vec![0usize, 1, 2, 0, 1];
        let w = uniform(&mut rng, sx, -1.0, 1.0);
        let build: BuildFn = Box::new(move |tape, b, store| {
            let x = b.bind(tape, store, "x")?;
            let out = cn.forward(tape, store, b, x, &ctx)?;
            weighted_sum(tape, out, &w)
        });
        v.push(Target { name: "layer.context_channels".into(), cap: 48, step: FD_STEP, store, build });
    }
    {
        let mut rng = salted(seed, "layer.context_patches");
        let sx = Shape4::new(3, 3, 4, 4);
        let mut store = ParamStore::new();
        store.insert("x", uniform(&mut rng, sx, -2.0, 2.0), true)?;
        let spec = CnSpec {
            contexts: 2,
            embed_dim: 32,
            mode: CnMode::Patches { ph: 2, pw: 2 },
            epsilon: 1e-5,
        };
        let cn = ContextNorm::init(&mut store, "cn", 3, &spec, seed ^ 0x52)?;
        let ctx = vec![0usize, 1, 1];
        let w = uniform(&mut rng, sx, -1.0, 1.0);
        let build: BuildFn = Box::new(move |tape, b, store| {
            let x = b.bind(tape, store, "x")?;
            let out = cn.forward(tape, store, b, x, &ctx)?;
            weighted_sum(tape, out, &w)
        });
        v.push(Target { name: "layer.context_patches".into(), cap: 32, step: FD_STEP, store, build });
    }
    Ok(v)
}

/// The context-normalization chain term has a closed form,
/// `d xhat / d mu = -(sigma^2 + eps)^{-1/2}`; the tape and the central
/// differences both have to reproduce it.
fn mu_chain_entries(seed: u64) -> Result<Vec<CheckEntry>> {
    let mut rng = salted(seed, "layer.context_mu_chain");
    let (n, c) = (6usize, 4usize);
    let eps = 1e-3f64;
    let xs = Shape4::matrix(n, c);
    let x = uniform(&mut rng, xs, -2.0, 2.0);
    let sigma2: Vec<f64> = (0..c).map(|_| rng.random_range(0.3..2.0)).collect();
    let inv: Vec<f64> = sigma2.iter().map(|&s| 1.0 / (s + eps).sqrt()).collect();

    let mut store = ParamStore::new();
    store.insert("mu", uniform(&mut rng, Shape4::matrix(1, c), -1.0, 1.0), true)?;
    let build: BuildFn = {
        let x = x.clone();
        let sigma2 = sigma2.clone();
        Box::new(move |tape, b, store| {
            let xv = tape.constant(x.clone());
            let mu = b.bind(tape, store, "mu")?;
            let mu_b = tape.expand(mu, ReduceSet::PerChannel, x.shape())?;
            let centered = tape.sub(xv, mu_b)?;
            let s2 = tape.constant(Tensor4::matrix(1, sigma2.len(), sigma2.clone())?);
            let s2e = tape.add_scalar(s2, eps);
            let invstd = tape.rsqrt(s2e);
            let inv_b = tape.expand(invstd, ReduceSet::PerChannel, x.shape())?;
            let xhat = tape.mul(centered, inv_b)?;
            tape.reduce(xhat, ReduceSet::All, Reduction::Sum)
        })
    };

    // The loss sums xhat over the batch, so each mu coordinate should see the
    // chain term n times over.
    let expected: Vec<f64> = inv.iter().map(|&i| -(n as f64) * i).collect();

    let mut t_store = store.clone();
    let mut tape = Tape::new();
    let mut b = Bindings::new();
    let loss = build(&mut tape, &mut b, &mut t_store)?;
    tape.backward(loss)?;
    b.collect_grads(&tape, &mut t_store)?;
    let g = t_store.get("mu")?.tensor.grad.clone().expect("mu is trainable");
    let mut e_auto = 0.0f64;
    for j in 0..c {
        e_auto = e_auto.max(rel_err(g[j], expected[j]));
    }

    let mut e_fd = 0.0f64;
    for j in 0..c {
        let base = t_store.get("mu")?.tensor.data()[j];
        t_store.get_mut("mu")?.tensor.data_mut()[j] = base + FD_STEP;
        let plus = eval_loss(&build, &mut t_store)?;
        t_store.get_mut("mu")?.tensor.data_mut()[j] = base - FD_STEP;
        let minus = eval_loss(&build, &mut t_store)?;
        t_store.get_mut("mu")?.tensor.data_mut()[j] = base;
        e_fd = e_fd.max(rel_err((plus - minus) / (2.0 * FD_STEP), expected[j]));
    }

    Ok(vec![
        CheckEntry {
            target: "layer.context_mu_chain.analytic".into(),
            coords: c,
            skipped: 0,
            max_rel_err: e_auto,
        },
        CheckEntry {
            target: "layer.context_mu_chain.fd".into(),
            coords: c,
            skipped: 0,
            max_rel_err: e_fd,
        },
    ])
}

// ---- model scope -----------------------------------------------------------

fn model_targets(seed: u64) -> Result<Vec<Target>> {
    let mut rng = salted(seed, "model.cifar_cn");
    let spec = ConvNetSpec::cifar(10).with_input_cn(CnSpec::new(3));
    let model = ConvNet::<f64>::build(spec, seed ^ 0x7a)?;
    let store = model.params.clone();
    let x = uniform(&mut rng, Shape4::new(2, 3, 32, 32), -2.0, 2.0);
    let labels = vec![3usize, 7];
    let ctx = vec![0usize, 2];
    let cell = RefCell::new(model);
    let build: BuildFn = Box::new(move |tape, b, store| {
        let mut m = cell.borrow_mut();
        std::mem::swap(&mut m.params, store);
        let result = (|| {
            let xv = tape.constant(x.clone());
            let mut diag = ForwardDiag::default();
            let logits = m.forward(
                tape,
                b,
                xv,
                ForwardMode::Collect,
                Some(&ctx),
                InferenceChoice::Cn,
                &mut diag,
            )?;
            tape.softmax_cross_entropy(logits, &labels)
        })();
        std::mem::swap(&mut m.params, store);
        result
    });
    Ok(vec![Target { name: "model.cifar_cn".into(), cap: 3, step: 1e-6, store, build }])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_scope_is_clean_at_default_seed() {
        let report = run(Scope::Op, 0).unwrap();
        assert!(report.passed(), "\n{}", report.render());
        assert!(report.entries.len() >= 20);
        for e in &report.entries {
            assert!(e.coords > 0, "{} checked nothing", e.target);
        }
        let lin = report
            .entries
            .iter()
            .find(|e| e.target == "op.backward_linearity")
            .expect("linearity entry present");
        assert!(lin.max_rel_err <= 1e-12, "linearity err {}", lin.max_rel_err);
    }

    #[test]
    fn layer_scope_is_clean_and_carries_the_analytic_chain_term() {
        let report = run(Scope::Layer, 0).unwrap();
        assert!(report.passed(), "\n{}", report.render());
        let find = |n: &str| {
            report
                .entries
                .iter()
                .find(|e| e.target == n)
                .unwrap_or_else(|| panic!("missing entry {n}"))
        };
        assert!(find("layer.context_mu_chain.analytic").max_rel_err <= 1e-10);
        assert!(find("layer.context_mu_chain.fd").max_rel_err <= 1e-6);
        for name in [
            "layer.batch_norm",
            "layer.layer_norm",
            "layer.instance_norm",
            "layer.group_norm",
            "layer.mixture_norm",
            "layer.context_channels",
            "layer.context_patches",
        ] {
            find(name);
        }
    }

    #[test]
    fn report_lists_every_target_with_a_verdict() {
        let report = run(Scope::Op, 3).unwrap();
        let text = report.render();
        for e in &report.entries {
            assert!(text.contains(&e.target), "render lost {}", e.target);
        }
        assert!(text.contains("pass"));
    }

    #[test]
    fn a_bad_entry_fails_the_report() {
        let report = CheckReport {
            scope: Scope::Op,
            seed: 0,
            entries: vec![CheckEntry {
                target: "made.up".into(),
                coords: 1,
                skipped: 0,
                max_rel_err: 3e-4,
            }],
        };
        assert!(!report.passed());
        assert!(report.render().contains("FAIL"));
    }

    #[test]
    fn scope_names_parse_like_the_cli_spells_them() {
        assert_eq!("op".parse::<Scope>().unwrap(), Scope::Op);
        assert_eq!("layers".parse::<Scope>().unwrap(), Scope::Layer);
        assert_eq!("model".parse::<Scope>().unwrap(), Scope::Model);
        assert!("graph".parse::<Scope>().is_err());
    }

    #[test]
    fn relative_error_floors_near_zero() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-12, 0.0) - 1e-4).abs() < 1e-12);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn model_scope_passes_on_a_two_sample_batch() {
        let report = run(Scope::Model, 0).unwrap();
        assert!(report.passed(), "\n{}", report.render());
        let e = &report.entries[0];
        assert_eq!(e.target, "model.cifar_cn");
        assert!(e.coords >= 20, "only {} coordinates checked", e.coords);
    }
}
