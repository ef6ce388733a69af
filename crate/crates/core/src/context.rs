//! Context normalization: standardize each sample with *learned* per-context
//! moments instead of batch statistics.
//!
//! A small embedder maps a context id `r` to a mean and variance: a one-hot
//! of `r` picks row `r` of an embedding table, and two linear heads read a
//! mean vector and a pre-variance that passes through softplus (plus a small
//! floor) to stay positive. Normalization is then the usual
//! `(x - mu_r) / sqrt(sigma2_r + eps)`, with everything — including the
//! moments — trained by backpropagation.
//!
//! Two granularities are supported: per-channel moments over feature maps,
//! and per-patch moments where each image is cut into non-overlapping
//! patches treated as flattened vectors.
//!
//! At inference time the context id may be unknown; [`ContextNorm::cn_plus`]
//! treats the learned per-context moments as a uniform-weight Gaussian
//! mixture and normalizes by posterior-weighted batch moments, exactly the
//! mixture-normalization aggregation with coefficient `sqrt(T)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::kernels::{self, ReduceSet};
use crate::norm::{mixture_batch_normalize, ForwardDiag, MixCoeff};
use crate::param::{Bindings, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape4, Tensor4};

/// Additive floor under every learned variance.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Half-width of the uniform init for embedding and head weights.
const INIT_SPAN: f64 = 0.05;

/// Granularity of the learned moments.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CnMode {
    /// One mean/variance per channel (moment dim = C).
    Channels,
    /// One mean/variance per flattened `ph x pw` patch (moment dim = C*ph*pw).
    Patches { ph: usize, pw: usize },
}

impl FromStr for CnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "channels" {
            return Ok(CnMode::Channels);
        }
        if let Some(rest) = s.strip_prefix("patches:") {
            if let Some((a, b)) = rest.split_once('x') {
                if let (Ok(ph), Ok(pw)) = (a.parse(), b.parse()) {
                    return Ok(CnMode::Patches { ph, pw });
                }
            }
        }
        Err(Error::Config(format!(
            "unknown context-norm mode '{s}' (expected channels or patches:<h>x<w>)"
        )))
    }
}

impl fmt::Display for CnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CnMode::Channels => write!(f, "channels"),
            CnMode::Patches { ph, pw } => write!(f, "patches:{ph}x{pw}"),
        }
    }
}

/// Where a context labeling came from.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ContextProvenance {
    /// Coarse class labels (e.g. superclasses of a fine-grained dataset).
    Superclass,
    /// Source dataset in a blended set.
    Dataset,
    /// Hard assignment to a fitted mixture component.
    GmmComponent,
    /// Loaded from a file or supplied by the caller.
    Custom,
}

/// Per-sample context ids with their provenance.
#[derive(Clone, Debug)]
pub struct ContextAssignment {
    ids: Vec<usize>,
    contexts: usize,
    pub provenance: ContextProvenance,
}

impl ContextAssignment {
    pub fn new(ids: Vec<usize>, contexts: usize, provenance: ContextProvenance) -> Result<Self> {
        if contexts == 0 {
            return Err(Error::Config("need at least one context".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= contexts) {
            return Err(Error::Input(format!("context id {bad} out of range 0..{contexts}")));
        }
        Ok(ContextAssignment { ids, contexts, provenance })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids of a subset of samples, in the order given.
    pub fn select(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.ids[i]).collect()
    }

    /// Samples per context.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.contexts];
        for &id in &self.ids {
            h[id] += 1;
        }
        h
    }

    /// Serialize as `index,context` CSV.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("index,context\n");
        for (i, &id) in self.ids.iter().enumerate() {
            s.push_str(&format!("{i},{id}\n"));
        }
        s
    }

    /// Parse the `index,context` CSV form; indices must be 0..n in order.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(0, "empty context file"))?;
        if header.trim() != "index,context" {
            return Err(Error::format(0, format!("expected 'index,context' header, got '{header}'")));
        }
        let mut offset = header.len() as u64 + 1;
        let mut ids = Vec::new();
        for (row, line) in lines.enumerate() {
            let line_t = line.trim();
            if line_t.is_empty() {
                offset += line.len() as u64 + 1;
                continue;
            }
            let (i, r) = line_t
                .split_once(',')
                .ok_or_else(|| Error::format(offset, format!("expected 'index,context', got '{line_t}'")))?;
            let i: usize = i
                .trim()
                .parse()
                .map_err(|_| Error::format(offset, format!("bad index '{i}'")))?;
            if i != row {
                return Err(Error::format(offset, format!("index {i} out of order (expected {row})")));
            }
            let r: usize = r
                .trim()
                .parse()
                .map_err(|_| Error::format(offset, format!("bad context id '{r}'")))?;
            ids.push(r);
            offset += line.len() as u64 + 1;
        }
        if ids.is_empty() {
            return Err(Error::format(offset, "no context rows"));
        }
        let contexts = ids.iter().max().unwrap() + 1;
        ContextAssignment::new(ids, contexts, ContextProvenance::Custom)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv_string())?)
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

/// Moments the embedder produces for one context.
#[derive(Clone, Debug)]
pub struct ContextParams<S: Scalar> {
    pub alpha: Vec<S>,
    pub mu: Vec<S>,
    pub sigma2: Vec<S>,
}

/// Configuration of a [`ContextNorm`] layer.
#[derive(Clone, Copy, Debug)]
pub struct CnSpec {
    pub contexts: usize,
    pub embed_dim: usize,
    pub mode: CnMode,
    pub epsilon: f64,
}

impl CnSpec {
    pub fn new(contexts: usize) -> Self {
        CnSpec { contexts, embed_dim: 64, mode: CnMode::Channels, epsilon: 1e-5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.contexts == 0 {
            return Err(Error::Config("need at least one context".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if let CnMode::Patches { ph, pw } = self.mode {
            if ph == 0 || pw == 0 {
                return Err(Error::Config("patch extent must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Context normalization layer; owns one embedder table and two heads.
#[derive(Clone, Debug)]
pub struct ContextNorm {
    prefix: String,
    contexts: usize,
    embed_dim: usize,
    /// Moment dimensionality: C for channels mode, C*ph*pw for patches.
    dim: usize,
    channels: usize,
    mode: CnMode,
    epsilon: f64,
}

impl ContextNorm {
    /// Register parameters under `prefix` for inputs with `channels` channels.
    ///
    /// Weights start uniform in ±0.05; the pre-variance bias starts where
    /// softplus yields a unit variance, so the layer initially standardizes
    /// against N(0, 1) for every context.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        spec: &CnSpec,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let dim = match spec.mode {
            CnMode::Channels => channels,
            CnMode::Patches { ph, pw } => channels * ph * pw,
        };
        let (t, e) = (spec.contexts, spec.embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| -> Tensor4<S> {
            let data = (0..rows * cols)
                .map(|_| S::cast((rng.random::<f64>() * 2.0 - 1.0) * INIT_SPAN))
                .collect();
            Tensor4::from_vec(Shape4::matrix(rows, cols), data).expect("sized init")
        };
        let w_r = uniform(t, e);
        let w_mu = uniform(e, dim);
        let w_sigma = uniform(e, dim);
        store.insert(&format!("{prefix}.w_r"), w_r, true)?;
        store.insert(&format!("{prefix}.b_r"), Tensor4::zeros(Shape4::matrix(1, e)), true)?;
        store.insert(&format!("{prefix}.w_mu"), w_mu, true)?;
        store.insert(&format!("{prefix}.b_mu"), Tensor4::zeros(Shape4::matrix(1, dim)), true)?;
        store.insert(&format!("{prefix}.w_sigma"), w_sigma, true)?;
        // softplus(b) + floor = 1  =>  b = ln(exp(1 - floor) - 1)
        let b0 = S::cast(((1.0 - SIGMA_FLOOR).exp() - 1.0).ln());
        store.insert(
            &format!("{prefix}.b_sigma"),
            Tensor4::filled(Shape4::matrix(1, dim), b0),
            true,
        )?;
        Ok(ContextNorm {
            prefix: prefix.to_string(),
            contexts: t,
            embed_dim: e,
            dim,
            channels,
            mode: spec.mode,
            epsilon: spec.epsilon,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn mode(&self) -> CnMode {
        self.mode
    }

    /// Build the embedder chain for a row of context ids: returns `(mu,
    /// sigma2)` as `(R, dim)` matrices on the tape.
    fn embed<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        b: &mut Bindings,
        ids: &[usize],
    ) -> Result<(Var, Var)> {
        for &id in ids {
            if id >= self.contexts {
                return Err(Error::Input(format!(
                    "context id {id} out of range 0..{}",
                    self.contexts
                )));
            }
        }
        let w_r = b.bind(tape, store, &format!("{}.w_r", self.prefix))?;
        let b_r = b.bind(tape, store, &format!("{}.b_r", self.prefix))?;
        let w_mu = b.bind(tape, store, &format!("{}.w_mu", self.prefix))?;
        let b_mu = b.bind(tape, store, &format!("{}.b_mu", self.prefix))?;
        let w_sigma = b.bind(tape, store, &format!("{}.w_sigma", self.prefix))?;
        let b_sigma = b.bind(tape, store, &format!("{}.b_sigma", self.prefix))?;

        let r = ids.len();
        // one-hot times the table is a row gather
        let rows = tape.gather_rows(w_r, ids)?;
        let bre = tape.expand(b_r, ReduceSet::PerChannel, Shape4::matrix(r, self.embed_dim))?;
        let alpha = tape.add(rows, bre)?;

        let dshape = Shape4::matrix(r, self.dim);
        let mu_lin = tape.matmul(alpha, false, w_mu, false)?;
        let bmue = tape.expand(b_mu, ReduceSet::PerChannel, dshape)?;
        let mu = tape.add(mu_lin, bmue)?;

        let sg_lin = tape.matmul(alpha, false, w_sigma, false)?;
        let bsge = tape.expand(b_sigma, ReduceSet::PerChannel, dshape)?;
        let z = tape.add(sg_lin, bsge)?;
        let sp = tape.softplus(z);
        let sigma2 = tape.add_scalar(sp, S::cast(SIGMA_FLOOR));
        Ok((mu, sigma2))
    }

    /// Eagerly evaluate the embedder for one context id.
    pub fn params_for<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        r: usize,
    ) -> Result<ContextParams<S>> {
        if r >= self.contexts {
            return Err(Error::Input(format!("context id {r} out of range 0..{}", self.contexts)));
        }
        let w_r = store.tensor(&format!("{}.w_r", self.prefix))?;
        let b_r = store.tensor(&format!("{}.b_r", self.prefix))?;
        let alpha: Vec<S> = w_r
            .row(r)
            .iter()
            .zip(b_r.data())
            .map(|(&w, &b)| w + b)
            .collect();
        let alpha_t = Tensor4::matrix(1, self.embed_dim, alpha.clone())?;
        let head = |w: &Tensor4<S>, b: &Tensor4<S>| -> Result<Vec<S>> {
            let lin = kernels::matmul(&alpha_t, false, w, false)?;
            Ok(lin.data().iter().zip(b.data()).map(|(&l, &bv)| l + bv).collect())
        };
        let mu = head(
            store.tensor(&format!("{}.w_mu", self.prefix))?,
            store.tensor(&format!("{}.b_mu", self.prefix))?,
        )?;
        let z = head(
            store.tensor(&format!("{}.w_sigma", self.prefix))?,
            store.tensor(&format!("{}.b_sigma", self.prefix))?,
        )?;
        let floor = S::cast(SIGMA_FLOOR);
        let sigma2 = z
            .into_iter()
            .map(|v| {
                let sp = if v > S::zero() { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
                sp + floor
            })
            .collect();
        Ok(ContextParams { alpha, mu, sigma2 })
    }

    /// Normalize a batch given each sample's context id. Training and
    /// known-context inference are the same computation.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        b: &mut Bindings,
        x: Var,
        ctx: &[usize],
    ) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.c != self.channels {
            return Err(Error::Shape(format!(
                "context norm '{}' built for {} channels, input has {}",
                self.prefix, self.channels, shape.c
            )));
        }
        if ctx.len() != shape.n {
            return Err(Error::Input(format!(
                "{} context ids for batch of {}",
                ctx.len(),
                shape.n
            )));
        }
        if shape.n == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        match self.mode {
            CnMode::Channels => {
                let (mu, sigma2) = self.embed(tape, store, b, ctx)?; // (N, C)
                let veps = tape.add_scalar(sigma2, S::cast(self.epsilon));
                let denom = tape.rsqrt(veps);
                let me = tape.expand(mu, ReduceSet::PerSampleChannel, shape)?;
                let de = tape.expand(denom, ReduceSet::PerSampleChannel, shape)?;
                let diff = tape.sub(x, me)?;
                tape.mul(diff, de)
            }
            CnMode::Patches { ph, pw } => {
                let xv = tape.patch_vectors(x, ph, pw)?;
                let per = (shape.h / ph) * (shape.w / pw);
                let ids: Vec<usize> =
                    ctx.iter().flat_map(|&id| std::iter::repeat_n(id, per)).collect();
                let (mu, sigma2) = self.embed(tape, store, b, &ids)?; // (N*P, D)
                let veps = tape.add_scalar(sigma2, S::cast(self.epsilon));
                let denom = tape.rsqrt(veps);
                let diff = tape.sub(xv, mu)?;
                let xhat = tape.mul(diff, denom)?;
                tape.patch_vectors_rev(xhat, shape, ph, pw)
            }
        }
    }

    /// The learned per-context moments viewed as a uniform-weight mixture.
    pub fn as_mixture<S: Scalar>(&self, store: &ParamStore<S>) -> Result<GmmModel<S>> {
        let mut means = Vec::with_capacity(self.contexts * self.dim);
        let mut vars = Vec::with_capacity(self.contexts * self.dim);
        for r in 0..self.contexts {
            let p = self.params_for(store, r)?;
            means.extend(p.mu);
            vars.extend(p.sigma2);
        }
        GmmModel::with_uniform_weights(self.contexts, self.dim, means, vars)
    }

    /// Context-free inference: posterior-weighted batch standardization
    /// against the learned moments (uniform priors, coefficient `sqrt(T)`).
    pub fn cn_plus<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        diag: &mut ForwardDiag,
    ) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.c != self.channels {
            return Err(Error::Shape(format!(
                "context norm '{}' built for {} channels, input has {}",
                self.prefix, self.channels, shape.c
            )));
        }
        let gmm = self.as_mixture(store)?;
        let (xv, rebuild): (Var, Box<dyn Fn(&mut Tape<S>, Var) -> Result<Var>>) = match self.mode {
            CnMode::Channels => {
                let v = tape.channel_vectors(x)?;
                (v, Box::new(move |t: &mut Tape<S>, v| t.channel_vectors_rev(v, shape)))
            }
            CnMode::Patches { ph, pw } => {
                let v = tape.patch_vectors(x, ph, pw)?;
                (v, Box::new(move |t: &mut Tape<S>, v| t.patch_vectors_rev(v, shape, ph, pw)))
            }
        };
        let mix = mixture_batch_normalize(tape, xv, &gmm, self.epsilon, MixCoeff::SqrtK)?;
        for &j in &mix.skipped {
            diag.note(format!("{}: context {j} empty on this batch", self.prefix));
        }
        rebuild(tape, mix.out)
    }

    /// Re-render `x` from context `from` as if it came from context `to`:
    /// standardize with `from`'s moments, then apply `to`'s. Channels mode
    /// only. Transferring back is the identity up to rounding.
    pub fn style_transfer<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor4<S>,
        from: usize,
        to: usize,
    ) -> Result<Tensor4<S>> {
        if self.mode != CnMode::Channels {
            return Err(Error::Config(
                "style transfer needs per-channel moments (channels mode)".into(),
            ));
        }
        let s = x.shape();
        if s.c != self.channels {
            return Err(Error::Shape(format!(
                "context norm '{}' built for {} channels, input has {}",
                self.prefix, self.channels, s.c
            )));
        }
        let pa = self.params_for(store, from)?;
        let pb = self.params_for(store, to)?;
        let eps = S::cast(self.epsilon);
        let mut out = x.clone();
        let od = out.data_mut();
        let plane = s.h * s.w;
        for n in 0..s.n {
            for c in 0..s.c {
                let sa = (pa.sigma2[c] + eps).sqrt();
                let sb = (pb.sigma2[c] + eps).sqrt();
                let (ma, mb) = (pa.mu[c], pb.mu[c]);
                let base = s.idx(n, c, 0, 0);
                for v in &mut od[base..base + plane] {
                    *v = (*v - ma) / sa * sb + mb;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(mode: CnMode, channels: usize) -> (ContextNorm, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut spec = CnSpec::new(3);
        spec.embed_dim = 8;
        spec.mode = mode;
        let cn = ContextNorm::init(&mut store, "cn", channels, &spec, 11).unwrap();
        (cn, store)
    }

    fn rand_tensor(shape: Shape4, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn cn_mode_parses_and_prints() {
        for s in ["channels", "patches:4x4", "patches:2x8"] {
            let m: CnMode = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("patch:4".parse::<CnMode>().is_err());
    }

    #[test]
    fn initial_moments_are_standard_normal() {
        let (cn, store) = layer(CnMode::Channels, 5);
        // biases dominate at init: mu ~ +-(tiny), sigma2 ~ 1
        for r in 0..3 {
            let p = cn.params_for(&store, r).unwrap();
            for &m in &p.mu {
                assert!(m.abs() < 0.05, "mu {m}");
            }
            for &v in &p.sigma2 {
                assert!((v - 1.0).abs() < 0.05, "sigma2 {v}");
            }
        }
        assert!(cn.params_for(&store, 3).is_err());
    }

    #[test]
    fn forward_uses_each_samples_own_context() {
        let (cn, store) = layer(CnMode::Channels, 4);
        let x = rand_tensor(Shape4::new(2, 4, 3, 3), 1);
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let xv = tape.leaf(x.clone());
        let y = cn.forward(&mut tape, &store, &mut b, xv, &[0, 2]).unwrap();
        let y = tape.value(y).clone();
        // sample 0 against context-0 params, sample 1 against context-2 params
        for (n, r) in [(0usize, 0usize), (1, 2)] {
            let p = cn.params_for(&store, r).unwrap();
            for c in 0..4 {
                let want = (x.at(n, c, 1, 1) - p.mu[c]) / (p.sigma2[c] + 1e-5).sqrt();
                assert!((y.at(n, c, 1, 1) - want).abs() < 1e-12);
            }
        }
        // wrong id count and out-of-range ids are input errors
        assert!(cn.forward(&mut tape, &store, &mut b, xv, &[0]).is_err());
        assert!(cn.forward(&mut tape, &store, &mut b, xv, &[0, 7]).is_err());
    }

    #[test]
    fn patches_mode_normalizes_each_patch_vector() {
        let (cn, store) = layer(CnMode::Patches { ph: 2, pw: 2 }, 3);
        let x = rand_tensor(Shape4::new(2, 3, 4, 4), 2);
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let xv = tape.leaf(x.clone());
        let y = cn.forward(&mut tape, &store, &mut b, xv, &[1, 0]).unwrap();
        let y = tape.value(y).clone();
        let p1 = cn.params_for(&store, 1).unwrap();
        // first patch of sample 0: channel 0, offset (0,0) maps to dim 0
        let want = (x.at(0, 0, 0, 0) - p1.mu[0]) / (p1.sigma2[0] + 1e-5).sqrt();
        assert!((y.at(0, 0, 0, 0) - want).abs() < 1e-12);
        // patch geometry must tile the image
        let bad = rand_tensor(Shape4::new(1, 3, 5, 4), 3);
        let mut tape = Tape::new();
        let xv = tape.leaf(bad);
        assert!(cn.forward(&mut tape, &store, &mut Bindings::new(), xv, &[0]).is_err());
    }

    #[test]
    fn style_transfer_round_trip_is_identity() {
        let (cn, store) = layer(CnMode::Channels, 3);
        let x = rand_tensor(Shape4::new(2, 3, 8, 8), 4);
        let there = cn.style_transfer(&store, &x, 0, 2).unwrap();
        let back = cn.style_transfer(&store, &there, 2, 0).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let (pcn, pstore) = layer(CnMode::Patches { ph: 2, pw: 2 }, 3);
        assert!(pcn.style_transfer(&pstore, &x, 0, 1).is_err());
    }

    #[test]
    fn assignment_csv_round_trip() {
        let a = ContextAssignment::new(vec![0, 2, 1, 2], 3, ContextProvenance::Dataset).unwrap();
        let csv = a.to_csv_string();
        assert!(csv.starts_with("index,context\n0,0\n1,2\n"));
        let b = ContextAssignment::from_csv_str(&csv).unwrap();
        assert_eq!(a.ids(), b.ids());
        assert_eq!(b.contexts(), 3);
        assert_eq!(b.histogram(), vec![1, 1, 2]);

        assert!(ContextAssignment::from_csv_str("nope\n0,1\n").is_err());
        assert!(ContextAssignment::from_csv_str("index,context\n1,0\n").is_err());
        assert!(ContextAssignment::new(vec![3], 3, ContextProvenance::Custom).is_err());
    }

    #[test]
    fn as_mixture_collects_all_contexts() {
        let (cn, store) = layer(CnMode::Channels, 4);
        let g = cn.as_mixture(&store).unwrap();
        assert_eq!(g.k(), 3);
        assert_eq!(g.dim(), 4);
        for r in 0..3 {
            let p = cn.params_for(&store, r).unwrap();
            assert_eq!(g.mean(r), &p.mu[..]);
            assert_eq!(g.variance(r), &p.sigma2[..]);
        }
    }
}
