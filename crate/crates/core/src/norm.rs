//! The normalization family: batch, layer, instance, group, and mixture.
//!
//! Every layer is built as a composition of tape primitives, so gradients
//! flow through the batch statistics themselves (and, for the mixture layer,
//! through the posteriors) without hand-derived backward rules.
//!
//! Batch normalization standardizes each channel with the *biased* batch
//! variance and keeps exponential running moments for inference. The axis
//! variants differ only in which index set the moments are taken over.
//! Mixture normalization soft-partitions the batch with a Gaussian mixture
//! fitted beforehand (see [`mn_fit_stage`]) and standardizes each sample by
//! responsibility-weighted component moments.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gmm::{self, EmOptions, FitDiagnostics, GmmModel};
use crate::kernels::{self, ReduceSet};
use crate::param::{Bindings, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Reduction, Tape, Var};
use crate::tensor::{Shape4, Tensor4};

/// Threshold under which a mixture component is dropped from a batch.
pub const COMPONENT_GUARD: f64 = 1e-12;

/// How a layer should behave for one pass.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ForwardMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
    /// Batch statistics without touching running state (used for statistics
    /// collection passes and gradient checking).
    Collect,
}

/// Which normalization a layer applies.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NormMode {
    Batch,
    Layer,
    Instance,
    /// Channel groups of the given size; size `C` reduces to `Layer`,
    /// size 1 to `Instance`.
    Group(usize),
    /// Mixture normalization with the given component count.
    Mixture(usize),
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormMode::Batch),
            "layer" => Ok(NormMode::Layer),
            "instance" => Ok(NormMode::Instance),
            _ => {
                if let Some(g) = s.strip_prefix("group:") {
                    let g: usize = g
                        .parse()
                        .map_err(|_| Error::Config(format!("bad group size in '{s}'")))?;
                    return Ok(NormMode::Group(g));
                }
                if let Some(k) = s.strip_prefix("mixture:") {
                    let k: usize = k
                        .parse()
                        .map_err(|_| Error::Config(format!("bad component count in '{s}'")))?;
                    return Ok(NormMode::Mixture(k));
                }
                Err(Error::Config(format!(
                    "unknown norm mode '{s}' (expected batch, layer, instance, group:<size>, mixture:<k>)"
                )))
            }
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormMode::Batch => write!(f, "batch"),
            NormMode::Layer => write!(f, "layer"),
            NormMode::Instance => write!(f, "instance"),
            NormMode::Group(g) => write!(f, "group:{g}"),
            NormMode::Mixture(k) => write!(f, "mixture:{k}"),
        }
    }
}

/// Full description of a normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct NormSpec {
    pub mode: NormMode,
    pub epsilon: f64,
    /// Fraction of the new batch statistic mixed into the running value.
    pub momentum: f64,
    /// Learn a per-channel scale and shift after standardization.
    pub affine: bool,
}

impl NormSpec {
    pub fn new(mode: NormMode) -> Self {
        NormSpec { mode, epsilon: 1e-5, momentum: 0.1, affine: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config(format!(
                "momentum must lie in (0, 1], got {}",
                self.momentum
            )));
        }
        match self.mode {
            NormMode::Group(0) => Err(Error::Config("group size must be positive".into())),
            NormMode::Mixture(0) => Err(Error::Config("mixture needs at least one component".into())),
            _ => Ok(()),
        }
    }
}

/// Layer notes surfaced from a forward pass (e.g. skipped mixture components).
#[derive(Clone, Debug, Default)]
pub struct ForwardDiag {
    pub notes: Vec<String>,
}

impl ForwardDiag {
    pub fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }
}

fn ema_update<S: Scalar>(running: &mut [S], batch: &[S], momentum: f64) {
    let lam = S::cast(momentum);
    let keep = S::one() - lam;
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = keep * *r + lam * b;
    }
}

fn bind_affine<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    b: &mut Bindings,
    prefix: &str,
    xhat: Var,
    shape: Shape4,
) -> Result<Var> {
    let gamma = b.bind(tape, store, &format!("{prefix}.gamma"))?;
    let beta = b.bind(tape, store, &format!("{prefix}.beta"))?;
    let ge = tape.expand(gamma, ReduceSet::PerChannel, shape)?;
    let be = tape.expand(beta, ReduceSet::PerChannel, shape)?;
    let scaled = tape.mul(xhat, ge)?;
    tape.add(scaled, be)
}

// ---- batch normalization -------------------------------------------------

/// Per-channel batch normalization with running moments.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    prefix: String,
    channels: usize,
    epsilon: f64,
    momentum: f64,
    affine: bool,
}

impl BatchNorm {
    /// Register state under `prefix` and return the layer handle.
    ///
    /// State: optional `gamma` (ones) / `beta` (zeros), plus non-trainable
    /// `running_mean` (zeros), `running_var` (ones) and a `steps` counter.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        spec: &NormSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let cshape = Shape4::new(1, channels, 1, 1);
        if spec.affine {
            store.insert(&format!("{prefix}.gamma"), Tensor4::ones(cshape), true)?;
            store.insert(&format!("{prefix}.beta"), Tensor4::zeros(cshape), true)?;
        }
        store.insert(&format!("{prefix}.running_mean"), Tensor4::zeros(cshape), false)?;
        store.insert(&format!("{prefix}.running_var"), Tensor4::ones(cshape), false)?;
        store.insert(&format!("{prefix}.steps"), Tensor4::zeros(Shape4::new(1, 1, 1, 1)), false)?;
        Ok(BatchNorm {
            prefix: prefix.to_string(),
            channels,
            epsilon: spec.epsilon,
            momentum: spec.momentum,
            affine: spec.affine,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        b: &mut Bindings,
        x: Var,
        mode: ForwardMode,
    ) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm '{}' built for {} channels, input has {}",
                self.prefix, self.channels, shape.c
            )));
        }
        let eps = S::cast(self.epsilon);

        let xhat = match mode {
            ForwardMode::Train | ForwardMode::Collect => {
                if ReduceSet::PerChannel.count(shape)? < 2 {
                    return Err(Error::Input(format!(
                        "batch norm needs at least 2 values per channel, got shape {shape}"
                    )));
                }
                let mean = tape.reduce(x, ReduceSet::PerChannel, Reduction::Mean)?;
                let me = tape.expand(mean, ReduceSet::PerChannel, shape)?;
                let diff = tape.sub(x, me)?;
                let sq = tape.mul(diff, diff)?;
                let var = tape.reduce(sq, ReduceSet::PerChannel, Reduction::Mean)?;
                if mode == ForwardMode::Train {
                    let mean_v = tape.value(mean).data().to_vec();
                    let var_v = tape.value(var).data().to_vec();
                    let rm = store.get_mut(&format!("{}.running_mean", self.prefix))?;
                    ema_update(rm.tensor.data_mut(), &mean_v, self.momentum);
                    let rv = store.get_mut(&format!("{}.running_var", self.prefix))?;
                    ema_update(rv.tensor.data_mut(), &var_v, self.momentum);
                    let steps = store.get_mut(&format!("{}.steps", self.prefix))?;
                    let n = steps.tensor.data()[0] + S::one();
                    steps.tensor.data_mut()[0] = n;
                }
                let veps = tape.add_scalar(var, eps);
                let denom = tape.rsqrt(veps);
                let de = tape.expand(denom, ReduceSet::PerChannel, shape)?;
                tape.mul(diff, de)?
            }
            ForwardMode::Eval => {
                let rm = store.tensor(&format!("{}.running_mean", self.prefix))?.clone();
                let rv = store.tensor(&format!("{}.running_var", self.prefix))?.clone();
                let rm = tape.constant(rm);
                let rv = tape.constant(rv);
                let me = tape.expand(rm, ReduceSet::PerChannel, shape)?;
                let diff = tape.sub(x, me)?;
                let veps = tape.add_scalar(rv, eps);
                let denom = tape.rsqrt(veps);
                let de = tape.expand(denom, ReduceSet::PerChannel, shape)?;
                tape.mul(diff, de)?
            }
        };

        if self.affine {
            bind_affine(tape, store, b, &self.prefix, xhat, shape)
        } else {
            Ok(xhat)
        }
    }
}

// ---- layer / instance / group normalization ------------------------------

/// Batch-independent normalization over a per-sample index set.
#[derive(Clone, Debug)]
pub struct AxisNorm {
    prefix: String,
    mode: NormMode,
    channels: usize,
    epsilon: f64,
    affine: bool,
}

impl AxisNorm {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        spec: &NormSpec,
    ) -> Result<Self> {
        spec.validate()?;
        match spec.mode {
            NormMode::Layer | NormMode::Instance => {}
            NormMode::Group(g) => {
                if channels % g != 0 {
                    return Err(Error::Config(format!(
                        "group size {g} does not divide {channels} channels"
                    )));
                }
            }
            other => {
                return Err(Error::Config(format!("axis norm cannot implement mode '{other}'")))
            }
        }
        if spec.affine {
            let cshape = Shape4::new(1, channels, 1, 1);
            store.insert(&format!("{prefix}.gamma"), Tensor4::ones(cshape), true)?;
            store.insert(&format!("{prefix}.beta"), Tensor4::zeros(cshape), true)?;
        }
        Ok(AxisNorm {
            prefix: prefix.to_string(),
            mode: spec.mode,
            channels,
            epsilon: spec.epsilon,
            affine: spec.affine,
        })
    }

    fn set(&self) -> ReduceSet {
        match self.mode {
            NormMode::Layer => ReduceSet::PerSample,
            NormMode::Instance => ReduceSet::PerSampleChannel,
            NormMode::Group(g) => ReduceSet::PerSampleGroup(g),
            _ => unreachable!("validated in init"),
        }
    }

    /// Identical in every [`ForwardMode`]: the statistics never cross samples.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        b: &mut Bindings,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.c != self.channels {
            return Err(Error::Shape(format!(
                "axis norm '{}' built for {} channels, input has {}",
                self.prefix, self.channels, shape.c
            )));
        }
        let set = self.set();
        let mean = tape.reduce(x, set, Reduction::Mean)?;
        let me = tape.expand(mean, set, shape)?;
        let diff = tape.sub(x, me)?;
        let sq = tape.mul(diff, diff)?;
        let var = tape.reduce(sq, set, Reduction::Mean)?;
        let veps = tape.add_scalar(var, S::cast(self.epsilon));
        let denom = tape.rsqrt(veps);
        let de = tape.expand(denom, set, shape)?;
        let xhat = tape.mul(diff, de)?;
        if self.affine {
            bind_affine(tape, store, b, &self.prefix, xhat, shape)
        } else {
            Ok(xhat)
        }
    }
}

// ---- mixture normalization -----------------------------------------------

/// Coefficient applied to each component's standardized contribution.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MixCoeff {
    /// `tau_k / sqrt(lambda_k)`: the mixture-normalization aggregation.
    InvSqrtLambda,
    /// `sqrt(K) * tau_k`: the uniform-prior special case used by CN+.
    SqrtK,
}

/// Result of [`mixture_batch_normalize`].
pub struct MixtureOut {
    /// `(M, C)` aggregated output rows.
    pub out: Var,
    /// Responsibility-weighted component means `(1, C)`, when the component
    /// was active in this batch.
    pub comp_mean: Vec<Option<Var>>,
    /// Responsibility-weighted component variances `(1, C)`.
    pub comp_var: Vec<Option<Var>>,
    /// Components whose total batch responsibility fell below the guard.
    pub skipped: Vec<usize>,
}

/// Posterior matrix of `xv`'s rows under `gmm`, recorded on the tape so that
/// gradients flow through the responsibilities.
pub fn graph_responsibilities<S: Scalar>(
    tape: &mut Tape<S>,
    xv: Var,
    gmm: &GmmModel<S>,
) -> Result<Var> {
    let s = tape.value(xv).shape();
    if !s.is_matrix() || s.c != gmm.dim() {
        return Err(Error::Shape(format!(
            "responsibility input {s} does not match mixture dim {}",
            gmm.dim()
        )));
    }
    let (k, d) = (gmm.k(), gmm.dim());
    let mut inv_var = vec![S::zero(); k * d];
    let mut mu_over_var = vec![S::zero(); k * d];
    let mut cst = vec![S::zero(); k];
    let half = S::cast(0.5);
    for j in 0..k {
        let mut logdet = S::zero();
        let mut quad = S::zero();
        for c in 0..d {
            let v = gmm.variance(j)[c];
            let m = gmm.mean(j)[c];
            inv_var[j * d + c] = v.recip();
            mu_over_var[j * d + c] = m / v;
            logdet += v.ln();
            quad += m * m / v;
        }
        // ln w_j + ln N_j(x) with the x-independent parts folded together
        cst[j] = gmm.weights()[j].ln()
            - half * (logdet + quad + S::cast(d as f64 * crate::gmm::LN_2PI));
    }
    let inv_var = tape.constant(Tensor4::matrix(k, d, inv_var)?);
    let mu_over_var = tape.constant(Tensor4::matrix(k, d, mu_over_var)?);
    let cst = tape.constant(Tensor4::matrix(1, k, cst)?);

    let rows = s.n;
    let x2 = tape.mul(xv, xv)?;
    let quad = tape.matmul(x2, false, inv_var, true)?; // (M, K)
    let lin = tape.matmul(xv, false, mu_over_var, true)?; // (M, K)
    let quad = tape.mul_scalar(quad, S::cast(-0.5));
    let kshape = Shape4::matrix(rows, k);
    let ce = tape.expand(cst, ReduceSet::PerChannel, kshape)?;
    let lp = tape.add(quad, lin)?;
    let lp = tape.add(lp, ce)?;
    tape.softmax_rows(lp)
}

/// Soft-partitioned standardization of `(M, C)` rows by batch moments.
///
/// Every row is standardized against each active component's responsibility-
/// weighted batch mean and variance, and the results are aggregated with the
/// chosen coefficient. Components with total batch responsibility below
/// [`COMPONENT_GUARD`] contribute nothing (their normalized-moment division
/// is never built) and are reported in [`MixtureOut::skipped`].
pub fn mixture_batch_normalize<S: Scalar>(
    tape: &mut Tape<S>,
    xv: Var,
    gmm: &GmmModel<S>,
    epsilon: f64,
    coeff: MixCoeff,
) -> Result<MixtureOut> {
    let s = tape.value(xv).shape();
    let (m, d, k) = (s.n, gmm.dim(), gmm.k());
    let tau = graph_responsibilities(tape, xv, gmm)?;
    let colsum = tape.reduce(tau, ReduceSet::PerChannel, Reduction::Sum)?; // (1, K)
    let totals = tape.value(colsum).data().to_vec();

    let mshape = Shape4::matrix(m, d);
    let mut out: Option<Var> = None;
    let mut comp_mean = Vec::with_capacity(k);
    let mut comp_var = Vec::with_capacity(k);
    let mut skipped = Vec::new();

    for j in 0..k {
        if totals[j].as_f64() < COMPONENT_GUARD {
            skipped.push(j);
            comp_mean.push(None);
            comp_var.push(None);
            continue;
        }
        let tau_j = tape.col(tau, j)?; // (M, 1)
        let total_j = tape.col(colsum, j)?; // (1, 1)
        let te = tape.expand(total_j, ReduceSet::All, Shape4::matrix(m, 1))?;
        let tau_hat = tape.div(tau_j, te)?; // normalized responsibilities

        let mean_j = tape.matmul(tau_hat, true, xv, false)?; // (1, C)
        let me = tape.expand(mean_j, ReduceSet::PerChannel, mshape)?;
        let diff = tape.sub(xv, me)?;
        let sq = tape.mul(diff, diff)?;
        let var_j = tape.matmul(tau_hat, true, sq, false)?; // (1, C)
        let veps = tape.add_scalar(var_j, S::cast(epsilon));
        let denom = tape.rsqrt(veps);
        let de = tape.expand(denom, ReduceSet::PerChannel, mshape)?;
        let xhat_j = tape.mul(diff, de)?;

        let w_j = match coeff {
            MixCoeff::InvSqrtLambda => {
                let lam = gmm.weights()[j];
                tape.mul_scalar(tau_j, lam.sqrt().recip())
            }
            MixCoeff::SqrtK => tau_j,
        };
        let we = tape.expand(w_j, ReduceSet::PerSample, mshape)?;
        let contrib = tape.mul(we, xhat_j)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, contrib)?,
            None => contrib,
        });
        comp_mean.push(Some(mean_j));
        comp_var.push(Some(var_j));
    }

    let mut out = out.ok_or_else(|| {
        Error::Input("every mixture component was empty on this batch".into())
    })?;
    if coeff == MixCoeff::SqrtK {
        out = tape.mul_scalar(out, S::cast((k as f64).sqrt()));
    }
    Ok(MixtureOut { out, comp_mean, comp_var, skipped })
}

/// Mixture normalization layer over channel vectors.
#[derive(Clone, Debug)]
pub struct MixtureNorm {
    prefix: String,
    channels: usize,
    k: usize,
    epsilon: f64,
    momentum: f64,
    affine: bool,
}

impl MixtureNorm {
    /// Register state under `prefix`. The mixture itself arrives later via
    /// [`MixtureNorm::set_gmm`]; using the layer before that is an error.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        spec: &NormSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let NormMode::Mixture(k) = spec.mode else {
            return Err(Error::Config(format!(
                "mixture norm cannot implement mode '{}'",
                spec.mode
            )));
        };
        let kc = Shape4::matrix(k, channels);
        if spec.affine {
            let cshape = Shape4::new(1, channels, 1, 1);
            store.insert(&format!("{prefix}.gamma"), Tensor4::ones(cshape), true)?;
            store.insert(&format!("{prefix}.beta"), Tensor4::zeros(cshape), true)?;
        }
        store.insert(&format!("{prefix}.gmm_weights"), Tensor4::zeros(Shape4::matrix(1, k)), false)?;
        store.insert(&format!("{prefix}.gmm_means"), Tensor4::zeros(kc), false)?;
        store.insert(&format!("{prefix}.gmm_vars"), Tensor4::ones(kc), false)?;
        store.insert(&format!("{prefix}.running_mean"), Tensor4::zeros(kc), false)?;
        store.insert(&format!("{prefix}.running_var"), Tensor4::ones(kc), false)?;
        store.insert(&format!("{prefix}.fitted"), Tensor4::zeros(Shape4::new(1, 1, 1, 1)), false)?;
        Ok(MixtureNorm {
            prefix: prefix.to_string(),
            channels,
            k,
            epsilon: spec.epsilon,
            momentum: spec.momentum,
            affine: spec.affine,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Install the fitted mixture that drives the soft partition.
    pub fn set_gmm<S: Scalar>(&self, store: &mut ParamStore<S>, gmm: &GmmModel<S>) -> Result<()> {
        if gmm.k() != self.k || gmm.dim() != self.channels {
            return Err(Error::Shape(format!(
                "layer '{}' expects a {}x{} mixture, got {}x{}",
                self.prefix,
                self.k,
                self.channels,
                gmm.k(),
                gmm.dim()
            )));
        }
        store
            .get_mut(&format!("{}.gmm_weights", self.prefix))?
            .tensor
            .data_mut()
            .copy_from_slice(gmm.weights());
        store
            .get_mut(&format!("{}.gmm_means", self.prefix))?
            .tensor
            .data_mut()
            .copy_from_slice(gmm.means());
        store
            .get_mut(&format!("{}.gmm_vars", self.prefix))?
            .tensor
            .data_mut()
            .copy_from_slice(gmm.variances());
        // seed inference moments with the mixture's own statistics
        store
            .get_mut(&format!("{}.running_mean", self.prefix))?
            .tensor
            .data_mut()
            .copy_from_slice(gmm.means());
        store
            .get_mut(&format!("{}.running_var", self.prefix))?
            .tensor
            .data_mut()
            .copy_from_slice(gmm.variances());
        store.get_mut(&format!("{}.fitted", self.prefix))?.tensor.data_mut()[0] = S::one();
        Ok(())
    }

    /// Reconstruct the installed mixture from the store.
    pub fn gmm<S: Scalar>(&self, store: &ParamStore<S>) -> Result<GmmModel<S>> {
        let fitted = store.tensor(&format!("{}.fitted", self.prefix))?.data()[0];
        if fitted == S::zero() {
            return Err(Error::Usage(format!(
                "mixture norm '{}' used before a mixture was fitted",
                self.prefix
            )));
        }
        GmmModel::new(
            self.k,
            self.channels,
            store.tensor(&format!("{}.gmm_weights", self.prefix))?.data().to_vec(),
            store.tensor(&format!("{}.gmm_means", self.prefix))?.data().to_vec(),
            store.tensor(&format!("{}.gmm_vars", self.prefix))?.data().to_vec(),
        )
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        b: &mut Bindings,
        x: Var,
        mode: ForwardMode,
        diag: &mut ForwardDiag,
    ) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.c != self.channels {
            return Err(Error::Shape(format!(
                "mixture norm '{}' built for {} channels, input has {}",
                self.prefix, self.channels, shape.c
            )));
        }
        let gmm = self.gmm(store)?;
        let xv = tape.channel_vectors(x)?;

        let outv = match mode {
            ForwardMode::Train | ForwardMode::Collect => {
                let mix =
                    mixture_batch_normalize(tape, xv, &gmm, self.epsilon, MixCoeff::InvSqrtLambda)?;
                for &j in &mix.skipped {
                    diag.note(format!("{}: component {j} empty on this batch", self.prefix));
                }
                if mode == ForwardMode::Train {
                    for j in 0..self.k {
                        let (Some(mv), Some(vv)) = (mix.comp_mean[j], mix.comp_var[j]) else {
                            continue;
                        };
                        let mean_v = tape.value(mv).data().to_vec();
                        let var_v = tape.value(vv).data().to_vec();
                        let d = self.channels;
                        let rm = store.get_mut(&format!("{}.running_mean", self.prefix))?;
                        ema_update(
                            &mut rm.tensor.data_mut()[j * d..(j + 1) * d],
                            &mean_v,
                            self.momentum,
                        );
                        let rv = store.get_mut(&format!("{}.running_var", self.prefix))?;
                        ema_update(
                            &mut rv.tensor.data_mut()[j * d..(j + 1) * d],
                            &var_v,
                            self.momentum,
                        );
                    }
                }
                mix.out
            }
            ForwardMode::Eval => {
                // responsibilities still depend on the input; moments come
                // from the running per-component estimates
                let tau = graph_responsibilities(tape, xv, &gmm)?;
                let rm = store.tensor(&format!("{}.running_mean", self.prefix))?.clone();
                let rv = store.tensor(&format!("{}.running_var", self.prefix))?.clone();
                let (m, d) = (shape.n * shape.h * shape.w, self.channels);
                let mshape = Shape4::matrix(m, d);
                let mut out: Option<Var> = None;
                for j in 0..self.k {
                    let mean_j = tape.constant(
                        Tensor4::matrix(1, d, rm.data()[j * d..(j + 1) * d].to_vec())?,
                    );
                    let var_j = tape.constant(
                        Tensor4::matrix(1, d, rv.data()[j * d..(j + 1) * d].to_vec())?,
                    );
                    let me = tape.expand(mean_j, ReduceSet::PerChannel, mshape)?;
                    let diff = tape.sub(xv, me)?;
                    let veps = tape.add_scalar(var_j, S::cast(self.epsilon));
                    let denom = tape.rsqrt(veps);
                    let de = tape.expand(denom, ReduceSet::PerChannel, mshape)?;
                    let xhat_j = tape.mul(diff, de)?;
                    let tau_j = tape.col(tau, j)?;
                    let w_j = tape.mul_scalar(tau_j, gmm.weights()[j].sqrt().recip());
                    let we = tape.expand(w_j, ReduceSet::PerSample, mshape)?;
                    let contrib = tape.mul(we, xhat_j)?;
                    out = Some(match out {
                        Some(acc) => tape.add(acc, contrib)?,
                        None => contrib,
                    });
                }
                out.expect("k >= 1")
            }
        };

        let y = tape.channel_vectors_rev(outv, shape)?;
        if self.affine {
            bind_affine(tape, store, b, &self.prefix, y, shape)
        } else {
            Ok(y)
        }
    }
}

/// Fit the mixture that drives a [`MixtureNorm`] from collected activations.
///
/// `activations` are pre-normalization feature maps from statistics-collection
/// passes; their channel vectors are pooled into one sample set. Requires at
/// least `100 * k` vectors.
pub fn mn_fit_stage<S: Scalar>(
    activations: &[Tensor4<S>],
    k: usize,
    seed: u64,
    opts: &EmOptions,
) -> Result<(GmmModel<S>, FitDiagnostics)> {
    let Some(first) = activations.first() else {
        return Err(Error::Input("no activations to fit on".into()));
    };
    let d = first.shape().c;
    let mut rows: Vec<S> = Vec::new();
    let mut m = 0usize;
    for act in activations {
        if act.shape().c != d {
            return Err(Error::Shape(format!(
                "activation batches disagree on channels: {} vs {d}",
                act.shape().c
            )));
        }
        let v = kernels::channel_rows(act);
        m += v.shape().n;
        rows.extend_from_slice(v.data());
    }
    if m < 100 * k {
        return Err(Error::Input(format!(
            "need at least {} channel vectors to fit {k} components, got {m}",
            100 * k
        )));
    }
    gmm::fit_gmm(&rows, m, d, k, seed, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: Shape4, seed: u64) -> Tensor4<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn norm_mode_parses_and_prints() {
        for s in ["batch", "layer", "instance", "group:4", "mixture:3"] {
            let m: NormMode = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("group:x".parse::<NormMode>().is_err());
        assert!("spectral".parse::<NormMode>().is_err());
    }

    #[test]
    fn bn_train_output_is_standardized() {
        let shape = Shape4::new(4, 3, 5, 5);
        let x = rand_tensor(shape, 1);
        let mut store = ParamStore::new();
        let mut spec = NormSpec::new(NormMode::Batch);
        spec.affine = false;
        let bn = BatchNorm::init(&mut store, "bn", 3, &spec).unwrap();
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let xv = tape.leaf(x);
        let y = bn.forward(&mut tape, &mut store, &mut b, xv, ForwardMode::Train).unwrap();
        let mean = kernels::reduce_sum(tape.value(y), ReduceSet::PerChannel).unwrap();
        let count = ReduceSet::PerChannel.count(shape).unwrap() as f64;
        for &m in mean.data() {
            assert!((m / count).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_running_stats_converge_geometrically() {
        // same batch fed t times: running mean approaches the batch mean as
        // 1 - (1 - momentum)^t
        let shape = Shape4::new(8, 2, 1, 1);
        let x = rand_tensor(shape, 2);
        let mut store = ParamStore::new();
        let spec = NormSpec::new(NormMode::Batch);
        let bn = BatchNorm::init(&mut store, "bn", 2, &spec).unwrap();
        let batch_mean = {
            let r = kernels::reduce_sum(&x, ReduceSet::PerChannel).unwrap();
            r.data().iter().map(|v| v / 8.0).collect::<Vec<_>>()
        };
        let t = 7;
        for _ in 0..t {
            let mut tape = Tape::new();
            let mut b = Bindings::new();
            let xv = tape.leaf(x.clone());
            bn.forward(&mut tape, &mut store, &mut b, xv, ForwardMode::Train).unwrap();
        }
        let frac = 1.0 - (1.0 - spec.momentum).powi(t);
        let rm = store.tensor("bn.running_mean").unwrap();
        for (got, want) in rm.data().iter().zip(&batch_mean) {
            assert!((got - want * frac).abs() < 1e-12, "{got} vs {}", want * frac);
        }
        assert_eq!(store.tensor("bn.steps").unwrap().data()[0], t as f64);
    }

    #[test]
    fn collect_mode_leaves_running_stats_alone() {
        let shape = Shape4::new(4, 2, 3, 3);
        let x = rand_tensor(shape, 3);
        let mut store = ParamStore::new();
        let bn = BatchNorm::init(&mut store, "bn", 2, &NormSpec::new(NormMode::Batch)).unwrap();
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let xv = tape.leaf(x);
        bn.forward(&mut tape, &mut store, &mut b, xv, ForwardMode::Collect).unwrap();
        assert!(store.tensor("bn.running_mean").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(store.tensor("bn.steps").unwrap().data()[0], 0.0);
    }

    #[test]
    fn bn_rejects_singleton_batch_statistics() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::init(&mut store, "bn", 2, &NormSpec::new(NormMode::Batch)).unwrap();
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let xv = tape.leaf(Tensor4::ones(Shape4::new(1, 2, 1, 1)));
        assert!(matches!(
            bn.forward(&mut tape, &mut store, &mut b, xv, ForwardMode::Train),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn group_extremes_match_layer_and_instance_exactly() {
        let shape = Shape4::new(3, 4, 6, 6);
        let x = rand_tensor(shape, 4);
        let mut spec = NormSpec::new(NormMode::Layer);
        spec.affine = false;
        let run = |mode: NormMode| {
            let mut store = ParamStore::new();
            let mut s = spec;
            s.mode = mode;
            let ln = AxisNorm::init(&mut store, "n", 4, &s).unwrap();
            let mut tape = Tape::new();
            let mut b = Bindings::new();
            let xv = tape.leaf(x.clone());
            let y = ln.forward(&mut tape, &store, &mut b, xv).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(NormMode::Layer), run(NormMode::Group(4)));
        assert_eq!(run(NormMode::Instance), run(NormMode::Group(1)));
    }

    #[test]
    fn mixture_norm_requires_fit_before_use() {
        let mut store = ParamStore::<f64>::new();
        let mut spec = NormSpec::new(NormMode::Mixture(2));
        spec.affine = false;
        let mn = MixtureNorm::init(&mut store, "mn", 3, &spec).unwrap();
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let xv = tape.leaf(rand_tensor(Shape4::new(2, 3, 2, 2), 5));
        let mut diag = ForwardDiag::default();
        assert!(matches!(
            mn.forward(&mut tape, &mut store, &mut b, xv, ForwardMode::Train, &mut diag),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn single_component_mixture_equals_batch_norm() {
        let shape = Shape4::new(6, 3, 4, 4);
        let x = rand_tensor(shape, 6);
        let mut spec = NormSpec::new(NormMode::Batch);
        spec.affine = false;

        let mut bn_store = ParamStore::new();
        let bn = BatchNorm::init(&mut bn_store, "n", 3, &spec).unwrap();
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let xv = tape.leaf(x.clone());
        let y_bn = bn.forward(&mut tape, &mut bn_store, &mut b, xv, ForwardMode::Train).unwrap();
        let y_bn = tape.value(y_bn).data().to_vec();

        let mut mn_store = ParamStore::new();
        let mut mspec = spec;
        mspec.mode = NormMode::Mixture(1);
        let mn = MixtureNorm::init(&mut mn_store, "n", 3, &mspec).unwrap();
        let gmm = GmmModel::with_uniform_weights(1, 3, vec![0.0; 3], vec![1.0; 3]).unwrap();
        mn.set_gmm(&mut mn_store, &gmm).unwrap();
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let xv = tape.leaf(x);
        let mut diag = ForwardDiag::default();
        let y_mn = mn
            .forward(&mut tape, &mut mn_store, &mut b, xv, ForwardMode::Train, &mut diag)
            .unwrap();
        let y_mn = tape.value(y_mn).data().to_vec();

        for (a, b) in y_bn.iter().zip(&y_mn) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn far_component_is_skipped_and_noted() {
        let mut store = ParamStore::new();
        let mut spec = NormSpec::new(NormMode::Mixture(2));
        spec.affine = false;
        let mn = MixtureNorm::init(&mut store, "mn", 2, &spec).unwrap();
        // second component is absurdly far away: zero responsibility
        let gmm = GmmModel::with_uniform_weights(
            2,
            2,
            vec![0.0, 0.0, 1e6, 1e6],
            vec![1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        mn.set_gmm(&mut store, &gmm).unwrap();
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let xv = tape.leaf(rand_tensor(Shape4::new(4, 2, 2, 2), 7));
        let mut diag = ForwardDiag::default();
        let y = mn
            .forward(&mut tape, &mut store, &mut b, xv, ForwardMode::Train, &mut diag)
            .unwrap();
        assert!(tape.value(y).all_finite());
        assert_eq!(diag.notes.len(), 1);
        assert!(diag.notes[0].contains("component 1"));
    }

    #[test]
    fn mn_fit_stage_needs_enough_vectors() {
        let acts = vec![rand_tensor(Shape4::new(2, 3, 4, 4), 8)]; // 32 vectors
        assert!(matches!(
            mn_fit_stage(&acts, 2, 0, &EmOptions::default()),
            Err(Error::Input(_))
        ));
    }
}
