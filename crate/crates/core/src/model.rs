//! Network assembly: a four-block CIFAR ConvNet and a compact two-block
//! classifier, with a configurable normalization at every convolution and an
//! optional context-normalization layer on the input.
//!
//! The layer sequence of each architecture is fixed; builds are deterministic
//! per seed (He fan-in normal initialization for conv and dense weights).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::context::{CnSpec, ContextNorm};
use crate::error::{Error, Result};
use crate::gmm::{EmOptions, FitDiagnostics};
use crate::kernels::{conv_out_len, pool_out_len, ReduceSet};
use crate::norm::{
    mn_fit_stage, AxisNorm, BatchNorm, ForwardDiag, ForwardMode, MixtureNorm, NormMode, NormSpec,
};
use crate::param::{Bindings, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{PoolKind, Tape, Var};
use crate::tensor::{Shape4, Tensor4};

/// Which fixed layer stack to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Four conv blocks (5×5/64, 5×5/128, 5×5/128, 3×3/256), three 3×3/2 max
    /// pools, a 4×4 global average pool, and a linear head. Input 3×32×32.
    Cifar,
    /// Two conv blocks (3×3/16, 3×3/32) with 2×2/2 max pools and a linear
    /// head. Input geometry is configurable.
    Compact,
}

/// How a context-normalized model maps samples to contexts at forward time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum InferenceChoice {
    /// No context layer involved.
    #[default]
    #[serde(rename = "plain")]
    Plain,
    /// Hard assignment: every sample carries an explicit context id.
    #[serde(rename = "cn")]
    Cn,
    /// Soft assignment over all contexts; no assignment needed.
    #[serde(rename = "cn+")]
    CnPlus,
}

impl std::str::FromStr for InferenceChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "none" | "n/a" => Ok(InferenceChoice::Plain),
            "cn" => Ok(InferenceChoice::Cn),
            "cn+" => Ok(InferenceChoice::CnPlus),
            _ => Err(Error::Config(format!(
                "unknown inference choice '{s}' (expected plain, cn, cn+)"
            ))),
        }
    }
}

impl std::fmt::Display for InferenceChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InferenceChoice::Plain => write!(f, "plain"),
            InferenceChoice::Cn => write!(f, "cn"),
            InferenceChoice::CnPlus => write!(f, "cn+"),
        }
    }
}

/// Everything needed to build a network.
#[derive(Clone, Debug)]
pub struct ConvNetSpec {
    pub arch: Arch,
    pub classes: usize,
    /// Input geometry as (channels, height, width).
    pub input: (usize, usize, usize),
    /// Normalization placed after each convolution. `Mixture(k)` puts the
    /// mixture layer at the deepest same-width slot (third block of the CIFAR
    /// net, second of the compact one) and batch normalization elsewhere.
    pub conv_norm: NormMode,
    /// Optional context-normalization layer applied to the raw input.
    pub input_cn: Option<CnSpec>,
    pub epsilon: f64,
    pub momentum: f64,
    pub affine: bool,
}

impl ConvNetSpec {
    pub fn cifar(classes: usize) -> Self {
        ConvNetSpec {
            arch: Arch::Cifar,
            classes,
            input: (3, 32, 32),
            conv_norm: NormMode::Batch,
            input_cn: None,
            epsilon: 1e-5,
            momentum: 0.1,
            affine: true,
        }
    }

    pub fn compact(classes: usize, input: (usize, usize, usize)) -> Self {
        ConvNetSpec { arch: Arch::Compact, classes, input, ..ConvNetSpec::cifar(classes) }
    }

    pub fn with_norm(mut self, mode: NormMode) -> Self {
        self.conv_norm = mode;
        self
    }

    pub fn with_input_cn(mut self, cn: CnSpec) -> Self {
        self.input_cn = Some(cn);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.arch {
            Arch::Cifar => {
                if !matches!(self.classes, 10 | 100) {
                    return Err(Error::Config(format!(
                        "the CIFAR net ends in 10 or 100 classes, got {}",
                        self.classes
                    )));
                }
                if self.input != (3, 32, 32) {
                    return Err(Error::Config(format!(
                        "the CIFAR net expects 3x32x32 input, got {}x{}x{}",
                        self.input.0, self.input.1, self.input.2
                    )));
                }
            }
            Arch::Compact => {
                if self.classes < 2 {
                    return Err(Error::Config("need at least 2 classes".into()));
                }
                if self.input.0 == 0 || self.input.1 < 4 || self.input.2 < 4 {
                    return Err(Error::Config(format!(
                        "compact net needs at least 1x4x4 input, got {}x{}x{}",
                        self.input.0, self.input.1, self.input.2
                    )));
                }
            }
        }
        NormSpec {
            mode: self.conv_norm,
            epsilon: self.epsilon,
            momentum: self.momentum,
            affine: self.affine,
        }
        .validate()?;
        if let Some(cn) = &self.input_cn {
            cn.validate()?;
        }
        Ok(())
    }

    /// Conv rows as (name, kernel, stride, pad, out channels, pool kind, pool
    /// kernel, pool stride).
    fn rows(&self) -> Vec<(&'static str, usize, usize, usize, usize, PoolKind, usize, usize)> {
        match self.arch {
            Arch::Cifar => vec![
                ("conv1", 5, 1, 2, 64, PoolKind::Max, 3, 2),
                ("conv2", 5, 1, 2, 128, PoolKind::Max, 3, 2),
                ("conv3", 5, 1, 2, 128, PoolKind::Max, 3, 2),
                ("conv4", 3, 1, 1, 256, PoolKind::Avg, 4, 1),
            ],
            Arch::Compact => vec![
                ("conv1", 3, 1, 1, 16, PoolKind::Max, 2, 2),
                ("conv2", 3, 1, 1, 32, PoolKind::Max, 2, 2),
            ],
        }
    }

    /// Index of the block whose normalization `Mixture(k)` replaces.
    fn mixture_slot(&self) -> usize {
        match self.arch {
            Arch::Cifar => 2,
            Arch::Compact => 1,
        }
    }
}

enum SlotNorm {
    Batch(BatchNorm),
    Axis(AxisNorm),
    Mixture(MixtureNorm),
}

struct Block {
    name: &'static str,
    stride: usize,
    pad: usize,
    norm: SlotNorm,
    pool: (PoolKind, usize, usize),
}

/// A built network: parameter store plus the fixed layer sequence.
pub struct ConvNet<S: Scalar> {
    spec: ConvNetSpec,
    pub params: ParamStore<S>,
    input_cn: Option<ContextNorm>,
    blocks: Vec<Block>,
    head_in: usize,
    last_shapes: Vec<(String, Shape4)>,
}

impl<S: Scalar> ConvNet<S> {
    pub fn build(spec: ConvNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |rng: &mut ChaCha8Rng, fan_in: usize, n: usize| -> Vec<S> {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| S::cast(rng.sample::<f64, _>(StandardNormal) * std)).collect()
        };

        let input_cn = match &spec.input_cn {
            Some(cs) => {
                let cn_seed = rng.random::<u64>();
                Some(ContextNorm::init(&mut store, "cn0", spec.input.0, cs, cn_seed)?)
            }
            None => None,
        };

        let mixture_slot = spec.mixture_slot();
        let (mut c, mut h, mut w) = spec.input;
        let mut blocks = Vec::new();
        for (i, &(name, k, stride, pad, out_c, pk, pool_k, pool_s)) in
            spec.rows().iter().enumerate()
        {
            let fan_in = c * k * k;
            let data = he(&mut rng, fan_in, out_c * fan_in);
            let kshape = Shape4::new(out_c, c, k, k);
            store.insert(&format!("{name}.w"), Tensor4::from_vec(kshape, data)?, true)?;

            let slot_mode = match spec.conv_norm {
                NormMode::Mixture(kk) if i == mixture_slot => NormMode::Mixture(kk),
                NormMode::Mixture(_) => NormMode::Batch,
                m => m,
            };
            let nspec = NormSpec {
                mode: slot_mode,
                epsilon: spec.epsilon,
                momentum: spec.momentum,
                affine: spec.affine,
            };
            let prefix = format!("{name}.norm");
            let norm = match slot_mode {
                NormMode::Batch => {
                    SlotNorm::Batch(BatchNorm::init(&mut store, &prefix, out_c, &nspec)?)
                }
                NormMode::Layer | NormMode::Instance | NormMode::Group(_) => {
                    SlotNorm::Axis(AxisNorm::init(&mut store, &prefix, out_c, &nspec)?)
                }
                NormMode::Mixture(_) => {
                    SlotNorm::Mixture(MixtureNorm::init(&mut store, &prefix, out_c, &nspec)?)
                }
            };

            h = pool_out_len(conv_out_len(h, k, stride, pad)?, pool_k, pool_s, 0)?;
            w = pool_out_len(conv_out_len(w, k, stride, pad)?, pool_k, pool_s, 0)?;
            c = out_c;
            blocks.push(Block { name, stride, pad, norm, pool: (pk, pool_k, pool_s) });
        }

        let head_in = c * h * w;
        let wdata = he(&mut rng, head_in, head_in * spec.classes);
        store.insert("head.w", Tensor4::from_vec(Shape4::matrix(head_in, spec.classes), wdata)?, true)?;
        store.insert("head.b", Tensor4::zeros(Shape4::matrix(1, spec.classes)), true)?;

        Ok(ConvNet { spec, params: store, input_cn, blocks, head_in, last_shapes: Vec::new() })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn input_cn(&self) -> Option<&ContextNorm> {
        self.input_cn.as_ref()
    }

    /// Flattened feature count entering the linear head.
    pub fn head_in(&self) -> usize {
        self.head_in
    }

    pub fn has_mixture_slot(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b.norm, SlotNorm::Mixture(_)))
    }

    /// Post-conv and post-pool activation shapes of the most recent forward.
    pub fn last_shapes(&self) -> &[(String, Shape4)] {
        &self.last_shapes
    }

    /// Run the network and return class logits (`N × classes`).
    ///
    /// For a model with an input context layer, `choice` selects hard
    /// assignment (`Cn`, requires `ctx` ids) or soft assignment (`CnPlus`);
    /// `Plain` is for models without one.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &mut self,
        tape: &mut Tape<S>,
        b: &mut Bindings,
        x: Var,
        mode: ForwardMode,
        ctx: Option<&[usize]>,
        choice: InferenceChoice,
        diag: &mut ForwardDiag,
    ) -> Result<Var> {
        self.forward_inner(tape, b, x, mode, ctx, choice, diag, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_inner(
        &mut self,
        tape: &mut Tape<S>,
        b: &mut Bindings,
        x: Var,
        mode: ForwardMode,
        ctx: Option<&[usize]>,
        choice: InferenceChoice,
        diag: &mut ForwardDiag,
        stop_before_mixture: bool,
    ) -> Result<Var> {
        let ConvNet { spec, params, input_cn, blocks, last_shapes, .. } = self;
        last_shapes.clear();
        let shape = tape.value(x).shape();
        if (shape.c, shape.h, shape.w) != spec.input {
            return Err(Error::Shape(format!(
                "model built for {}x{}x{} input, got {shape}",
                spec.input.0, spec.input.1, spec.input.2
            )));
        }

        let mut cur = x;
        match (input_cn.as_ref(), choice) {
            (None, InferenceChoice::Plain) => {}
            (None, c) => {
                return Err(Error::Usage(format!(
                    "inference choice '{c}' on a model without a context layer"
                )))
            }
            (Some(_), InferenceChoice::Plain) => {
                return Err(Error::Usage(
                    "model has a context layer; pick inference choice cn or cn+".into(),
                ))
            }
            (Some(cn), InferenceChoice::Cn) => {
                let ids = ctx.ok_or_else(|| {
                    Error::Input("context ids required for hard-assignment forward".into())
                })?;
                cur = cn.forward(tape, params, b, cur, ids)?;
            }
            (Some(cn), InferenceChoice::CnPlus) => {
                cur = cn.cn_plus(tape, params, cur, diag)?;
            }
        }

        for blk in blocks.iter() {
            let kvar = b.bind(tape, params, &format!("{}.w", blk.name))?;
            cur = tape.conv2d(cur, kvar, blk.stride, blk.pad)?;
            last_shapes.push((format!("{}.conv", blk.name), tape.value(cur).shape()));
            if stop_before_mixture && matches!(blk.norm, SlotNorm::Mixture(_)) {
                return Ok(cur);
            }
            cur = match &blk.norm {
                SlotNorm::Batch(bn) => bn.forward(tape, params, b, cur, mode)?,
                SlotNorm::Axis(an) => an.forward(tape, params, b, cur)?,
                SlotNorm::Mixture(mn) => mn.forward(tape, params, b, cur, mode, diag)?,
            };
            cur = tape.relu(cur);
            let (pk, k, s) = blk.pool;
            cur = tape.pool2d(cur, pk, k, s, 0)?;
            last_shapes.push((format!("{}.pool", blk.name), tape.value(cur).shape()));
        }
        if stop_before_mixture {
            return Err(Error::Usage("no mixture slot in this architecture".into()));
        }

        let flat = tape.flatten_rows(cur)?;
        let wv = b.bind(tape, params, "head.w")?;
        let bv = b.bind(tape, params, "head.b")?;
        let mut logits = tape.matmul(flat, false, wv, false)?;
        let bias = tape.expand(bv, ReduceSet::PerChannel, tape.value(logits).shape())?;
        logits = tape.add(logits, bias)?;
        Ok(logits)
    }

    /// Activations entering the mixture slot, for its statistics-fitting
    /// stage. Runs with batch statistics and touches no running state.
    pub fn mixture_stage_input(
        &mut self,
        images: &Tensor4<S>,
        ctx: Option<&[usize]>,
    ) -> Result<Tensor4<S>> {
        if !self.has_mixture_slot() {
            return Err(Error::Usage("no mixture slot in this architecture".into()));
        }
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let mut diag = ForwardDiag::default();
        let choice =
            if self.input_cn.is_some() { InferenceChoice::Cn } else { InferenceChoice::Plain };
        let x = tape.constant(images.clone());
        let v = self.forward_inner(
            &mut tape,
            &mut b,
            x,
            ForwardMode::Collect,
            ctx,
            choice,
            &mut diag,
            true,
        )?;
        Ok(tape.value(v).clone())
    }

    /// Fit the mixture slot's model on collected stage inputs and install it.
    pub fn fit_mixture(
        &mut self,
        stage_inputs: &[Tensor4<S>],
        seed: u64,
        opts: &EmOptions,
    ) -> Result<FitDiagnostics> {
        let ConvNet { params, blocks, .. } = self;
        let mn = blocks
            .iter()
            .find_map(|b| match &b.norm {
                SlotNorm::Mixture(mn) => Some(mn),
                _ => None,
            })
            .ok_or_else(|| Error::Usage("no mixture slot in this architecture".into()))?;
        let (gmm, diag) = mn_fit_stage(stage_inputs, mn.k(), seed, opts)?;
        mn.set_gmm(params, &gmm)?;
        Ok(diag)
    }
}
