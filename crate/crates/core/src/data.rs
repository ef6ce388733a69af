//! Dataset ingestion and synthesis: IDX and CIFAR binary loaders, blended
//! multi-source sets, seeded synthetic mixtures, context assignment rules,
//! channel statistics, and batch augmentation.
//!
//! Loaders scale pixels to `[0, 1]` and fail atomically: a malformed file
//! yields a [`Error::Format`] carrying the byte offset, never a partial set.

use std::path::{Path, PathBuf};

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::context::{ContextAssignment, ContextProvenance};
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, EmOptions};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Coarse ("super") class labels attached to a dataset.
#[derive(Clone, Debug)]
pub struct Superclasses {
    pub ids: Vec<usize>,
    pub count: usize,
}

/// Images with class labels, the unit every pipeline stage consumes.
#[derive(Clone, Debug)]
pub struct LabeledImageSet<S: Scalar> {
    pub name: String,
    /// `N × C × H × W`, values in `[0, 1]` for loaded data.
    pub images: Tensor4<S>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub superclasses: Option<Superclasses>,
}

impl<S: Scalar> LabeledImageSet<S> {
    pub fn new(
        name: impl Into<String>,
        images: Tensor4<S>,
        labels: Vec<usize>,
        classes: usize,
        superclasses: Option<Superclasses>,
    ) -> Result<Self> {
        let n = images.shape().n;
        if labels.len() != n {
            return Err(Error::Input(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} outside 0..{classes}")));
        }
        if let Some(sc) = &superclasses {
            if sc.ids.len() != n {
                return Err(Error::Input(format!("{} superclass ids for {n} images", sc.ids.len())));
            }
            if let Some(&bad) = sc.ids.iter().find(|&&c| c >= sc.count) {
                return Err(Error::Input(format!("superclass id {bad} outside 0..{}", sc.count)));
            }
        }
        Ok(LabeledImageSet { name: name.into(), images, labels, classes, superclasses })
    }

    pub fn len(&self) -> usize {
        self.images.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Geometry as (channels, height, width).
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    /// New set holding the given samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let shape = self.images.shape();
        let per = shape.c * shape.h * shape.w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        let mut sc_ids = Vec::new();
        for &i in indices {
            if i >= shape.n {
                return Err(Error::Input(format!("sample index {i} outside 0..{}", shape.n)));
            }
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
            if let Some(sc) = &self.superclasses {
                sc_ids.push(sc.ids[i]);
            }
        }
        let images = Tensor4::from_vec(
            Shape4::new(indices.len(), shape.c, shape.h, shape.w),
            data,
        )?;
        let superclasses = self
            .superclasses
            .as_ref()
            .map(|sc| Superclasses { ids: sc_ids, count: sc.count });
        LabeledImageSet::new(self.name.clone(), images, labels, self.classes, superclasses)
    }

    /// Concatenate sets sharing one label space and geometry.
    pub fn concat(sets: &[Self]) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::Input("no sets to concatenate".into()))?;
        let (classes, geo) = (first.classes, first.geometry());
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for s in sets {
            if s.classes != classes || s.geometry() != geo {
                return Err(Error::Input(format!(
                    "set '{}' disagrees on label space or geometry",
                    s.name
                )));
            }
            data.extend_from_slice(s.images.data());
            labels.extend_from_slice(&s.labels);
        }
        let images =
            Tensor4::from_vec(Shape4::new(labels.len(), geo.0, geo.1, geo.2), data)?;
        LabeledImageSet::new(first.name.clone(), images, labels, classes, None)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Input(format!("cannot read {}: {e}", path.display()))
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::format(
            bytes.len() as u64,
            format!("file truncated: need {end} bytes for a u32 at offset {offset}"),
        ));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair (big-endian magic and dims, unsigned
/// byte payload). Pixels are scaled to `[0, 1]`.
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet<S>> {
    let img = read_file(images_path)?;
    let magic = be_u32(&img, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&img, 4)? as usize;
    let h = be_u32(&img, 8)? as usize;
    let w = be_u32(&img, 12)? as usize;
    if h == 0 || w == 0 {
        return Err(Error::format(8, format!("degenerate image dims {h}x{w}")));
    }
    let need = 16 + n * h * w;
    if img.len() != need {
        return Err(Error::format(
            img.len().min(need) as u64,
            format!("image payload holds {} bytes, header promises {}", img.len() - 16, n * h * w),
        ));
    }

    let lab = read_file(labels_path)?;
    let magic = be_u32(&lab, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let ln = be_u32(&lab, 4)? as usize;
    if ln != n {
        return Err(Error::format(4, format!("{ln} labels for {n} images")));
    }
    if lab.len() != 8 + ln {
        return Err(Error::format(
            lab.len().min(8 + ln) as u64,
            format!("label payload holds {} bytes, header promises {ln}", lab.len() - 8),
        ));
    }

    let scale = S::cast(1.0 / 255.0);
    let data: Vec<S> = img[16..].iter().map(|&b| S::cast(b as f64) * scale).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let images = Tensor4::from_vec(Shape4::new(n, 1, h, w), data)?;
    let name = images_path.file_stem().map_or_else(
        || "idx".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    LabeledImageSet::new(name, images, labels, classes, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

/// Load one CIFAR binary batch file. CIFAR-10 rows are `label + 3072`
/// channel-planar pixels; CIFAR-100 rows carry a coarse and a fine label.
pub fn load_cifar_binary<S: Scalar>(
    path: &Path,
    variant: CifarVariant,
) -> Result<LabeledImageSet<S>> {
    const PIXELS: usize = 3 * 32 * 32;
    let bytes = read_file(path)?;
    let (header, classes) = match variant {
        CifarVariant::Cifar10 => (1, 10),
        CifarVariant::Cifar100 => (2, 100),
    };
    let record = header + PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::format(
            (bytes.len() - bytes.len() % record) as u64,
            format!("file size {} is not a multiple of the {record}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / record;
    let scale = S::cast(1.0 / 255.0);
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::with_capacity(n);
    for i in 0..n {
        let at = i * record;
        let fine = bytes[at + header - 1] as usize;
        if fine >= classes {
            return Err(Error::format(
                (at + header - 1) as u64,
                format!("label {fine} outside 0..{classes}"),
            ));
        }
        if variant == CifarVariant::Cifar100 {
            let c = bytes[at] as usize;
            if c >= 20 {
                return Err(Error::format(at as u64, format!("coarse label {c} outside 0..20")));
            }
            coarse.push(c);
        }
        labels.push(fine);
        data.extend(bytes[at + header..at + record].iter().map(|&b| S::cast(b as f64) * scale));
    }
    let images = Tensor4::from_vec(Shape4::new(n, 3, 32, 32), data)?;
    let superclasses = match variant {
        CifarVariant::Cifar10 => None,
        CifarVariant::Cifar100 => Some(Superclasses { ids: coarse, count: 20 }),
    };
    let name = path.file_stem().map_or_else(
        || "cifar".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    LabeledImageSet::new(name, images, labels, classes, superclasses)
}

/// One source inside a [`BlendedSet`].
#[derive(Clone, Debug)]
pub struct SourceInfo {
    pub name: String,
    /// Added to this source's labels in the unified label space.
    pub label_offset: usize,
    pub samples: usize,
}

/// Several datasets concatenated into a common geometry and label space,
/// with the source of each sample kept as a context id.
#[derive(Clone, Debug)]
pub struct BlendedSet<S: Scalar> {
    pub set: LabeledImageSet<S>,
    pub origins: ContextAssignment,
    pub sources: Vec<SourceInfo>,
}

/// Blend two or more sets: zero-pad each image into the centre of the largest
/// height × width, replicate single-channel images across the widest channel
/// count, and offset label ids per source.
pub fn make_blended<S: Scalar>(sets: &[LabeledImageSet<S>]) -> Result<BlendedSet<S>> {
    if sets.len() < 2 {
        return Err(Error::Input(format!("blending needs at least 2 sets, got {}", sets.len())));
    }
    let mut c = 0;
    let (mut h, mut w) = (0, 0);
    for s in sets {
        if s.is_empty() {
            return Err(Error::Input(format!("source '{}' is empty", s.name)));
        }
        let g = s.geometry();
        c = c.max(g.0);
        h = h.max(g.1);
        w = w.max(g.2);
    }
    for s in sets {
        let sc = s.geometry().0;
        if sc != c && sc != 1 {
            return Err(Error::Input(format!(
                "cannot widen {sc}-channel '{}' to {c} channels (only single-channel \
                 sources are replicated)",
                s.name
            )));
        }
    }

    let total: usize = sets.iter().map(|s| s.len()).sum();
    let per = c * h * w;
    let mut data = vec![S::zero(); total * per];
    let mut labels = Vec::with_capacity(total);
    let mut origin_ids = Vec::with_capacity(total);
    let mut sources = Vec::with_capacity(sets.len());
    let mut offset = 0;
    let mut out_i = 0;
    for (src_idx, s) in sets.iter().enumerate() {
        let (sc, sh, sw) = s.geometry();
        let (top, left) = ((h - sh) / 2, (w - sw) / 2);
        let src = s.images.data();
        let sper = sc * sh * sw;
        for i in 0..s.len() {
            let sample = &src[i * sper..(i + 1) * sper];
            let out = &mut data[out_i * per..(out_i + 1) * per];
            for ch in 0..c {
                let sch = if sc == 1 { 0 } else { ch };
                for y in 0..sh {
                    for x in 0..sw {
                        out[(ch * h + top + y) * w + left + x] = sample[(sch * sh + y) * sw + x];
                    }
                }
            }
            labels.push(s.labels[i] + offset);
            origin_ids.push(src_idx);
            out_i += 1;
        }
        sources.push(SourceInfo { name: s.name.clone(), label_offset: offset, samples: s.len() });
        offset += s.classes;
    }

    let name = sets.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join("+");
    let images = Tensor4::from_vec(Shape4::new(total, c, h, w), data)?;
    let set = LabeledImageSet::new(name, images, labels, offset, None)?;
    let origins = ContextAssignment::new(origin_ids, sets.len(), ContextProvenance::Dataset)?;
    Ok(BlendedSet { set, origins, sources })
}

/// How samples are mapped to contexts.
#[derive(Clone, Debug, PartialEq)]
pub enum ContextRule {
    /// Coarse class labels carried by the dataset.
    Superclass,
    /// Source dataset in a blended set.
    Dataset,
    /// Hard assignment to components of a mixture fit on flattened images.
    Gmm { k: usize, seed: u64 },
    /// Assignment CSV written earlier (or by hand).
    CustomFile(PathBuf),
}

/// Fitting a context mixture caps the number of vectors handed to EM; the
/// fitted model still assigns every sample.
const GMM_FIT_CAP: usize = 2000;

/// Give every sample a context id under `rule`. `origins` carries the
/// dataset-of-origin labeling when the set is a blend.
pub fn assign_contexts<S: Scalar>(
    set: &LabeledImageSet<S>,
    origins: Option<&ContextAssignment>,
    rule: &ContextRule,
) -> Result<ContextAssignment> {
    match rule {
        ContextRule::Superclass => {
            let sc = set.superclasses.as_ref().ok_or_else(|| {
                Error::Input(format!("'{}' has no superclass ids", set.name))
            })?;
            ContextAssignment::new(sc.ids.clone(), sc.count, ContextProvenance::Superclass)
        }
        ContextRule::Dataset => origins.cloned().ok_or_else(|| {
            Error::Input("dataset-of-origin rule needs a blended set".into())
        }),
        ContextRule::Gmm { k, seed } => {
            let n = set.len();
            if n == 0 {
                return Err(Error::Input("cannot fit contexts on an empty set".into()));
            }
            let shape = set.images.shape();
            let dim = shape.c * shape.h * shape.w;
            let x = set.images.data();
            let (gmm, _diag) = if n > GMM_FIT_CAP {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut picked = index_sample(&mut rng, n, GMM_FIT_CAP).into_vec();
                picked.sort_unstable();
                let mut sub = Vec::with_capacity(GMM_FIT_CAP * dim);
                for &i in &picked {
                    sub.extend_from_slice(&x[i * dim..(i + 1) * dim]);
                }
                fit_gmm(&sub, GMM_FIT_CAP, dim, *k, *seed, &EmOptions::default())?
            } else {
                fit_gmm(x, n, dim, *k, *seed, &EmOptions::default())?
            };
            let ids = gmm.hard_assign(x, n)?;
            ContextAssignment::new(ids, *k, ContextProvenance::GmmComponent)
        }
        ContextRule::CustomFile(path) => {
            let a = ContextAssignment::read_csv(path)?;
            if a.len() != set.len() {
                return Err(Error::Input(format!(
                    "assignment file covers {} samples, set has {}",
                    a.len(),
                    set.len()
                )));
            }
            Ok(a)
        }
    }
}

/// Recipe for a seeded synthetic dataset whose contexts differ in channel
/// statistics while class identity lives in a context-free latent.
///
/// Per sample in context `t`: draw a latent `z ~ N(0, I)` over channels, set
/// the label by a seeded linear rule (`argmax_j w_j · z`), and render pixels
/// as `mean[t][c] + std[t][c] * (z[c] + pixel_noise * eps)` with fresh
/// per-pixel noise `eps`. A model that undoes the per-context shift and scale
/// sees the latent directly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticMixtureSpec {
    pub contexts: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples_per_context: usize,
    pub classes: usize,
    /// `contexts × channels` generating means.
    pub means: Vec<Vec<f64>>,
    /// `contexts × channels` generating standard deviations.
    pub stds: Vec<Vec<f64>>,
    /// Scale of per-pixel noise relative to the per-sample latent.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl SyntheticMixtureSpec {
    /// Well-separated defaults: context means sit on distinct corners of a
    /// `[0.2, 0.8]` channel cube and standard deviations cycle through
    /// 0.05 / 0.075 / 0.1, so the separation ratio stays ≥ 6.
    pub fn well_separated(contexts: usize, samples_per_context: usize, seed: u64) -> Result<Self> {
        let channels = 3;
        if contexts == 0 || contexts > (1 << channels) {
            return Err(Error::Config(format!(
                "well-separated recipe supports 1..={} contexts, got {contexts}",
                1 << channels
            )));
        }
        let means = (0..contexts)
            .map(|t| (0..channels).map(|c| 0.2 + 0.6 * ((t >> c) & 1) as f64).collect())
            .collect();
        let stds = (0..contexts)
            .map(|t| vec![0.05 * (1.0 + 0.5 * (t % 3) as f64); channels])
            .collect();
        let spec = SyntheticMixtureSpec {
            contexts,
            channels,
            height: 8,
            width: 8,
            samples_per_context,
            classes: 3,
            means,
            stds,
            pixel_noise: 0.5,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.contexts == 0 || self.samples_per_context == 0 {
            return Err(Error::Config("need at least one context and one sample".into()));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("degenerate image geometry".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        for (name, table) in [("means", &self.means), ("stds", &self.stds)] {
            if table.len() != self.contexts || table.iter().any(|r| r.len() != self.channels) {
                return Err(Error::Config(format!(
                    "{name} must be {} × {}",
                    self.contexts, self.channels
                )));
            }
        }
        if self.stds.iter().flatten().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("standard deviations must be positive".into()));
        }
        if self.pixel_noise < 0.0 {
            return Err(Error::Config("pixel noise must be >= 0".into()));
        }
        Ok(())
    }

    /// Minimum pairwise distance between context means over the largest
    /// standard deviation; infinite for a single context.
    pub fn separation_ratio(&self) -> f64 {
        let max_std = self.stds.iter().flatten().cloned().fold(0.0, f64::max);
        let mut min_dist = f64::INFINITY;
        for a in 0..self.contexts {
            for b in a + 1..self.contexts {
                let d: f64 = self.means[a]
                    .iter()
                    .zip(&self.means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        min_dist / max_std
    }
}

/// Generate the dataset a spec describes, together with the generating
/// context of every sample. Identical seeds give identical bytes.
pub fn gen_synthetic_mixture<S: Scalar>(
    spec: &SyntheticMixtureSpec,
) -> Result<(LabeledImageSet<S>, ContextAssignment)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t_n, c, hw) = (spec.contexts, spec.channels, spec.height * spec.width);
    let n = t_n * spec.samples_per_context;

    // class rule: argmax over seeded linear scores of the latent
    let w: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let mut data = Vec::with_capacity(n * c * hw);
    let mut labels = Vec::with_capacity(n);
    let mut ctx_ids = Vec::with_capacity(n);
    let mut z = vec![0.0f64; c];
    for t in 0..t_n {
        for _ in 0..spec.samples_per_context {
            for zc in z.iter_mut() {
                *zc = rng.sample(StandardNormal);
            }
            let label = (0..spec.classes)
                .max_by(|&a, &b| {
                    let sa: f64 = w[a].iter().zip(&z).map(|(wi, zi)| wi * zi).sum();
                    let sb: f64 = w[b].iter().zip(&z).map(|(wi, zi)| wi * zi).sum();
                    sa.partial_cmp(&sb).expect("finite scores")
                })
                .expect("at least 2 classes");
            labels.push(label);
            for ch in 0..c {
                let (mu, sd) = (spec.means[t][ch], spec.stds[t][ch]);
                for _ in 0..hw {
                    let eps: f64 = rng.sample(StandardNormal);
                    data.push(S::cast(mu + sd * (z[ch] + spec.pixel_noise * eps)));
                }
            }
            ctx_ids.push(t);
        }
    }

    let images = Tensor4::from_vec(Shape4::new(n, c, spec.height, spec.width), data)?;
    let set = LabeledImageSet::new("synthetic", images, labels, spec.classes, None)?;
    let ctx = ContextAssignment::new(ctx_ids, t_n, ContextProvenance::Custom)?;
    Ok((set, ctx))
}

/// Per-channel mean and standard deviation, the standardization sidecar.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Compute from a training split (biased variance).
    pub fn from_set<S: Scalar>(set: &LabeledImageSet<S>) -> Result<Self> {
        let shape = set.images.shape();
        if shape.n == 0 {
            return Err(Error::Input("cannot compute statistics of an empty set".into()));
        }
        let (c, per, hw) = (shape.c, shape.c * shape.h * shape.w, shape.h * shape.w);
        let x = set.images.data();
        let count = (shape.n * hw) as f64;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..shape.n {
            for ch in 0..c {
                for &v in &x[i * per + ch * hw..i * per + (ch + 1) * hw] {
                    let v = v.as_f64();
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let std = mean
            .iter_mut()
            .zip(sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt()
            })
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Standardize every channel in place with the given (train-split) statistics.
pub fn standardize<S: Scalar>(set: &mut LabeledImageSet<S>, stats: &ChannelStats) -> Result<()> {
    let shape = set.images.shape();
    if stats.mean.len() != shape.c || stats.std.len() != shape.c {
        return Err(Error::Input(format!(
            "statistics cover {} channels, set has {}",
            stats.mean.len(),
            shape.c
        )));
    }
    let (per, hw) = (shape.c * shape.h * shape.w, shape.h * shape.w);
    let x = set.images.data_mut();
    for ch in 0..shape.c {
        let m = S::cast(stats.mean[ch]);
        let inv = S::cast(1.0 / stats.std[ch].max(1e-8));
        for i in 0..shape.n {
            for v in &mut x[i * per + ch * hw..i * per + (ch + 1) * hw] {
                *v = (*v - m) * inv;
            }
        }
    }
    Ok(())
}

/// Split `0..n` into (kept, holdout) index lists; both come back sorted.
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let take = ((n as f64) * holdout_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut holdout = order.split_off(n - take.min(n));
    order.sort_unstable();
    holdout.sort_unstable();
    (order, holdout)
}

/// Horizontal flip (p = 1/2) plus a random crop out of a zero-padded margin,
/// per sample. `pad = 0` still flips.
pub fn augment_batch<S: Scalar>(
    images: &Tensor4<S>,
    pad: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor4<S> {
    let shape = images.shape();
    let (hw, per) = (shape.h * shape.w, shape.c * shape.h * shape.w);
    let src = images.data();
    let mut out = vec![S::zero(); src.len()];
    for i in 0..shape.n {
        let flip = rng.random::<bool>();
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..shape.c {
            let splane = &src[i * per + ch * hw..i * per + (ch + 1) * hw];
            let oplane = &mut out[i * per + ch * hw..i * per + (ch + 1) * hw];
            for y in 0..shape.h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= shape.h as isize {
                    continue;
                }
                for x in 0..shape.w {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= shape.w as isize {
                        continue;
                    }
                    let sx = if flip { shape.w - 1 - sx as usize } else { sx as usize };
                    oplane[y * shape.w + x] = splane[sy as usize * shape.w + sx];
                }
            }
        }
    }
    Tensor4::from_vec(shape, out).expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_idx_pair(dir: &Path, pixels: &[u8], n: u32, h: u32, w: u32, labels: &[u8]) -> (PathBuf, PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&n.to_be_bytes());
        img.extend_from_slice(&h.to_be_bytes());
        img.extend_from_slice(&w.to_be_bytes());
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        let ip = dir.join("imgs.idx3-ubyte");
        let lp = dir.join("labs.idx1-ubyte");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let pixels: Vec<u8> = vec![0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60];
        let (ip, lp) = write_idx_pair(dir.path(), &pixels, 2, 2, 3, &[7, 3]);
        let set = load_idx::<f64>(&ip, &lp).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.geometry(), (1, 2, 3));
        assert_eq!(set.labels, vec![7, 3]);
        assert_eq!(set.classes, 8);
        for (got, want) in set.images.data().iter().zip(&pixels) {
            assert_eq!(*got, *want as f64 / 255.0);
        }
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[1, 2, 3, 4], 1, 2, 2, &[0]);
        let mut img = std::fs::read(&ip).unwrap();
        img[3] = 0x99;
        let bad = dir.path().join("bad.idx");
        std::fs::write(&bad, &img).unwrap();
        match load_idx::<f64>(&bad, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let trunc = dir.path().join("trunc.idx");
        std::fs::write(&trunc, &std::fs::read(&ip).unwrap()[..18]).unwrap();
        assert!(matches!(load_idx::<f64>(&trunc, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn cifar_fixtures_round_trip() {
        let dir = tempdir().unwrap();
        let mut rec10 = Vec::new();
        for label in [3u8, 9] {
            rec10.push(label);
            rec10.extend((0..3072u32).map(|i| (i % 251) as u8));
        }
        let p10 = dir.path().join("c10.bin");
        std::fs::write(&p10, &rec10).unwrap();
        let set = load_cifar_binary::<f64>(&p10, CifarVariant::Cifar10).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.labels, vec![3, 9]);
        assert_eq!(set.geometry(), (3, 32, 32));
        assert!(set.superclasses.is_none());
        assert_eq!(set.images.data()[1], (1 % 251) as f64 / 255.0);

        let mut rec100 = Vec::new();
        rec100.push(14u8);
        rec100.push(97u8);
        rec100.extend(std::iter::repeat_n(128u8, 3072));
        let p100 = dir.path().join("c100.bin");
        std::fs::write(&p100, &rec100).unwrap();
        let set = load_cifar_binary::<f64>(&p100, CifarVariant::Cifar100).unwrap();
        assert_eq!(set.labels, vec![97]);
        let sc = set.superclasses.unwrap();
        assert_eq!((sc.ids, sc.count), (vec![14], 20));

        let odd = dir.path().join("odd.bin");
        std::fs::write(&odd, &rec10[..3000]).unwrap();
        assert!(matches!(
            load_cifar_binary::<f64>(&odd, CifarVariant::Cifar10),
            Err(Error::Format { .. })
        ));
    }

    fn tiny_set(name: &str, n: usize, c: usize, h: usize, w: usize, classes: usize, fill: f64) -> LabeledImageSet<f64> {
        let images = Tensor4::filled(Shape4::new(n, c, h, w), fill);
        let labels = (0..n).map(|i| i % classes).collect();
        LabeledImageSet::new(name, images, labels, classes, None).unwrap()
    }

    #[test]
    fn blending_centres_pads_and_offsets_labels() {
        let gray = tiny_set("gray", 2, 1, 2, 2, 4, 0.5);
        let color = tiny_set("color", 3, 3, 4, 4, 2, 0.25);
        let blend = make_blended(&[gray.clone(), color.clone()]).unwrap();
        assert_eq!(blend.set.geometry(), (3, 4, 4));
        assert_eq!(blend.set.len(), 5);
        assert_eq!(blend.set.classes, 6);
        assert_eq!(blend.origins.ids(), &[0, 0, 1, 1, 1]);
        assert_eq!(blend.sources[1].label_offset, 4);
        // gray sample 0: centre 2×2 replicated across channels, margins zero
        let d = blend.set.images.data();
        let at = |ch: usize, y: usize, x: usize| d[(ch * 4 + y) * 4 + x];
        for ch in 0..3 {
            assert_eq!(at(ch, 0, 0), 0.0);
            assert_eq!(at(ch, 1, 1), 0.5);
            assert_eq!(at(ch, 2, 2), 0.5);
            assert_eq!(at(ch, 3, 3), 0.0);
        }
        // color labels got offset by gray's 4 classes
        assert_eq!(&blend.set.labels[2..], &[4, 5, 4]);
        // recoverability: unified label - offset[origin] = source label
        for (i, &l) in blend.set.labels.iter().enumerate() {
            let src = &blend.sources[blend.origins.ids()[i]];
            let back = l - src.label_offset;
            let want = if i < 2 { gray.labels[i] } else { color.labels[i - 2] };
            assert_eq!(back, want);
        }

        let twice = make_blended(&[gray.clone(), gray.clone()]).unwrap();
        assert_eq!(twice.origins.contexts(), 2);
        assert_eq!(twice.set.labels[2], gray.labels[0] + 4);

        assert!(make_blended(&[gray.clone()]).is_err());
        let empty = LabeledImageSet::new(
            "empty",
            Tensor4::<f64>::zeros(Shape4::new(0, 1, 2, 2)),
            vec![],
            4,
            None,
        )
        .unwrap();
        assert!(make_blended(&[gray, empty]).is_err());
    }

    #[test]
    fn superclass_rule_copies_coarse_ids() {
        let mut set = tiny_set("s", 6, 1, 2, 2, 3, 0.1);
        assert!(assign_contexts(&set, None, &ContextRule::Superclass).is_err());
        set.superclasses = Some(Superclasses { ids: vec![0, 1, 1, 0, 2, 2], count: 3 });
        let a = assign_contexts(&set, None, &ContextRule::Superclass).unwrap();
        assert_eq!(a.ids(), &[0, 1, 1, 0, 2, 2]);
        assert_eq!(a.contexts(), 3);
        assert_eq!(a.provenance, ContextProvenance::Superclass);
    }

    #[test]
    fn gmm_rule_recovers_generating_contexts() {
        let spec = SyntheticMixtureSpec::well_separated(3, 120, 77).unwrap();
        assert!(spec.separation_ratio() >= 6.0);
        let (set, truth) = gen_synthetic_mixture::<f64>(&spec).unwrap();
        let got = assign_contexts(&set, None, &ContextRule::Gmm { k: 3, seed: 5 }).unwrap();
        assert_eq!(got.contexts(), 3);
        // component indices are arbitrary: map each fitted component to its
        // majority generating context, then demand near-perfect agreement
        let mut votes = [[0usize; 3]; 3];
        for (&g, &t) in got.ids().iter().zip(truth.ids()) {
            votes[g][t] += 1;
        }
        let map: Vec<usize> = votes
            .iter()
            .map(|row| row.iter().enumerate().max_by_key(|(_, &v)| v).unwrap().0)
            .collect();
        assert_eq!({ let mut m = map.clone(); m.sort_unstable(); m }, vec![0, 1, 2]);
        let agree = got
            .ids()
            .iter()
            .zip(truth.ids())
            .filter(|(&g, &t)| map[g] == t)
            .count();
        assert!(agree as f64 >= 0.99 * set.len() as f64, "{agree}/{}", set.len());
    }

    #[test]
    fn synthetic_generation_is_seed_deterministic() {
        let spec = SyntheticMixtureSpec::well_separated(2, 50, 123).unwrap();
        let (a, ca) = gen_synthetic_mixture::<f64>(&spec).unwrap();
        let (b, cb) = gen_synthetic_mixture::<f64>(&spec).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert_eq!(ca.ids(), cb.ids());
        let mut other = spec.clone();
        other.seed = 124;
        let (c, _) = gen_synthetic_mixture::<f64>(&other).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn synthetic_channel_means_obey_the_generating_statistics() {
        let spec = SyntheticMixtureSpec::well_separated(3, 400, 9).unwrap();
        let (set, ctx) = gen_synthetic_mixture::<f64>(&spec).unwrap();
        let shape = set.images.shape();
        let (hw, per) = (shape.h * shape.w, shape.c * shape.h * shape.w);
        let x = set.images.data();
        for t in 0..3 {
            for ch in 0..3 {
                let mut sum = 0.0;
                let mut n = 0usize;
                for i in 0..set.len() {
                    if ctx.ids()[i] != t {
                        continue;
                    }
                    sum += x[i * per + ch * hw..i * per + (ch + 1) * hw].iter().sum::<f64>();
                    n += hw;
                }
                let mean = sum / n as f64;
                // per-sample channel mean has variance sd^2 (1 + noise^2/P)
                let sd = spec.stds[t][ch];
                let var =
                    sd * sd * (1.0 + spec.pixel_noise * spec.pixel_noise / hw as f64);
                let bound = 3.0 * (var / 400.0).sqrt();
                assert!(
                    (mean - spec.means[t][ch]).abs() <= bound,
                    "context {t} channel {ch}: {mean} vs {} ± {bound}",
                    spec.means[t][ch]
                );
            }
        }
    }

    #[test]
    fn single_context_is_a_plain_gaussian() {
        let mut spec = SyntheticMixtureSpec::well_separated(1, 30, 4).unwrap();
        spec.pixel_noise = 0.0;
        assert!(spec.separation_ratio().is_infinite());
        let (set, ctx) = gen_synthetic_mixture::<f64>(&spec).unwrap();
        assert_eq!(ctx.histogram(), vec![30]);
        assert_eq!(set.len(), 30);
    }

    #[test]
    fn channel_stats_and_standardization() {
        let images = Tensor4::from_vec(
            Shape4::new(2, 2, 1, 2),
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        )
        .unwrap();
        let mut set = LabeledImageSet::new("s", images, vec![0, 1], 2, None).unwrap();
        let stats = ChannelStats::from_set(&set).unwrap();
        assert_eq!(stats.mean, vec![2.5, 4.5]); // channels {0,1,4,5} and {2,3,6,7}
        let want_std = ((2.5f64 * 2.5 + 1.5 * 1.5) * 2.0 / 4.0).sqrt();
        assert!((stats.std[0] - want_std).abs() < 1e-12);

        standardize(&mut set, &stats).unwrap();
        let d = set.images.data();
        let m0: f64 = [d[0], d[1], d[4], d[5]].iter().sum::<f64>() / 4.0;
        assert!(m0.abs() < 1e-12);
        let dir = tempdir().unwrap();
        let p = dir.path().join("stats.json");
        stats.save(&p).unwrap();
        assert_eq!(ChannelStats::load(&p).unwrap(), stats);
    }

    #[test]
    fn split_indices_partition_the_range() {
        let (train, val) = split_indices(10, 0.3, 1);
        assert_eq!(train.len(), 7);
        assert_eq!(val.len(), 3);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.3, 1), (train, val));
        assert_ne!(split_indices(10, 0.3, 2).1, split_indices(10, 0.3, 1).1);
    }

    #[test]
    fn augmentation_keeps_shape_and_pixel_budget() {
        let images = Tensor4::from_vec(
            Shape4::new(1, 1, 2, 2),
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_batch(&images, 1, &mut rng);
        assert_eq!(out.shape(), images.shape());
        for &v in out.data() {
            assert!([0.0, 1.0, 2.0, 3.0, 4.0].contains(&v));
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            augment_batch(&images, 1, &mut r1).data(),
            augment_batch(&images, 1, &mut r2).data()
        );
    }

    #[test]
    fn select_and_concat_stay_consistent() {
        let set = tiny_set("s", 5, 1, 2, 2, 3, 0.5);
        let sub = set.select(&[4, 0, 2]).unwrap();
        assert_eq!(sub.labels, vec![set.labels[4], set.labels[0], set.labels[2]]);
        assert!(set.select(&[9]).is_err());
        let cat = LabeledImageSet::concat(&[set.clone(), sub]).unwrap();
        assert_eq!(cat.len(), 8);
        let other = tiny_set("t", 2, 1, 2, 2, 4, 0.5);
        assert!(LabeledImageSet::concat(&[set, other]).is_err());
    }
}
