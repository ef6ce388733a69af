//! The experiment pipeline behind `train`, `eval`, and `fit-gmm`: load data,
//! assign contexts, split, standardize, build, then run. Every step is seeded
//! from the config, so a config file fully determines the run.

use std::path::{Path, PathBuf};

use serde_json::json;

use normlab_core::context::{CnMode, CnSpec, ContextAssignment};
use normlab_core::data::{
    self, assign_contexts, gen_synthetic_mixture, load_cifar_binary, load_idx, make_blended,
    split_indices, ChannelStats, CifarVariant, ContextRule, LabeledImageSet, SyntheticMixtureSpec,
};
use normlab_core::gmm::{fit_gmm, EmOptions, FitDiagnostics};
use normlab_core::model::{ConvNet, ConvNetSpec, InferenceChoice};
use normlab_core::train::{self, RunStatus, SplitData, TrainConfig, TrainData};
use normlab_core::{checkpoint, Error, Result};

use crate::config::{DatasetConfig, ExperimentConfig};

/// A loaded dataset plus the labelings that context rules can draw on.
pub struct LoadedData {
    pub set: LabeledImageSet<f64>,
    /// Dataset-of-origin ids when the set is a blend.
    pub origins: Option<ContextAssignment>,
    /// Generating contexts when the set is synthetic.
    pub generated: Option<ContextAssignment>,
}

fn limit_set(loaded: LoadedData, limit: usize) -> Result<LoadedData> {
    if limit == 0 || limit >= loaded.set.len() {
        return Ok(loaded);
    }
    let keep: Vec<usize> = (0..limit).collect();
    let reselect = |a: &ContextAssignment| {
        ContextAssignment::new(a.select(&keep), a.contexts(), a.provenance)
    };
    Ok(LoadedData {
        set: loaded.set.select(&keep)?,
        origins: loaded.origins.as_ref().map(reselect).transpose()?,
        generated: loaded.generated.as_ref().map(reselect).transpose()?,
    })
}

fn cifar_files(dir: &Path, variant: CifarVariant) -> Result<Vec<PathBuf>> {
    let names: &[&str] = match variant {
        CifarVariant::Cifar10 => &[
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
            "test_batch.bin",
        ],
        CifarVariant::Cifar100 => &["train.bin", "test.bin"],
    };
    let found: Vec<PathBuf> =
        names.iter().map(|n| dir.join(n)).filter(|p| p.is_file()).collect();
    if found.is_empty() {
        return Err(Error::Input(format!(
            "no CIFAR batch files in {} (looked for {})",
            dir.display(),
            names.join(", ")
        )));
    }
    Ok(found)
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<LoadedData> {
    let loaded = match cfg.kind.as_str() {
        "synthetic" => {
            let mut spec = SyntheticMixtureSpec::well_separated(
                cfg.contexts,
                cfg.per_context,
                cfg.data_seed,
            )?;
            spec.classes = cfg.classes;
            spec.pixel_noise = cfg.pixel_noise;
            let (set, generated) = gen_synthetic_mixture(&spec)?;
            LoadedData { set, origins: None, generated: Some(generated) }
        }
        "idx" => {
            let set = load_idx(Path::new(&cfg.images), Path::new(&cfg.labels))?;
            LoadedData { set, origins: None, generated: None }
        }
        "cifar10" | "cifar100" => {
            let variant = if cfg.kind == "cifar10" {
                CifarVariant::Cifar10
            } else {
                CifarVariant::Cifar100
            };
            let mut parts = Vec::new();
            for p in cifar_files(Path::new(&cfg.dir), variant)? {
                parts.push(load_cifar_binary(&p, variant)?);
            }
            let set =
                if parts.len() == 1 { parts.pop().unwrap() } else { LabeledImageSet::concat(&parts)? };
            LoadedData { set, origins: None, generated: None }
        }
        "blended" => {
            let mut sets = Vec::with_capacity(cfg.sources.len());
            for src in &cfg.sources {
                sets.push(load_dataset(src)?.set);
            }
            let blend = make_blended(&sets)?;
            LoadedData { set: blend.set, origins: Some(blend.origins), generated: None }
        }
        other => return Err(Error::Config(format!("unknown dataset kind '{other}'"))),
    };
    limit_set(loaded, cfg.limit)
}

/// Context ids for every sample under the configured rule; `None` for `none`.
pub fn contexts_for(cfg: &ExperimentConfig, data: &LoadedData) -> Result<Option<ContextAssignment>> {
    let a = match cfg.contexts.rule.as_str() {
        "none" => return Ok(None),
        "synthetic" => data
            .generated
            .clone()
            .ok_or_else(|| Error::Input("dataset carries no generating contexts".into()))?,
        "superclass" => {
            assign_contexts(&data.set, data.origins.as_ref(), &ContextRule::Superclass)?
        }
        "dataset" => assign_contexts(&data.set, data.origins.as_ref(), &ContextRule::Dataset)?,
        "gmm" => assign_contexts(
            &data.set,
            data.origins.as_ref(),
            &ContextRule::Gmm { k: cfg.contexts.k, seed: cfg.contexts.seed },
        )?,
        "file" => assign_contexts(
            &data.set,
            data.origins.as_ref(),
            &ContextRule::CustomFile(PathBuf::from(&cfg.contexts.file)),
        )?,
        other => return Err(Error::Config(format!("unknown context rule '{other}'"))),
    };
    Ok(Some(a))
}

fn take_split(
    set: &LabeledImageSet<f64>,
    ctx: Option<&ContextAssignment>,
    idx: &[usize],
) -> Result<SplitData<f64>> {
    let sub = set.select(idx)?;
    let sub_ctx = ctx
        .map(|a| ContextAssignment::new(a.select(idx), a.contexts(), a.provenance))
        .transpose()?;
    Ok(SplitData { set: sub, ctx: sub_ctx })
}

/// Everything `train` and `eval` share before the run itself.
pub struct Prepared {
    pub data: TrainData<f64>,
    pub stats: Option<ChannelStats>,
    pub contexts: usize,
    pub classes: usize,
    pub geometry: (usize, usize, usize),
}

/// Split deterministically, standardize by the training split, and carry the
/// context assignment through the splits.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let loaded = load_dataset(&cfg.dataset)?;
    let ctx = contexts_for(cfg, &loaded)?;
    let n = loaded.set.len();
    if n == 0 {
        return Err(Error::Input("dataset is empty".into()));
    }

    let split_seed = cfg.train.seed ^ 0x5eed_5011;
    let (rest, test_idx) = split_indices(n, cfg.train.test_fraction, split_seed);
    let val_share = if cfg.train.test_fraction >= 1.0 {
        0.0
    } else {
        cfg.train.val_fraction / (1.0 - cfg.train.test_fraction)
    };
    let (train_rel, val_rel) = split_indices(rest.len(), val_share, split_seed ^ 1);
    let train_idx: Vec<usize> = train_rel.iter().map(|&i| rest[i]).collect();
    let val_idx: Vec<usize> = val_rel.iter().map(|&i| rest[i]).collect();
    if train_idx.is_empty() || val_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Input(format!(
            "splits of {n} samples leave an empty part (train {}, val {}, test {})",
            train_idx.len(),
            val_idx.len(),
            test_idx.len()
        )));
    }

    let mut train = take_split(&loaded.set, ctx.as_ref(), &train_idx)?;
    let mut val = take_split(&loaded.set, ctx.as_ref(), &val_idx)?;
    let mut test = take_split(&loaded.set, ctx.as_ref(), &test_idx)?;

    let stats = if cfg.train.standardize {
        let s = ChannelStats::from_set(&train.set)?;
        data::standardize(&mut train.set, &s)?;
        data::standardize(&mut val.set, &s)?;
        data::standardize(&mut test.set, &s)?;
        Some(s)
    } else {
        None
    };

    let contexts = ctx.as_ref().map_or(0, |a| a.contexts());
    let classes = loaded.set.classes;
    let geometry = loaded.set.geometry();
    Ok(Prepared { data: TrainData { train, val, test }, stats, contexts, classes, geometry })
}

pub fn build_model(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ConvNet<f64>> {
    let mut spec = match cfg.model.arch.as_str() {
        "cifar" => ConvNetSpec::cifar(prep.classes),
        "compact" => ConvNetSpec::compact(prep.classes, prep.geometry),
        other => return Err(Error::Config(format!("unknown architecture '{other}'"))),
    };
    spec = spec.with_norm(cfg.model.conv_norm.parse()?);
    if cfg.model.input_cn {
        if prep.contexts == 0 {
            return Err(Error::Config("an input context layer needs a context rule".into()));
        }
        let mode: CnMode = cfg.model.cn_mode.parse()?;
        spec = spec.with_input_cn(CnSpec {
            contexts: prep.contexts,
            embed_dim: cfg.model.embed_dim,
            mode,
            epsilon: cfg.model.epsilon,
        });
    }
    spec.epsilon = cfg.model.epsilon;
    spec.momentum = cfg.model.momentum;
    spec.affine = cfg.model.affine;
    ConvNet::build(spec, cfg.model.model_seed)
}

pub fn train_config(cfg: &ExperimentConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        seed: cfg.train.seed,
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        momentum: cfg.train.momentum,
        rms_decay: cfg.train.rms_decay,
        opt_epsilon: cfg.train.opt_epsilon,
        patience: (cfg.train.patience > 0).then_some(cfg.train.patience),
        augment_pad: (cfg.train.augment_pad > 0).then_some(cfg.train.augment_pad),
        threshold: cfg.train.threshold,
        inference: cfg.train.inference.parse()?,
    })
}

/// Fit the mixture slot on (at most `cap`) training activations. Must happen
/// before the run: the slot normalizes against these statistics throughout.
pub fn fit_mixture_stage(
    model: &mut ConvNet<f64>,
    prep: &Prepared,
    cap: usize,
    batch_size: usize,
    seed: u64,
) -> Result<FitDiagnostics> {
    let train = &prep.data.train;
    let n = train.set.len();
    let take = if cap == 0 { n } else { cap.min(n) };
    let idx: Vec<usize> = {
        // evenly spaced picks keep every context represented without an RNG
        (0..take).map(|i| i * n / take).collect()
    };
    let mut stage = Vec::new();
    let step = batch_size.max(1);
    for chunk in idx.chunks(step) {
        let sub = train.set.select(chunk)?;
        let ids = train.ctx.as_ref().map(|a| a.select(chunk));
        stage.push(model.mixture_stage_input(&sub.images, ids.as_deref())?);
    }
    model.fit_mixture(&stage, seed, &EmOptions::default())
}

pub struct TrainOutcome {
    pub status: RunStatus,
    pub out_dir: PathBuf,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let out_dir = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&out_dir)?;

    let prep = prepare(cfg)?;
    eprintln!(
        "data: {} samples ({} train / {} val / {} test), {} classes, {} context(s)",
        prep.data.train.set.len() + prep.data.val.set.len() + prep.data.test.set.len(),
        prep.data.train.set.len(),
        prep.data.val.set.len(),
        prep.data.test.set.len(),
        prep.classes,
        prep.contexts,
    );
    let mut model = build_model(cfg, &prep)?;

    let mixture_fit = if model.has_mixture_slot() {
        eprintln!("stage 1: fitting mixture statistics on held-out activations");
        let d = fit_mixture_stage(
            &mut model,
            &prep,
            cfg.train.mixture_fit_cap,
            cfg.train.batch_size,
            cfg.train.seed,
        )?;
        eprintln!(
            "stage 1 done: {} EM iteration(s), converged = {}",
            d.iterations, d.converged
        );
        eprintln!("stage 2: training");
        Some(d)
    } else {
        None
    };

    let tc = train_config(cfg)?;
    let started = std::time::Instant::now();
    let metrics = train::train(&mut model, &prep.data, &tc)?;
    let elapsed = started.elapsed().as_secs_f64();

    metrics.write_csv(&out_dir.join("metrics.csv"))?;
    checkpoint::save(&model.params, &out_dir.join("model.bin"))?;
    if let Some(stats) = &prep.stats {
        stats.save(&out_dir.join("channel_stats.json"))?;
    }

    let summary = json!({
        "config": cfg,
        "status": metrics.status,
        "epochs_to_threshold": metrics.epochs_to_threshold,
        "threshold": metrics.threshold,
        "train_acc": metrics.epochs.iter().map(|e| e.train_acc).collect::<Vec<_>>(),
        "seconds": metrics.epochs.iter().map(|e| e.seconds).collect::<Vec<_>>(),
        "total_seconds": elapsed,
        "final": metrics.final_epoch(),
        "dataset": {
            "classes": prep.classes,
            "geometry": [prep.geometry.0, prep.geometry.1, prep.geometry.2],
            "contexts": prep.contexts,
        },
        "trainable_parameters": model.params.trainable_len(),
        "mixture_fit": mixture_fit.map(|d| json!({
            "iterations": d.iterations,
            "converged": d.converged,
            "reseeded": d.reseeded.len(),
            "final_log_likelihood": d.log_likelihood.last(),
        })),
    });
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    for e in &metrics.epochs {
        eprintln!(
            "epoch {:>3}: train loss {:.4}, val loss {:.4}, test acc {:.4} ({:.1}s)",
            e.epoch, e.train_loss, e.val_loss, e.test_acc, e.seconds
        );
    }
    match metrics.status {
        RunStatus::Completed => eprintln!("run completed"),
        RunStatus::EarlyStopped { after_epoch } => {
            eprintln!("run stopped early after epoch {after_epoch}")
        }
        RunStatus::Diverged { at_epoch } => eprintln!("run diverged in epoch {at_epoch}"),
    }
    Ok(TrainOutcome { status: metrics.status, out_dir })
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    split: &str,
    out: Option<&Path>,
) -> Result<()> {
    let prep = prepare(cfg)?;
    let mut model = build_model(cfg, &prep)?;
    checkpoint::load_into(ckpt, &mut model.params)?;

    let part = match split {
        "train" => &prep.data.train,
        "val" => &prep.data.val,
        "test" => &prep.data.test,
        other => {
            return Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val, test)"
            )))
        }
    };
    let choice: InferenceChoice = if model.input_cn().is_some() {
        cfg.train.inference.parse()?
    } else {
        InferenceChoice::Plain
    };
    let m = train::evaluate(&mut model, part, choice, cfg.train.batch_size)?;
    let report = json!({
        "split": split,
        "samples": part.set.len(),
        "inference": choice.to_string(),
        "loss": m.loss,
        "accuracy": m.accuracy,
        "top5": m.top5,
    });
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = out {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, text)?;
    }
    Ok(())
}

pub fn cmd_fit_gmm(cfg: &ExperimentConfig, k: usize, seed: u64, out_dir: &Path) -> Result<()> {
    let loaded = load_dataset(&cfg.dataset)?;
    let set = &loaded.set;
    let n = set.len();
    let shape = set.images.shape();
    let dim = shape.c * shape.h * shape.w;
    eprintln!("fitting {k}-component mixture on {n} samples of dimension {dim}");
    let (gmm, diag) = fit_gmm(set.images.data(), n, dim, k, seed, &EmOptions::default())?;

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("gmm.json"), gmm.to_json_string()?)?;
    let diagnostics = json!({
        "iterations": diag.iterations,
        "converged": diag.converged,
        "reseeded": diag.reseeded,
        "log_likelihood": diag.log_likelihood,
    });
    std::fs::write(
        out_dir.join("gmm_diagnostics.json"),
        serde_json::to_string_pretty(&diagnostics)?,
    )?;
    eprintln!(
        "done: {} iteration(s), converged = {}, final mean log-likelihood {:.6}",
        diag.iterations,
        diag.converged,
        diag.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}
