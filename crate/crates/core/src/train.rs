//! Training and evaluation loops with deterministic, seed-salted shuffling.
//!
//! Per-epoch metrics (train loss/accuracy, validation loss, test accuracy)
//! are measured by fixed-order evaluation passes after the gradient pass, so
//! a run with `lr = 0` reports exactly constant metrics. With `lr = 0` the
//! gradient pass also leaves running statistics untouched — the model does
//! not change at all.
//!
//! Mini-batches are assembled on a producer thread behind a bounded queue;
//! batch contents depend only on (seed, epoch, index), never on timing.

use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::ContextAssignment;
use crate::data::{augment_batch, LabeledImageSet};
use crate::error::{Error, Result};
use crate::model::{ConvNet, InferenceChoice};
use crate::norm::{ForwardDiag, ForwardMode};
use crate::optim::OptimizerState;
use crate::param::Bindings;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor4;

/// Hyperparameters of one training run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `0` disables learning entirely (useful as a control).
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Squared-gradient EMA decay of the optimizer.
    pub rms_decay: f64,
    pub opt_epsilon: f64,
    /// Stop after this many epochs without a validation-loss improvement.
    pub patience: Option<usize>,
    /// Horizontal flip + random crop out of this zero-padding; `None` = off.
    pub augment_pad: Option<usize>,
    /// Train-accuracy level defining `epochs_to_threshold`.
    pub threshold: f64,
    /// How evaluation passes map samples to contexts (models with a context
    /// layer only).
    pub inference: InferenceChoice,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 256,
            seed: 0,
            lr: 1e-3,
            weight_decay: 0.0,
            momentum: 0.9,
            rms_decay: 0.9,
            opt_epsilon: 1e-8,
            patience: None,
            augment_pad: None,
            threshold: 0.95,
            inference: InferenceChoice::Plain,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1 when set".into()));
        }
        Ok(())
    }
}

/// One dataset split plus its (optional) context labeling.
#[derive(Clone, Debug)]
pub struct SplitData<S: Scalar> {
    pub set: LabeledImageSet<S>,
    pub ctx: Option<ContextAssignment>,
}

impl<S: Scalar> SplitData<S> {
    pub fn plain(set: LabeledImageSet<S>) -> Self {
        SplitData { set, ctx: None }
    }

    pub fn with_ctx(set: LabeledImageSet<S>, ctx: ContextAssignment) -> Self {
        SplitData { set, ctx: Some(ctx) }
    }
}

/// The three splits a run consumes.
#[derive(Clone, Debug)]
pub struct TrainData<S: Scalar> {
    pub train: SplitData<S>,
    pub val: SplitData<S>,
    pub test: SplitData<S>,
}

/// Metrics of one epoch. `seconds` is wall-clock time and the only
/// non-reproducible field; the CSV serialization zeroes it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub test_acc: f64,
    pub top5_acc: f64,
    pub seconds: f64,
}

/// How a run ended.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// Validation loss stalled; training stopped after this epoch.
    EarlyStopped { after_epoch: usize },
    /// A non-finite loss or gradient appeared in this epoch; metrics cover
    /// the completed epochs only.
    Diverged { at_epoch: usize },
}

/// Full record of a training run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub status: RunStatus,
    /// First epoch whose train accuracy reached the configured threshold.
    pub epochs_to_threshold: Option<usize>,
    pub threshold: f64,
}

impl RunMetrics {
    /// Fixed-schema CSV. The seconds column is written as `0.000` so that
    /// identical runs produce identical bytes; real timings live in the
    /// summary JSON.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,test_acc,top5_acc,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},0.000\n",
                e.epoch, e.train_loss, e.val_loss, e.test_acc, e.top5_acc
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv_string())?)
    }

    pub fn final_epoch(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn best_val_epoch(&self) -> Option<&EpochMetrics> {
        self.epochs
            .iter()
            .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).expect("finite losses"))
    }
}

/// Loss and accuracy of one fixed-order evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Fraction of samples whose label sits among the 5 largest logits
    /// (ties broken toward lower class indices).
    pub top5: f64,
}

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

/// Indices of the up-to-5 largest values, by (value descending, index
/// ascending).
fn top5_indices<S: Scalar>(row: &[S]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite logits").then(a.cmp(&b)));
    idx.truncate(5);
    idx
}

fn eval_ctx_ids<'a>(
    model: &ConvNet<impl Scalar>,
    split: &'a SplitData<impl Scalar>,
    choice: InferenceChoice,
) -> Result<Option<&'a [usize]>> {
    if model.input_cn().is_none() || choice != InferenceChoice::Cn {
        return Ok(None);
    }
    let ctx = split.ctx.as_ref().ok_or_else(|| {
        Error::Input(format!(
            "hard-assignment evaluation needs a context assignment for '{}'",
            split.set.name
        ))
    })?;
    if ctx.len() != split.set.len() {
        return Err(Error::Input(format!(
            "context assignment covers {} samples, '{}' has {}",
            ctx.len(),
            split.set.name,
            split.set.len()
        )));
    }
    Ok(Some(ctx.ids()))
}

/// Frozen-parameter evaluation over a split, batched in index order.
pub fn evaluate<S: Scalar>(
    model: &mut ConvNet<S>,
    split: &SplitData<S>,
    choice: InferenceChoice,
    batch_size: usize,
) -> Result<EvalMetrics> {
    let n = split.set.len();
    if n == 0 {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let ids = eval_ctx_ids(model, split, choice)?;

    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let mut top5_hits = 0usize;
    let mut diag = ForwardDiag::default();
    let mut at = 0;
    while at < n {
        let hi = (at + batch_size).min(n);
        let index: Vec<usize> = (at..hi).collect();
        let batch = split.set.select(&index)?;
        let batch_ids: Option<Vec<usize>> = ids.map(|a| index.iter().map(|&i| a[i]).collect());

        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let x = tape.constant(batch.images);
        let logits = model.forward(
            &mut tape,
            &mut b,
            x,
            ForwardMode::Eval,
            batch_ids.as_deref(),
            choice,
            &mut diag,
        )?;
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        loss_sum += tape.value(loss).scalar_value().as_f64() * batch.labels.len() as f64;

        let out = tape.value(logits);
        for (r, &label) in batch.labels.iter().enumerate() {
            let row = out.row(r);
            if row.iter().any(|v| !v.is_finite()) {
                continue; // diverged logits score as misses; the loss says why
            }
            let top = top5_indices(row);
            if top.first() == Some(&label) {
                hits += 1;
            }
            if top.contains(&label) {
                top5_hits += 1;
            }
        }
        at = hi;
    }
    Ok(EvalMetrics {
        loss: loss_sum / n as f64,
        accuracy: hits as f64 / n as f64,
        top5: top5_hits as f64 / n as f64,
    })
}

struct MiniBatch<S: Scalar> {
    images: Tensor4<S>,
    labels: Vec<usize>,
    ctx: Option<Vec<usize>>,
}

/// Run the training loop. Divergence is reported through
/// [`RunMetrics::status`] with the completed epochs kept; errors are reserved
/// for invalid configurations and inputs.
pub fn train<S: Scalar>(
    model: &mut ConvNet<S>,
    data: &TrainData<S>,
    cfg: &TrainConfig,
) -> Result<RunMetrics> {
    cfg.validate()?;
    if data.train.set.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let has_cn = model.input_cn().is_some();
    let train_ids: Option<&[usize]> = if has_cn {
        let ctx = data.train.ctx.as_ref().ok_or_else(|| {
            Error::Input("training a context-layer model needs a context assignment".into())
        })?;
        if ctx.len() != data.train.set.len() {
            return Err(Error::Input(format!(
                "context assignment covers {} samples, train split has {}",
                ctx.len(),
                data.train.set.len()
            )));
        }
        Some(ctx.ids())
    } else {
        None
    };
    let eval_choice = if has_cn { cfg.inference } else { InferenceChoice::Plain };
    if has_cn && eval_choice == InferenceChoice::Plain {
        return Err(Error::Config(
            "a context-layer model needs inference choice cn or cn+".into(),
        ));
    }

    let learning = cfg.lr > 0.0;
    let mut opt = if learning {
        let mut o = OptimizerState::rmsprop(cfg.lr, cfg.weight_decay)?;
        o.momentum = cfg.momentum;
        o.alpha = cfg.rms_decay;
        o.eps = cfg.opt_epsilon;
        Some(o)
    } else {
        None
    };
    let grad_mode = if learning { ForwardMode::Train } else { ForwardMode::Collect };

    let n = data.train.set.len();
    let mut metrics = RunMetrics {
        epochs: Vec::with_capacity(cfg.epochs),
        status: RunStatus::Completed,
        epochs_to_threshold: None,
        threshold: cfg.threshold,
    };
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;

    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle = stream_rng(cfg.seed, 1, epoch as u64);
        for i in (1..n).rev() {
            order.swap(i, shuffle.random_range(0..=i));
        }

        let diverged = std::thread::scope(|scope| -> Result<bool> {
            let (tx, rx) = sync_channel::<Result<MiniBatch<S>>>(2);
            let train_set = &data.train.set;
            let augment = cfg.augment_pad;
            let order = &order;
            let seed = cfg.seed;
            scope.spawn(move || {
                let mut aug_rng = stream_rng(seed, 2, epoch as u64);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch = train_set.select(chunk).map(|set| {
                        let images = match augment {
                            Some(pad) => augment_batch(&set.images, pad, &mut aug_rng),
                            None => set.images,
                        };
                        MiniBatch {
                            images,
                            labels: set.labels,
                            ctx: train_ids.map(|a| chunk.iter().map(|&i| a[i]).collect()),
                        }
                    });
                    if tx.send(batch).is_err() {
                        return; // consumer bailed out
                    }
                }
            });

            let mut diag = ForwardDiag::default();
            for batch in rx {
                let batch = batch?;
                let mut tape = Tape::new();
                let mut b = Bindings::new();
                let x = tape.constant(batch.images);
                let choice = if has_cn { InferenceChoice::Cn } else { InferenceChoice::Plain };
                let logits =
                    model.forward(&mut tape, &mut b, x, grad_mode, batch.ctx.as_deref(), choice, &mut diag)?;
                let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
                if !tape.value(loss).scalar_value().is_finite() {
                    return Ok(true);
                }
                if let Some(opt) = opt.as_mut() {
                    tape.backward(loss)?;
                    b.collect_grads(&tape, &mut model.params)?;
                    match opt.step(&mut model.params) {
                        Ok(()) => {}
                        Err(Error::Diverged(_)) => return Ok(true),
                        Err(e) => return Err(e),
                    }
                }
            }
            Ok(false)
        })?;
        if diverged {
            metrics.status = RunStatus::Diverged { at_epoch: epoch };
            break 'epochs;
        }

        let train_eval = evaluate(model, &data.train, eval_choice, cfg.batch_size)?;
        let val_eval = evaluate(model, &data.val, eval_choice, cfg.batch_size)?;
        let test_eval = evaluate(model, &data.test, eval_choice, cfg.batch_size)?;
        if !(train_eval.loss.is_finite() && val_eval.loss.is_finite()) {
            metrics.status = RunStatus::Diverged { at_epoch: epoch };
            break 'epochs;
        }

        metrics.epochs.push(EpochMetrics {
            epoch,
            train_loss: train_eval.loss,
            train_acc: train_eval.accuracy,
            val_loss: val_eval.loss,
            test_acc: test_eval.accuracy,
            top5_acc: test_eval.top5,
            seconds: started.elapsed().as_secs_f64(),
        });
        if metrics.epochs_to_threshold.is_none() && train_eval.accuracy >= cfg.threshold {
            metrics.epochs_to_threshold = Some(epoch);
        }

        if let Some(patience) = cfg.patience {
            if val_eval.loss < best_val {
                best_val = val_eval.loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    metrics.status = RunStatus::EarlyStopped { after_epoch: epoch };
                    break 'epochs;
                }
            }
        }
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_mixture, SyntheticMixtureSpec};
    use crate::model::ConvNetSpec;
    use crate::norm::NormMode;

    fn standardized(mut set: crate::data::LabeledImageSet<f64>) -> crate::data::LabeledImageSet<f64> {
        let stats = crate::data::ChannelStats::from_set(&set).unwrap();
        crate::data::standardize(&mut set, &stats).unwrap();
        set
    }

    fn splits(
        contexts: usize,
        per_ctx: usize,
        seed: u64,
    ) -> (TrainData<f64>, SyntheticMixtureSpec) {
        let spec = SyntheticMixtureSpec::well_separated(contexts, per_ctx, seed).unwrap();
        let (set, ctx) = gen_synthetic_mixture::<f64>(&spec).unwrap();
        let split = SplitData::with_ctx(standardized(set), ctx);
        (TrainData { train: split.clone(), val: split.clone(), test: split }, spec)
    }

    fn quick_cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig { epochs, batch_size: 32, lr, seed: 11, ..TrainConfig::default() }
    }

    #[test]
    fn zero_learning_rate_freezes_all_metrics() {
        let (data, _) = splits(1, 60, 3);
        let mut model =
            crate::model::ConvNet::build(ConvNetSpec::compact(3, (3, 8, 8)), 1).unwrap();
        let m = train(&mut model, &data, &quick_cfg(3, 0.0)).unwrap();
        assert_eq!(m.epochs.len(), 3);
        for e in &m.epochs[1..] {
            assert_eq!(e.train_loss, m.epochs[0].train_loss);
            assert_eq!(e.val_loss, m.epochs[0].val_loss);
            assert_eq!(e.test_acc, m.epochs[0].test_acc);
            assert_eq!(e.top5_acc, m.epochs[0].top5_acc);
        }
    }

    #[test]
    fn identical_config_and_seed_reproduce_the_csv() {
        let (data, _) = splits(2, 40, 5);
        let cfg = quick_cfg(2, 2e-3);
        let mut a = crate::model::ConvNet::build(ConvNetSpec::compact(3, (3, 8, 8)), 7).unwrap();
        let mut b = crate::model::ConvNet::build(ConvNetSpec::compact(3, (3, 8, 8)), 7).unwrap();
        let ma = train(&mut a, &data, &cfg).unwrap();
        let mb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ma.to_csv_string(), mb.to_csv_string());
        assert_eq!(ma.epochs, mb.epochs.iter().cloned().map(|mut e| {
            // wall time is the one legitimately non-reproducible field
            e.seconds = ma.epochs[e.epoch - 1].seconds;
            e
        }).collect::<Vec<_>>());
    }

    #[test]
    fn separable_two_class_data_is_memorized_quickly() {
        let mut spec = SyntheticMixtureSpec::well_separated(1, 120, 21).unwrap();
        spec.classes = 2;
        spec.pixel_noise = 0.2;
        let (set, ctx) = gen_synthetic_mixture::<f64>(&spec).unwrap();
        let split = SplitData::with_ctx(standardized(set), ctx);
        let data =
            TrainData { train: split.clone(), val: split.clone(), test: split };
        let mut model =
            crate::model::ConvNet::build(ConvNetSpec::compact(2, (3, 8, 8)), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            seed: 4,
            threshold: 1.0,
            ..TrainConfig::default()
        };
        let m = train(&mut model, &data, &cfg).unwrap();
        let reached = m.epochs_to_threshold;
        assert!(
            reached.is_some(),
            "never hit 100% train accuracy; last = {:?}",
            m.final_epoch()
        );
    }

    #[test]
    fn one_small_step_decreases_the_frozen_batch_loss() {
        for seed in 0..10u64 {
            let spec = SyntheticMixtureSpec::well_separated(2, 8, 100 + seed).unwrap();
            let (set, _) = gen_synthetic_mixture::<f64>(&spec).unwrap();
            let mut model =
                crate::model::ConvNet::build(ConvNetSpec::compact(3, (3, 8, 8)), seed).unwrap();

            let batch_loss = |model: &mut crate::model::ConvNet<f64>| -> f64 {
                let mut tape = Tape::new();
                let mut b = Bindings::new();
                let mut diag = ForwardDiag::default();
                let x = tape.constant(set.images.clone());
                let logits = model
                    .forward(
                        &mut tape,
                        &mut b,
                        x,
                        ForwardMode::Collect,
                        None,
                        InferenceChoice::Plain,
                        &mut diag,
                    )
                    .unwrap();
                let loss = tape.softmax_cross_entropy(logits, &set.labels).unwrap();
                tape.value(loss).scalar_value()
            };

            let before = batch_loss(&mut model);
            let mut tape = Tape::new();
            let mut b = Bindings::new();
            let mut diag = ForwardDiag::default();
            let x = tape.constant(set.images.clone());
            let logits = model
                .forward(
                    &mut tape,
                    &mut b,
                    x,
                    ForwardMode::Collect,
                    None,
                    InferenceChoice::Plain,
                    &mut diag,
                )
                .unwrap();
            let loss = tape.softmax_cross_entropy(logits, &set.labels).unwrap();
            tape.backward(loss).unwrap();
            b.collect_grads(&tape, &mut model.params).unwrap();
            let mut opt = OptimizerState::rmsprop(1e-5, 0.0).unwrap();
            opt.step(&mut model.params).unwrap();
            let after = batch_loss(&mut model);
            assert!(after < before, "seed {seed}: {after} !< {before}");
        }
    }

    #[test]
    fn hard_and_soft_context_inference_agree_when_contexts_collapse() {
        // T = 1 with the context pinned to the moments of the standardized
        // set: zeroing the embedder row leaves the bias heads, which
        // initialize to mu = 0 and sigma^2 = 1 exactly. The hard lookup then
        // applies the very standardization the soft aggregate estimates from
        // a full-set batch, so both inference paths pick identical classes.
        // (A freely trained context drifts away from the data moments and the
        // two paths become different functions; the agreement is a property
        // of the collapsed configuration, not of training.)
        let mut spec = SyntheticMixtureSpec::well_separated(1, 90, 31).unwrap();
        spec.classes = 2;
        spec.pixel_noise = 0.2;
        let (set, ctx) = gen_synthetic_mixture::<f64>(&spec).unwrap();
        let n = set.len();
        let split = SplitData::with_ctx(standardized(set), ctx);
        let data = TrainData { train: split.clone(), val: split.clone(), test: split.clone() };
        let mut model = crate::model::ConvNet::build(
            ConvNetSpec::compact(2, (3, 8, 8)).with_input_cn(crate::context::CnSpec::new(1)),
            9,
        )
        .unwrap();
        for v in model.params.get_mut("cn0.w_r").unwrap().tensor.data_mut() {
            *v = 0.0;
        }
        for name in ["cn0.w_r", "cn0.b_r", "cn0.w_mu", "cn0.b_mu", "cn0.w_sigma", "cn0.b_sigma"] {
            let entry = model.params.get_mut(name).unwrap();
            entry.trainable = false;
            let frozen = entry.tensor.clone().requires_grad(false);
            entry.tensor = frozen;
        }
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            seed: 8,
            threshold: 1.0,
            inference: InferenceChoice::Cn,
            ..TrainConfig::default()
        };
        let m = train(&mut model, &data, &cfg).unwrap();
        assert!(m.epochs_to_threshold.is_some(), "training never memorized the set");

        let hard = evaluate(&mut model, &split, InferenceChoice::Cn, n).unwrap();
        let soft = evaluate(&mut model, &split, InferenceChoice::CnPlus, n).unwrap();
        assert_eq!(hard.accuracy, soft.accuracy);
        assert_eq!(hard.top5, soft.top5);
    }

    #[test]
    fn missing_context_assignment_is_an_input_error() {
        let (mut data, _) = splits(2, 10, 1);
        data.train.ctx = None;
        let mut model = crate::model::ConvNet::build(
            ConvNetSpec::compact(3, (3, 8, 8)).with_input_cn(crate::context::CnSpec::new(2)),
            1,
        )
        .unwrap();
        let cfg = TrainConfig { inference: InferenceChoice::Cn, ..quick_cfg(1, 1e-3) };
        assert!(matches!(train(&mut model, &data, &cfg), Err(Error::Input(_))));

        let (data2, _) = splits(2, 10, 1);
        let mut split = data2.train.clone();
        split.ctx = None;
        assert!(matches!(
            evaluate(&mut model, &split, InferenceChoice::Cn, 8),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn early_stopping_counts_stale_epochs() {
        let (data, _) = splits(1, 40, 2);
        let mut model =
            crate::model::ConvNet::build(ConvNetSpec::compact(3, (3, 8, 8)), 1).unwrap();
        let cfg = TrainConfig { patience: Some(1), ..quick_cfg(10, 0.0) };
        let m = train(&mut model, &data, &cfg).unwrap();
        // constant validation loss: epoch 1 sets the best, epoch 2 is stale
        assert_eq!(m.status, RunStatus::EarlyStopped { after_epoch: 2 });
        assert_eq!(m.epochs.len(), 2);
    }

    #[test]
    fn absurd_learning_rate_reports_divergence_with_partial_metrics() {
        let (data, _) = splits(1, 40, 6);
        let mut model =
            crate::model::ConvNet::build(ConvNetSpec::compact(3, (3, 8, 8)), 2).unwrap();
        let m = train(&mut model, &data, &quick_cfg(5, 1e300)).unwrap();
        assert!(matches!(m.status, RunStatus::Diverged { .. }));
        assert!(m.epochs.len() < 5);
    }

    #[test]
    fn uniform_logits_score_at_chance_level() {
        // zeroed head on top of anything produces uniform logits
        let spec = SyntheticMixtureSpec {
            classes: 10,
            ..SyntheticMixtureSpec::well_separated(1, 100, 13).unwrap()
        };
        let (mut set, _) = gen_synthetic_mixture::<f64>(&spec).unwrap();
        set.labels = (0..set.len()).map(|i| i % 10).collect(); // balanced
        let mut model =
            crate::model::ConvNet::build(ConvNetSpec::compact(10, (3, 8, 8)), 3).unwrap();
        for name in ["head.w", "head.b"] {
            let t = &mut model.params.get_mut(name).unwrap().tensor;
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let m = evaluate(&mut model, &SplitData::plain(set), InferenceChoice::Plain, 32).unwrap();
        assert_eq!(m.accuracy, 0.10);
        assert_eq!(m.top5, 0.50);
    }

    #[test]
    fn mixture_model_trains_after_its_fit_stage() {
        let (data, _) = splits(2, 30, 17);
        let spec = ConvNetSpec::compact(3, (3, 8, 8)).with_norm(NormMode::Mixture(2));
        let mut model = crate::model::ConvNet::build(spec, 5).unwrap();
        let stage = model.mixture_stage_input(&data.train.set.images, None).unwrap();
        model.fit_mixture(&[stage], 23, &crate::gmm::EmOptions::default()).unwrap();
        let m = train(&mut model, &data, &quick_cfg(2, 1e-3)).unwrap();
        assert_eq!(m.status, RunStatus::Completed);
        assert_eq!(m.epochs.len(), 2);
    }
}
