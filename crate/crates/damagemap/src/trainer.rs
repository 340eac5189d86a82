//! The optimization loop: Adam with linear learning-rate decay, per-epoch
//! validation, early stopping on validation loss, best-checkpoint selection,
//! and multi-seed run orchestration.
//!
//! One [`fit`] owns its model parameters exclusively; seeds in [`run_multi`]
//! execute sequentially and share no mutable state. Everything stochastic in
//! a run — split, parameter init, per-epoch shuffle, augmentation draws —
//! derives from that run's seed, so a rerun with the same seed list
//! reproduces the same loss sequences and the same aggregate report.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::CheckpointMeta;
use crate::datapipe::{
    augment, normalize, sample_patches, upsample_minority, AugmentationPolicy, DatasetIndex,
    SampleMode, SplitPlan, DEFAULT_MEAN, DEFAULT_STD,
};
use crate::error::{Error, Result};
use crate::inference::argmax_classes;
use crate::losses::{composite_loss, LossBreakdown, DEFAULT_SMOOTHING};
use crate::metrics::{
    aggregate_runs, per_class_metrics, ConfusionMatrix, EpochRecord, MetricReport, RunSummary,
};
use crate::model::{Model, ModelConfig, ParamStore, Phase, Session};
use crate::schema::{
    compute_class_weights, read_mask_png, ClassWeightTable, DamageClass, ImageTriplet,
};
use crate::tensor::Scalar;

/// How [`run_multi`] partitions the dataset for each seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// The seeded 80/10/10 partition from the data pipeline.
    Random,
    /// Train and validate on every triplet (empty test split). Used for
    /// capacity checks that deliberately memorize a small fixture.
    Overfit,
}

/// Optimization hyperparameters.
///
/// Defaults follow the training recipe: Adam at `lr0 = 0.001` with linear
/// decay, batches of 8, at most 300 epochs, early stopping with patience 20,
/// and four split seeds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// One training run per seed; each re-splits and re-initializes.
    pub seeds: Vec<u64>,
    /// Informational placement hint recorded in manifests ("cpu" here;
    /// nothing in this crate dispatches on it).
    pub device: String,
    /// Lower bound on the decayed learning rate. The schedule itself decays
    /// toward zero, so the default floor of 0 leaves it untouched.
    pub lr_floor: f64,
    /// Optional global-norm gradient clipping; `None` (the default) leaves
    /// gradients unclipped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Dice smoothing constant for both training and validation loss.
    pub dice_smoothing: f64,
    /// Momentum folding batch statistics into running normalization stats.
    pub bn_momentum: f64,
    /// Absolute tolerance for "validation loss improved": strictly better
    /// than the best by at least this much, so float noise cannot reset the
    /// patience counter.
    pub improvement_tol: f64,
    pub split_mode: SplitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            max_epochs: 300,
            batch_size: 8,
            patience: 20,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seeds: vec![0, 1, 2, 3],
            device: "cpu".into(),
            lr_floor: 0.0,
            grad_clip: None,
            dice_smoothing: DEFAULT_SMOOTHING,
            bn_momentum: 0.1,
            improvement_tol: 1e-6,
            split_mode: SplitMode::Random,
        }
    }
}

impl TrainConfig {
    /// Rejects inconsistent hyperparameters, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be strictly positive and finite, got {}",
                self.lr0
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::Config(format!(
                "adam_eps must be strictly positive, got {}",
                self.adam_eps
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must contain at least one entry".into()));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.lr0) {
            return Err(Error::Config(format!(
                "lr_floor must lie in [0, lr0], got {}",
                self.lr_floor
            )));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0 && clip.is_finite()) {
                return Err(Error::Config(format!(
                    "grad_clip must be strictly positive when set, got {clip}"
                )));
            }
        }
        if !(self.dice_smoothing >= 0.0 && self.dice_smoothing.is_finite()) {
            return Err(Error::Config(format!(
                "dice_smoothing must be non-negative, got {}",
                self.dice_smoothing
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum must lie in (0, 1], got {}",
                self.bn_momentum
            )));
        }
        if !(self.improvement_tol >= 0.0 && self.improvement_tol.is_finite()) {
            return Err(Error::Config(format!(
                "improvement_tol must be non-negative, got {}",
                self.improvement_tol
            )));
        }
        Ok(())
    }
}

/// Learning rate at `epoch` under linear decay: `lr0 · (1 − epoch/max_epochs)`,
/// clamped from below by `lr_floor`. Affine in `epoch` with `lr_at(0) = lr0`
/// and slope `−lr0/max_epochs`; strictly positive for every valid epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.max_epochs {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} is out of range for a {}-epoch schedule",
            cfg.max_epochs
        )));
    }
    let raw = cfg.lr0 * (1.0 - epoch as f64 / cfg.max_epochs as f64);
    Ok(raw.max(cfg.lr_floor))
}

/// Seed of one epoch's shuffle/augmentation stream, mixed from the run seed
/// and epoch index with a splitmix64 finalizer so nearby epochs do not share
/// correlated streams.
pub fn epoch_seed(run_seed: u64, epoch: usize) -> u64 {
    let mut z = run_seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Bias-corrected Adam update of one blob, in place.
///
/// Arithmetic runs in f64 regardless of the parameter dtype, then results are
/// stored back at the parameter's precision; with `lr = 0` the parameter is
/// untouched (moments still advance).
pub fn adam_update<S: Scalar>(
    param: &mut ArrayD<S>,
    grad: &ArrayD<S>,
    m: &mut ArrayD<S>,
    v: &mut ArrayD<S>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            let g = g.into_f64();
            let mi = beta1 * m.into_f64() + (1.0 - beta1) * g;
            let vi = beta2 * v.into_f64() + (1.0 - beta2) * g * g;
            *m = S::from_f64(mi);
            *v = S::from_f64(vi);
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            *p = S::from_f64(p.into_f64() - update);
        });
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S: Scalar> {
    t: u64,
    moments: BTreeMap<String, (ArrayD<S>, ArrayD<S>)>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState { t: 0, moments: BTreeMap::new() }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one optimizer step (a single shared time index) across every
    /// named gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore<S>,
        grads: &BTreeMap<String, ArrayD<S>>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        for (name, grad) in grads {
            let param = params.get_mut(name);
            if param.shape() != grad.shape() {
                return Err(Error::InvalidInput(format!(
                    "gradient for {name} has shape {:?}, parameter is {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| {
                (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim()))
            });
            adam_update(
                param,
                grad,
                m,
                v,
                self.t,
                lr,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            );
        }
        Ok(())
    }
}

/// Scales every gradient by `max_norm / ‖g‖` when the global L2 norm of the
/// stacked gradients exceeds `max_norm`.
fn clip_gradients(grads: &mut BTreeMap<String, ArrayD<f32>>, max_norm: f64) {
    let sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
}

/// A normalized, stacked mini-batch ready for the model.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 3, S, S)` normalized pre images.
    pub pre: ArrayD<f32>,
    /// `(B, 3, S, S)` normalized post images.
    pub post: ArrayD<f32>,
    /// `(B, S, S)` class ids.
    pub target: Array3<u8>,
}

/// Normalizes and stacks triplets into batches of `batch_size`. The final
/// batch keeps the remainder rather than dropping samples.
pub fn make_batches(samples: &[ImageTriplet], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot batch an empty sample list".into()));
    }
    let side = samples[0].height();
    samples
        .chunks(batch_size)
        .map(|chunk| {
            let b = chunk.len();
            let mut pre = Array4::<f32>::zeros((b, 3, side, side));
            let mut post = Array4::<f32>::zeros((b, 3, side, side));
            let mut target = Array3::<u8>::zeros((b, side, side));
            for (i, t) in chunk.iter().enumerate() {
                if t.height() != side || t.width() != side {
                    return Err(Error::InvalidInput(format!(
                        "sample {:?} is {}x{}, batch expects {side}x{side}",
                        t.id,
                        t.height(),
                        t.width()
                    )));
                }
                pre.index_axis_mut(Axis(0), i)
                    .assign(&normalize(&t.pre, DEFAULT_MEAN, DEFAULT_STD)?);
                post.index_axis_mut(Axis(0), i)
                    .assign(&normalize(&t.post, DEFAULT_MEAN, DEFAULT_STD)?);
                target.index_axis_mut(Axis(0), i).assign(&t.mask);
            }
            Ok(Batch { pre: pre.into_dyn(), post: post.into_dyn(), target })
        })
        .collect()
}

/// Computes the composite loss of a `(B, C, H, W)` logit batch by pooling the
/// batch into one wide tile, matching the training objective's convention
/// that a batch is scored as a single pixel population.
fn pooled_loss(
    logits: &ArrayD<f32>,
    target: &Array3<u8>,
    weights: &ClassWeightTable,
    smoothing: f64,
) -> Result<LossBreakdown> {
    let view = logits.view().into_dimensionality::<ndarray::Ix4>().map_err(|_| {
        Error::InvalidInput(format!("expected (B, C, H, W) logits, got {:?}", logits.shape()))
    })?;
    let (b, c, h, w) = view.dim();
    let mut wide = Array3::<f32>::zeros((c, h, b * w));
    let mut wide_target = Array2::<u8>::zeros((h, b * w));
    for bi in 0..b {
        wide.slice_mut(ndarray::s![.., .., bi * w..(bi + 1) * w])
            .assign(&view.index_axis(Axis(0), bi));
        wide_target
            .slice_mut(ndarray::s![.., bi * w..(bi + 1) * w])
            .assign(&target.index_axis(Axis(0), bi));
    }
    composite_loss(wide.view(), wide_target.view(), weights, smoothing)
}

fn batch_logits(model: &Model<f32>, batch: &Batch) -> Result<ArrayD<f32>> {
    let mut session = Session::new(model, Phase::Eval, false);
    let pass = session.forward(batch.pre.clone(), batch.post.clone())?;
    Ok(session.tape.value(pass.logits).clone())
}

/// One full pass over `batches`: forward, composite loss, backward, Adam
/// update, and running-stat refresh per batch. Returns the mean of the batch
/// losses, each evaluated before its own update.
///
/// With `lr = 0` the trainable parameters come back bit-identical (the
/// normalization running statistics still track batch activity — they are
/// state, not optimized weights).
pub fn train_epoch(
    model: &mut Model<f32>,
    batches: &[Batch],
    weights: &ClassWeightTable,
    lr: f64,
    adam: &mut AdamState<f32>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::InvalidInput("train_epoch needs at least one batch".into()));
    }
    let mut total = 0.0;
    for (index, batch) in batches.iter().enumerate() {
        let (breakdown, mut grads, bn) = {
            let mut session = Session::new(&*model, Phase::Train, true);
            let pass = session.forward(batch.pre.clone(), batch.post.clone())?;
            let (loss, breakdown) = crate::losses::composite_loss_graph(
                &mut session.tape,
                pass.logits,
                &batch.target,
                weights,
                cfg.dice_smoothing,
            )?;
            session.tape.backward(loss);
            let names: Vec<String> =
                model.params.trainable_names().map(str::to_string).collect();
            let mut grads = BTreeMap::new();
            for name in names {
                if let Some(g) = session.grad(&name) {
                    grads.insert(name, g.clone());
                }
            }
            (breakdown, grads, session.bn_updates().to_vec())
        };
        if !breakdown.total.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite training loss at epoch {epoch}, batch {index}: \
                 dice {:?}, cross-entropy {:?}",
                breakdown.per_class_dice, breakdown.per_class_ce
            )));
        }
        if let Some(max_norm) = cfg.grad_clip {
            clip_gradients(&mut grads, max_norm);
        }
        adam.step(&mut model.params, &grads, lr, cfg)?;
        model.params.apply_bn_updates(&bn, cfg.bn_momentum as f32);
        total += breakdown.total;
    }
    Ok(total / batches.len() as f64)
}

/// Evaluation-phase loss and metrics over a batch list.
///
/// Returns the mean composite loss (same weights and smoothing as training)
/// and the confusion-matrix report of the argmax predictions.
pub fn evaluate(
    model: &Model<f32>,
    batches: &[Batch],
    weights: &ClassWeightTable,
    smoothing: f64,
    run_id: &str,
    epoch: usize,
) -> Result<(f64, MetricReport)> {
    if batches.is_empty() {
        return Err(Error::Config("validation set is empty; nothing to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::new();
    let mut total = 0.0;
    for batch in batches {
        let logits = batch_logits(model, batch)?;
        total += pooled_loss(&logits, &batch.target, weights, smoothing)?.total;
        let pred = argmax_classes(&logits)?;
        for b in 0..pred.dim().0 {
            cm.accumulate(pred.index_axis(Axis(0), b), batch.target.index_axis(Axis(0), b))?;
        }
    }
    Ok((total / batches.len() as f64, per_class_metrics(&cm, run_id, epoch)))
}

/// Square-root inverse-frequency weights counted over the masks of `ids`.
///
/// A damage class absent from every mask is given a pixel count of 1 so the
/// table stays defined for all four classes; tiles where it remains absent
/// contribute zero to its loss terms anyway, so the substitute never shapes
/// training.
pub fn class_weights_from_masks(index: &DatasetIndex, ids: &[String]) -> Result<ClassWeightTable> {
    let by_id: BTreeMap<&str, &std::path::Path> = index
        .triplets
        .iter()
        .map(|t| (t.id.as_str(), t.mask.as_path()))
        .collect();
    let mut counts: BTreeMap<DamageClass, u64> =
        DamageClass::DAMAGE.iter().map(|&c| (c, 0)).collect();
    for id in ids {
        let mask_path = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("unknown triplet id {id:?}")))?;
        let mask = read_mask_png(mask_path)?;
        for &v in mask.iter() {
            let class = DamageClass::from_id(v)?;
            if class != DamageClass::Background {
                *counts.get_mut(&class).unwrap() += 1;
            }
        }
    }
    for count in counts.values_mut() {
        *count = (*count).max(1);
    }
    compute_class_weights(&counts)
}

/// What [`EarlyStopper::observe`] decided about the epoch just finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    /// The epoch improved on the best validation loss (by more than the
    /// tolerance), so its parameters are the new best checkpoint.
    pub improved: bool,
    /// The patience budget is exhausted; training should stop after this
    /// epoch.
    pub stop: bool,
}

/// Patience counter over the validation-loss sequence.
///
/// An epoch counts as an improvement only when its loss beats the best seen
/// so far by strictly more than `tol`; every other epoch increments the stale
/// counter, and the run stops at the first epoch where that counter reaches
/// `patience`. Epochs are indexed from 0, and the reported stopping epoch is
/// the index of the epoch that exhausted the budget. Example: losses
/// `[1.0, 0.9, 0.9, …]` with patience 20 stop at epoch 21 with best epoch 1;
/// with patience 1 and losses worsening from the start, the second epoch
/// (index 1) triggers the stop and the best epoch stays 0.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    tol: f64,
    best_loss: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, tol: f64) -> Self {
        EarlyStopper { patience, tol, best_loss: None, best_epoch: 0, stale: 0 }
    }

    /// Feeds one epoch's validation loss; epochs must arrive in order.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Observation {
        let improved = match self.best_loss {
            None => true,
            Some(best) => val_loss < best - self.tol,
        };
        if improved {
            self.best_loss = Some(val_loss);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation { improved, stop: self.stale >= self.patience }
    }

    /// Epoch index of the best observation so far.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best_loss
    }
}

/// One epoch's entry in the training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLogRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val: MetricReport,
    pub wall_seconds: f64,
}

/// Complete per-epoch history of one run plus the selected best epoch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub run_id: String,
    /// Argmin of `val_loss` over the recorded epochs (first minimum under
    /// the improvement tolerance).
    pub best_epoch: usize,
    pub records: Vec<EpochLogRecord>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LogFooter {
    run_id: String,
    best_epoch: usize,
}

impl TrainLog {
    /// Writes one JSON object per epoch, then a final summary line carrying
    /// the run id and best epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for record in &self.records {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::format(path, format!("log serialization failed: {e}")))?;
            out.push_str(&line);
            out.push('\n');
        }
        let footer = LogFooter { run_id: self.run_id.clone(), best_epoch: self.best_epoch };
        out.push_str(
            &serde_json::to_string(&footer)
                .map_err(|e| Error::format(path, format!("log serialization failed: {e}")))?,
        );
        out.push('\n');
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a log written by [`TrainLog::write_jsonl`].
    pub fn read_jsonl(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        let mut footer: Option<LogFooter> = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if footer.is_some() {
                return Err(Error::format(path, "records found after the summary line"));
            }
            if let Ok(record) = serde_json::from_str::<EpochLogRecord>(line) {
                records.push(record);
            } else {
                footer = Some(
                    serde_json::from_str::<LogFooter>(line)
                        .map_err(|e| Error::format(path, format!("unparseable line: {e}")))?,
                );
            }
        }
        let footer =
            footer.ok_or_else(|| Error::format(path, "missing trailing summary line"))?;
        Ok(TrainLog {
            run_id: footer.run_id,
            best_epoch: footer.best_epoch,
            records,
        })
    }
}

/// The best checkpoint and full history of one [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Model restored to the best epoch's parameters (including the running
    /// normalization statistics as of that epoch).
    pub model: Model<f32>,
    /// Checkpoint metadata for the best epoch.
    pub meta: CheckpointMeta,
    pub log: TrainLog,
    /// Per-epoch records in the shape the metrics exporter consumes.
    pub history: Vec<EpochRecord>,
    /// Class weights counted over this run's train split.
    pub weights: ClassWeightTable,
}

/// Loads evaluation batches for a list of ids: fixed grid crops at the
/// policy's crop side, normalized and stacked. Also serves held-out split
/// scoring, which uses the same deterministic cropping as validation.
pub fn load_val_batches(
    index: &DatasetIndex,
    val_ids: &[String],
    cfg: &TrainConfig,
    aug: &AugmentationPolicy,
    run_seed: u64,
) -> Result<Vec<Batch>> {
    if val_ids.is_empty() {
        return Err(Error::Config("validation split is empty; check the split plan".into()));
    }
    // Val cropping is a fixed grid; the rng is part of the sampling
    // signature but draws nothing in val mode.
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    let mut samples = Vec::new();
    for id in val_ids {
        let triplet = index.load_triplet(id)?;
        samples.extend(sample_patches(&triplet, SampleMode::Val, aug, &mut rng)?);
    }
    make_batches(&samples, cfg.batch_size)
}

/// Trains one run on a fixed split and returns the best checkpoint plus the
/// full log.
///
/// Parameter initialization reseeds the model config with
/// `config.seed XOR run_seed` so each run starts from its own weights; the
/// per-epoch shuffle and augmentation stream comes from
/// [`epoch_seed`]`(run_seed, epoch)`. Stops early when validation loss fails
/// to improve for `patience` consecutive epochs.
pub fn fit(
    index: &DatasetIndex,
    split: &SplitPlan,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    aug: &AugmentationPolicy,
    run_seed: u64,
    run_id: &str,
) -> Result<FitResult> {
    cfg.validate()?;
    aug.validate()?;
    if aug.crop_side != model_cfg.input_side {
        return Err(Error::Config(format!(
            "crop_side {} must match the model's input_side {}",
            aug.crop_side, model_cfg.input_side
        )));
    }
    if split.train_ids.is_empty() {
        return Err(Error::Config("train split is empty; check the split plan".into()));
    }

    let mut init_cfg = model_cfg.clone();
    init_cfg.seed = model_cfg.seed ^ run_seed;
    let mut model = Model::<f32>::new(init_cfg)?;

    let weights = class_weights_from_masks(index, &split.train_ids)?;
    let val_batches = load_val_batches(index, &split.val_ids, cfg, aug, run_seed)?;
    let upsampled = upsample_minority(&split.train_ids, &index.present_classes)?;

    let mut adam = AdamState::<f32>::new();
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.improvement_tol);
    let mut records = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(ParamStore<f32>, usize, f64)> = None;

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg)?;

        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(run_seed, epoch));
        let mut order = upsampled.clone();
        order.shuffle(&mut rng);

        let mut samples = Vec::with_capacity(order.len());
        for id in &order {
            let triplet = index.load_triplet(id)?;
            let augmented = augment(&triplet, aug, &mut rng)?;
            samples.extend(sample_patches(&augmented, SampleMode::Train, aug, &mut rng)?);
        }
        let batches = make_batches(&samples, cfg.batch_size)?;
        let train_loss = train_epoch(&mut model, &batches, &weights, lr, &mut adam, cfg, epoch)?;

        let (val_loss, report) =
            evaluate(&model, &val_batches, &weights, cfg.dice_smoothing, run_id, epoch)?;

        let observation = stopper.observe(epoch, val_loss);
        if observation.improved {
            best = Some((model.params.clone(), epoch, val_loss));
        }

        records.push(EpochLogRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val: report.clone(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        history.push(EpochRecord { report, train_loss, val_loss });

        if observation.stop {
            break;
        }
    }

    // max_epochs ≥ 1, so at least one epoch ran and set a best.
    let (best_params, best_epoch, best_val) = best.expect("at least one epoch recorded");
    let model = Model::from_parts(model.config().clone(), best_params)?;
    let mut extras = BTreeMap::new();
    extras.insert("run_id".to_string(), run_id.to_string());
    extras.insert("run_seed".to_string(), run_seed.to_string());
    extras.insert("split_seed".to_string(), split.seed.to_string());
    let meta = CheckpointMeta { epoch: best_epoch, val_loss: best_val, extras };
    let log = TrainLog { run_id: run_id.to_string(), best_epoch, records };
    Ok(FitResult { model, meta, log, history, weights })
}

/// Builds the split one seed trains on, honoring the configured mode.
pub fn split_for_seed(index: &DatasetIndex, cfg: &TrainConfig, seed: u64) -> Result<SplitPlan> {
    match cfg.split_mode {
        SplitMode::Random => index.make_split(seed),
        SplitMode::Overfit => {
            let ids = index.ids();
            Ok(SplitPlan {
                seed,
                test_ids: Vec::new(),
                val_ids: ids.clone(),
                train_ids: ids,
            })
        }
    }
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub run_id: String,
    pub split: SplitPlan,
    pub result: FitResult,
    /// Metrics of the best checkpoint re-evaluated on this split's
    /// validation set.
    pub final_report: MetricReport,
}

/// Trains one run per configured seed — re-split, re-initialize, fit — then
/// re-evaluates each best checkpoint on its own validation split and
/// aggregates the final reports across runs.
pub fn run_multi(
    index: &DatasetIndex,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    aug: &AugmentationPolicy,
) -> Result<(Vec<RunOutcome>, RunSummary)> {
    cfg.validate()?;
    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    let mut finals = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let split = split_for_seed(index, cfg, seed)?;
        let run_id = format!("seed{seed}");
        let result = fit(index, &split, model_cfg, cfg, aug, seed, &run_id)?;
        let val_batches = load_val_batches(index, &split.val_ids, cfg, aug, seed)?;
        let (_, final_report) = evaluate(
            &result.model,
            &val_batches,
            &result.weights,
            cfg.dice_smoothing,
            &run_id,
            result.meta.epoch,
        )?;
        finals.push(final_report.clone());
        outcomes.push(RunOutcome { seed, run_id, split, result, final_report });
    }
    let summary = aggregate_runs(&finals)?;
    Ok((outcomes, summary))
}
