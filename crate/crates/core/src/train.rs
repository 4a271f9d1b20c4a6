//! Training loop: Adam with warmup + cosine learning-rate schedule, gradient
//! accumulation, per-epoch validation and best-epoch selection.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{example_loss, Example, ModelConfig, Stage};
use crate::params::ParamStore;
use crate::rng;
use crate::storage::checkpoint::OptimizerSnapshot;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::SpecialIds;
use crate::vision::{patchify, preprocess, RawImage};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub lr_floor_frac: f64,
    pub seed: u64,
    /// Longest decoder input (BOS + text tokens) accepted for this stage.
    pub max_seq_len: usize,
    /// Caps the schedule length (and the run) at this many updates.
    #[serde(default)]
    pub max_updates: Option<usize>,
    /// Stops once an update's mean loss falls below this value.
    #[serde(default)]
    pub target_loss: Option<f64>,
    /// Keep the parameters of the epoch with the lowest validation loss.
    #[serde(default = "default_true")]
    pub select_best_val: bool,
    /// Validate on at most this many examples.
    #[serde(default)]
    pub max_val_examples: Option<usize>,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Caption,
            epochs: 10,
            micro_batch: 12,
            accum_steps: 32,
            peak_lr: 6e-4,
            warmup_frac: 0.05,
            lr_floor_frac: 0.10,
            seed: 0,
            max_seq_len: 64,
            max_updates: None,
            target_loss: None,
            select_best_val: true,
            max_val_examples: None,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Findings,
            epochs: 30,
            micro_batch: 1,
            max_seq_len: 256,
            ..Self::stage1()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Caption => Self::stage1(),
            Stage::Findings => Self::stage2(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.accum_steps == 0 || self.micro_batch == 0 || self.epochs == 0 {
            return bad("epochs, micro_batch and accum_steps must be at least 1");
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad("warmup_frac must lie in (0, 1)");
        }
        if !(self.lr_floor_frac > 0.0 && self.lr_floor_frac <= 1.0) {
            return bad("lr_floor_frac must lie in (0, 1]");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2");
        }
        if self.max_updates == Some(0) {
            return bad("max_updates must be positive");
        }
        Ok(())
    }

    pub fn updates_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.micro_batch * self.accum_steps)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        let full = self.epochs * self.updates_per_epoch(samples);
        self.max_updates.map_or(full, |m| m.min(full))
    }
}

/// Learning rate for update `step` of `total_steps`: linear warmup to the
/// peak over `ceil(warmup_frac · total)` updates, then cosine decay to
/// `lr_floor_frac · peak`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let peak = cfg.peak_lr;
    let warmup = (cfg.warmup_frac * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(peak * (step + 1) as f64 / warmup as f64);
    }
    let floor = cfg.lr_floor_frac * peak;
    let u = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * u).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot<F> {
        OptimizerSnapshot {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_snapshot(s: OptimizerSnapshot<F>) -> Self {
        Self {
            m: s.m,
            v: s.v,
            step: s.step,
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// then zeroed. Fails without touching anything if a gradient is non-finite.
pub fn adam_step<F: Scalar>(params: &mut ParamStore<F>, state: &mut OptimizerState<F>, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer state for {} tensors, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    for e in params.entries() {
        if !e.grad.all_finite() {
            return Err(Error::NonFiniteGrad(e.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (F::of(ADAM_BETA1), F::of(ADAM_BETA2));
    let (c1, c2) = (F::one() - b1, F::one() - b2);
    let bc1 = F::of(1.0 - ADAM_BETA1.powf(t));
    let bc2 = F::of(1.0 - ADAM_BETA2.powf(t));
    let (lr, eps) = (F::of(lr), F::of(ADAM_EPS));
    for (i, e) in params.entries_mut().iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = e.value.data_mut();
        for (j, &g) in e.grad.data().iter().enumerate() {
            m[j] = b1 * m[j] + c1 * g;
            v[j] = b2 * v[j] + c2 * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    params.zero_grads();
    Ok(())
}

/// A training example before preprocessing: images in capture order and the
/// text token ids (no BOS/EOS).
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub images: Vec<Arc<RawImage>>,
    pub tokens: Vec<u32>,
}

pub fn prepare_example<F: Scalar>(item: &TrainItem, cfg: &ModelConfig) -> Result<Example<F>> {
    let patches = item
        .images
        .iter()
        .map(|raw| patchify(&preprocess::<F>(raw, &cfg.encoder)?, &cfg.encoder))
        .collect::<Result<_>>()?;
    Ok(Example {
        patches,
        tokens: item.tokens.clone(),
    })
}

fn check_items(items: &[TrainItem], model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    let limit = train.max_seq_len.min(model.decoder.max_seq_len);
    for it in items {
        if it.tokens.len() + 1 > limit {
            return Err(Error::Data(format!(
                "`{}`: {} tokens exceed the sequence limit of {limit}",
                it.id,
                it.tokens.len() + 1
            )));
        }
        let n = it.images.len();
        match train.stage {
            Stage::Caption if n != 1 => {
                return Err(Error::Data(format!("`{}`: caption example with {n} images", it.id)))
            }
            Stage::Findings if n == 0 || n > model.max_images => {
                return Err(Error::Data(format!(
                    "`{}`: {n} images; procedures over {} images must be filtered before training",
                    it.id, model.max_images
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Mean per-example loss, forward only.
pub fn mean_loss<F: Scalar>(
    params: &ParamStore<F>,
    items: &[TrainItem],
    model: &ModelConfig,
    stage: Stage,
    special: SpecialIds,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for it in items {
        let ex = prepare_example::<F>(it, model)?;
        let mut g = Graph::with_params(params);
        let l = example_loss(&mut g, &ex, model, stage, special)?;
        total += g.scalar(l).as_f64();
    }
    Ok(total / items.len() as f64)
}

/// Token-weighted cross-entropy over `items` (total CE / predicted positions).
pub fn per_token_loss<F: Scalar>(
    params: &ParamStore<F>,
    items: &[TrainItem],
    model: &ModelConfig,
    stage: Stage,
    special: SpecialIds,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for it in items {
        let ex = prepare_example::<F>(it, model)?;
        let mut g = Graph::with_params(params);
        let l = example_loss(&mut g, &ex, model, stage, special)?;
        let n = it.tokens.len() + 1;
        total += g.scalar(l).as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(total / count as f64)
}

/// Forward/backward over one micro-batch; gradients are accumulated into the
/// store scaled by `weight`. Returns the micro-batch mean loss.
pub fn accumulate_micro_batch<F: Scalar>(
    params: &mut ParamStore<F>,
    examples: &[Example<F>],
    model: &ModelConfig,
    stage: Stage,
    special: SpecialIds,
    weight: f64,
) -> Result<f64> {
    let grads = {
        let mut g = Graph::with_params(params);
        let mut total = None;
        for ex in examples {
            let l = example_loss(&mut g, ex, model, stage, special)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.ok_or(Error::EmptyCorpus)?;
        let mean = g.scale(total, F::of(1.0 / examples.len() as f64));
        let loss = g.scalar(mean).as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        (g.backward(mean, F::of(weight))?, loss)
    };
    params.accumulate(&grads.0);
    Ok(grads.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn curve_csv_header() -> &'static str {
    "update_index,epoch,lr,loss\n"
}

pub fn curve_csv_row(p: &CurvePoint) -> String {
    format!("{},{},{},{}\n", p.update, p.epoch, p.lr, p.loss)
}

/// Where a run stands; stored in checkpoint metadata for resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epochs_done: usize,
    pub updates_done: usize,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub finished: bool,
}

impl TrainProgress {
    pub fn start() -> Self {
        Self {
            epochs_done: 0,
            updates_done: 0,
            best_val: None,
            best_epoch: None,
            finished: false,
        }
    }
}

pub struct EpochEnd<'a, F> {
    pub epoch: usize,
    pub params: &'a ParamStore<F>,
    pub optimizer: &'a OptimizerState<F>,
    pub val_loss: Option<f64>,
    pub is_best: bool,
    pub progress: &'a TrainProgress,
    /// Curve points of this epoch.
    pub curve: &'a [CurvePoint],
}

#[derive(Debug, Clone)]
pub struct TrainReport<F> {
    pub curve: Vec<CurvePoint>,
    pub val_losses: Vec<(usize, f64)>,
    pub progress: TrainProgress,
    pub stopped_early: bool,
    /// Parameters of the best-validation epoch reached during this call.
    pub best_params: Option<ParamStore<F>>,
}

/// Runs (or resumes) training. Epoch `e` visits the training items in an
/// order drawn from `(seed, e)`; each update averages the loss over up to
/// `micro_batch · accum_steps` examples.
#[allow(clippy::too_many_arguments)]
pub fn train<F: Scalar>(
    params: &mut ParamStore<F>,
    optimizer: &mut OptimizerState<F>,
    progress: TrainProgress,
    train_items: &[TrainItem],
    val_items: &[TrainItem],
    model: &ModelConfig,
    cfg: &TrainConfig,
    special: SpecialIds,
    on_epoch: &mut dyn FnMut(&EpochEnd<'_, F>) -> Result<()>,
) -> Result<TrainReport<F>> {
    cfg.validate()?;
    model.check_params(params)?;
    if train_items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_items(train_items, model, cfg)?;
    check_items(val_items, model, cfg)?;
    let val_items = &val_items[..cfg.max_val_examples.map_or(val_items.len(), |m| m.min(val_items.len()))];
    let total = cfg.total_steps(train_items.len());
    let per_update = cfg.micro_batch * cfg.accum_steps;
    let mut progress = progress;
    let mut report = TrainReport {
        curve: Vec::new(),
        val_losses: Vec::new(),
        progress: progress.clone(),
        stopped_early: false,
        best_params: None,
    };
    params.zero_grads();

    'epochs: for epoch in progress.epochs_done..cfg.epochs {
        if progress.updates_done >= total || progress.finished {
            break;
        }
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        let epoch_start = report.curve.len();
        let mut stop = false;
        for chunk in order.chunks(per_update) {
            if progress.updates_done >= total {
                break;
            }
            let mut loss_sum = 0.0;
            for micro in chunk.chunks(cfg.micro_batch) {
                let examples = micro
                    .iter()
                    .map(|&i| prepare_example::<F>(&train_items[i], model))
                    .collect::<Result<Vec<_>>>()?;
                let weight = micro.len() as f64 / chunk.len() as f64;
                let l = accumulate_micro_batch(params, &examples, model, cfg.stage, special, weight)?;
                loss_sum += l * weight;
            }
            let lr = lr_at(progress.updates_done, total, cfg)?;
            adam_step(params, optimizer, lr)?;
            report.curve.push(CurvePoint {
                update: progress.updates_done,
                epoch,
                lr,
                loss: loss_sum,
            });
            progress.updates_done += 1;
            if cfg.target_loss.is_some_and(|t| loss_sum < t) {
                stop = true;
                report.stopped_early = true;
                break;
            }
        }
        progress.epochs_done = epoch + 1;
        let val_loss = if val_items.is_empty() {
            None
        } else {
            Some(mean_loss(params, val_items, model, cfg.stage, special)?)
        };
        let mut is_best = false;
        if let Some(v) = val_loss {
            report.val_losses.push((epoch, v));
            if cfg.select_best_val && progress.best_val.is_none_or(|b| v < b) {
                progress.best_val = Some(v);
                progress.best_epoch = Some(epoch);
                report.best_params = Some(params.clone());
                is_best = true;
            }
        }
        if stop || progress.updates_done >= total || epoch + 1 == cfg.epochs {
            progress.finished = true;
        }
        on_epoch(&EpochEnd {
            epoch,
            params,
            optimizer,
            val_loss,
            is_best,
            progress: &progress,
            curve: &report.curve[epoch_start..],
        })?;
        if progress.finished {
            break 'epochs;
        }
    }
    report.progress = progress;
    Ok(report)
}
