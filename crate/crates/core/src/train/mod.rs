//! Supervised training and evaluation.

mod metrics;
mod optim;
mod schedule;

pub use metrics::{write_metrics_csv, EpochMetrics, SplitKind};
pub use optim::{AdamW, AdamWConfig, StepOutcome};
pub use schedule::{LrSchedule, LrScaling};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape};
use crate::data::{BatchSpec, Batcher, ChannelStats, Sample};
use crate::energy::Profiler;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::norm::Mode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total epochs, counting those a resumed run already completed.
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches summed into each optimizer step.
    pub accum_steps: usize,
    pub base_lr: f64,
    pub lr_scaling: LrScaling,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Flip and pad-crop static images.
    pub augment: bool,
    /// Run batch norm on its running statistics during training.
    pub freeze_bn: bool,
    /// Record zero wall times so that metrics files are byte-reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            accum_steps: 1,
            base_lr: 6e-4,
            lr_scaling: LrScaling::Per256,
            warmup_epochs: 1,
            weight_decay: 0.01,
            seed: 0,
            augment: false,
            freeze_bn: false,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if self.accum_steps == 0 {
            errs.push("accum_steps must be at least 1".to_string());
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            errs.push(format!("base_lr must be non-negative, got {}", self.base_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            errs.push(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Optimizer steps per epoch for `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size).div_ceil(self.accum_steps) as u64
    }

    pub fn schedule(&self, n: usize) -> LrSchedule {
        let per_epoch = self.steps_per_epoch(n);
        LrSchedule::new(
            self.base_lr,
            self.batch_size * self.accum_steps,
            self.lr_scaling,
            per_epoch * self.warmup_epochs as u64,
            per_epoch * self.epochs as u64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub firing_rate: Option<f64>,
}

fn topk_hits(logits: &[f64], classes: usize, labels: &[usize], k: usize) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &logits[i * classes..][..classes];
            let target = row[label];
            // Ties resolve toward the lower class index.
            let better = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < label))
                .count();
            better < k
        })
        .count()
}

/// Inference-mode loss and accuracy; attaches a profiler, whose counters are
/// returned alongside.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    batch_size: usize,
    normalize: Option<&ChannelStats>,
) -> Result<(EvalReport, Profiler)> {
    let mut spec = BatchSpec::new(batch_size, model.config().timesteps);
    spec.normalize = normalize.cloned();
    let classes = model.config().num_classes;
    let mut profiler = Profiler::default();
    let (mut loss, mut top1, mut top5) = (0.0, 0usize, 0usize);
    for batch in Batcher::new(samples, spec)? {
        let mut tape = Tape::new(Mode::Infer).with_profiler();
        let logits = model.forward(&mut tape, &batch.input)?;
        let l = tape.cross_entropy(logits, &batch.labels)?;
        loss += tape.value(l).data()[0] * batch.labels.len() as f64;
        let lv = tape.value(logits).data();
        top1 += topk_hits(lv, classes, &batch.labels, 1);
        top5 += topk_hits(lv, classes, &batch.labels, 5);
        profiler.merge(tape.profiler().expect("attached"));
    }
    let n = samples.len().max(1) as f64;
    let report = EvalReport {
        samples: samples.len(),
        loss: loss / n,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        firing_rate: profiler.firing_rates().model_mean,
    };
    Ok((report, profiler))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub optimizer_steps: u64,
    pub skipped_steps: u64,
    pub final_eval: Option<EvalReport>,
}

/// Options beyond the hyperparameters.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Epochs already completed by a resumed run; the schedule continues
    /// from there.
    pub start_epoch: usize,
    pub normalize: Option<ChannelStats>,
    /// Called after every metric row.
    pub on_metrics: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

/// Trains `model` in place, evaluating on `test` after every epoch when it is
/// non-empty.
pub fn train_loop(
    model: &mut Model,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidValue("empty training set".into()));
    }
    let schedule = cfg.schedule(train.len());
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut step = cfg.steps_per_epoch(train.len()) * hooks.start_epoch as u64;
    let mut report = TrainReport {
        history: Vec::new(),
        optimizer_steps: 0,
        skipped_steps: 0,
        final_eval: None,
    };
    let timesteps = model.config().timesteps;
    let mode = if cfg.freeze_bn { Mode::Infer } else { Mode::Train };
    let mut emit = |report: &mut TrainReport, row: EpochMetrics| {
        if let Some(f) = hooks.on_metrics.as_mut() {
            f(&row);
        }
        report.history.push(row);
    };
    for epoch in hooks.start_epoch..cfg.epochs {
        let started = Instant::now();
        let spec = BatchSpec {
            batch_size: cfg.batch_size,
            timesteps,
            shuffle: true,
            seed: cfg.seed,
            epoch: epoch as u64,
            augment: cfg.augment,
            normalize: hooks.normalize.clone(),
        };
        let batches: Vec<_> = Batcher::new(train, spec)?.collect();
        let mut profiler = Profiler::default();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for group in batches.chunks(cfg.accum_steps) {
            let total: usize = group.iter().map(|b| b.labels.len()).sum();
            let mut grads = Gradients::default();
            for batch in group {
                let mut tape = Tape::new(mode).with_profiler();
                let logits = model.forward(&mut tape, &batch.input)?;
                let loss = tape.cross_entropy(logits, &batch.labels)?;
                let lv = tape.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        step: step as usize,
                        loss: lv,
                    });
                }
                let b = batch.labels.len();
                loss_sum += lv * b as f64;
                correct += topk_hits(
                    tape.value(logits).data(),
                    model.config().num_classes,
                    &batch.labels,
                    1,
                );
                grads.accumulate(&tape.backward(loss)?, b as f64 / total as f64);
                model.commit_bn_updates(&tape);
                profiler.merge(tape.profiler().expect("attached"));
            }
            match opt.step(model.store_mut(), &grads, schedule.at(step)) {
                StepOutcome::Applied => report.optimizer_steps += 1,
                StepOutcome::SkippedNonFinite => report.skipped_steps += 1,
            }
            step += 1;
        }
        let wall = |t: Instant| {
            if cfg.deterministic {
                0
            } else {
                t.elapsed().as_millis() as u64
            }
        };
        let n = train.len() as f64;
        emit(
            &mut report,
            EpochMetrics {
                epoch: epoch + 1,
                split: SplitKind::Train,
                loss: loss_sum / n,
                acc: correct as f64 / n,
                firing_rate: profiler.firing_rates().model_mean,
                wall_ms: wall(started),
            },
        );
        if !test.is_empty() {
            let eval_start = Instant::now();
            let (ev, _) = evaluate(model, test, cfg.batch_size, hooks.normalize.as_ref())?;
            emit(
                &mut report,
                EpochMetrics {
                    epoch: epoch + 1,
                    split: SplitKind::Eval,
                    loss: ev.loss,
                    acc: ev.top1,
                    firing_rate: ev.firing_rate,
                    wall_ms: wall(eval_start),
                },
            );
            report.final_eval = Some(ev);
        }
    }
    Ok(report)
}
