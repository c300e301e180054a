use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::total_loss;
use super::schedule::{Plateau, TrainSchedule};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{confusion_metrics, BinaryMask};
use crate::model::net::TecNet;
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Tape, Tensor};

pub const LOSS_CSV_HEADER: &str = "step,epoch,lambda,lr,loss_total,loss_tec,loss_cnn,loss_trans";

/// Probability threshold for emitted masks.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub schedule: TrainSchedule,
    pub batch_size: usize,
    /// Stops early once this many optimizer steps are taken.
    pub max_steps: Option<usize>,
    /// Seeds the shuffling of every epoch.
    pub seed: u64,
}

impl TrainOptions {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainOptions {
            schedule: TrainSchedule {
                total_epochs: epochs,
                ..TrainSchedule::default()
            },
            batch_size,
            max_steps: None,
            seed,
        }
    }

    /// Enough epochs to take `steps` optimizer steps over `n` samples.
    pub fn for_steps(steps: usize, n: usize, batch_size: usize, seed: u64) -> Self {
        let per_epoch = n.div_ceil(batch_size).max(1);
        TrainOptions {
            max_steps: Some(steps),
            ..Self::new(steps.div_ceil(per_epoch).max(1), batch_size, seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    /// Batch means of `[total, tec, cnn, trans]`.
    pub loss: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    pub train_loss: f64,
    /// Held-out total loss at the epoch's λ; the training mean without a
    /// held-out split.
    pub val_loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Mean Dice of the fused head on the held-out split after the final
    /// rounding of parameters to `f32`.
    pub final_val_dice: Option<f64>,
}

/// Loss values and parameter gradients of one sample, in store order.
pub fn sample_gradients(
    net: &TecNet,
    store: &ParamStore,
    sample: &Sample,
    lambda: f64,
) -> Result<([f64; 4], Vec<Option<Vec<f64>>>)> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let out = net.forward(&ctx, ctx.constant(sample.image.clone()))?;
    let parts = total_loss(&out, ctx.constant(sample.mask.clone()), lambda)?;
    let values = parts.values();
    let grads = tape.backward(parts.total)?;
    Ok((values, store.collect_grads(&tape, &grads)))
}

/// Batch-mean losses and gradients. Samples run in parallel and are reduced
/// in batch order, so the result does not depend on thread count.
pub fn batch_gradients(
    net: &TecNet,
    store: &ParamStore,
    batch: &[&Sample],
    lambda: f64,
) -> Result<([f64; 4], Vec<Vec<f64>>)> {
    let per: Vec<_> = batch
        .par_iter()
        .map(|s| sample_gradients(net, store, s, lambda))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = [0.0; 4];
    let mut grads: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
    for (values, g) in &per {
        for (a, b) in loss.iter_mut().zip(values) {
            *a += b;
        }
        for (acc, g) in grads.iter_mut().zip(g) {
            if let Some(g) = g {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
    loss.iter_mut().for_each(|v| *v *= scale);
    grads.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok((loss, grads))
}

/// Inference on one image: `(y_tec logits, total loss at λ)`.
pub fn infer(
    net: &TecNet,
    store: &ParamStore,
    sample: &Sample,
    lambda: f64,
) -> Result<(Tensor, f64)> {
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let out = net.forward(&ctx, ctx.constant(sample.image.clone()))?;
    let loss = total_loss(&out, ctx.constant(sample.mask.clone()), lambda)?;
    let logits = out.y_tec.value();
    Ok(((*logits).clone(), loss.total.item()))
}

/// Mask of pixels whose fused-head probability exceeds [`MASK_THRESHOLD`].
pub fn logits_to_mask(logits: &Tensor) -> Result<BinaryMask> {
    let s = logits.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let data = logits.data()[..h * w]
        .iter()
        .map(|&x| 1.0 / (1.0 + (-x).exp()) > MASK_THRESHOLD)
        .collect();
    BinaryMask::new(h, w, data)
}

/// Per-sample predicted masks and held-out losses, in input order.
pub fn predict(
    net: &TecNet,
    store: &ParamStore,
    samples: &[Sample],
    lambda: f64,
) -> Result<Vec<(BinaryMask, f64)>> {
    samples
        .par_iter()
        .map(|s| {
            let (logits, loss) = infer(net, store, s, lambda)?;
            Ok((logits_to_mask(&logits)?, loss))
        })
        .collect()
}

/// Mean Dice (percent) of predicted masks against the samples' masks.
pub fn mean_dice(samples: &[Sample], masks: &[BinaryMask]) -> Result<f64> {
    let mut total = 0.0;
    for (s, m) in samples.iter().zip(masks) {
        total += confusion_metrics(m, &BinaryMask::from_tensor(&s.mask, 0.5)?)?.di;
    }
    Ok(total / samples.len() as f64)
}

pub fn evaluate_dice(net: &TecNet, store: &ParamStore, samples: &[Sample]) -> Result<f64> {
    let masks: Vec<BinaryMask> = predict(net, store, samples, 1.0)?
        .into_iter()
        .map(|(m, _)| m)
        .collect();
    mean_dice(samples, &masks)
}

fn check_finite(step: usize, loss: &[f64; 4]) -> Result<()> {
    if loss.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::Divergence(format!(
        "step {step}: loss_total={} loss_tec={} loss_cnn={} loss_trans={}",
        loss[0], loss[1], loss[2], loss[3]
    )))
}

/// Adam on the ramped total loss. Parameters are rounded to `f32` at the end
/// so that they survive a checkpoint roundtrip unchanged.
pub fn train(
    net: &TecNet,
    store: &mut ParamStore,
    train_set: &[Sample],
    val_set: &[Sample],
    opts: &TrainOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    let s = &opts.schedule;
    s.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let mut opt = Adam::new(store, s.beta1, s.beta2, s.eps);
    let mut plateau = Plateau::new(s);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    if let Some(w) = log.as_mut() {
        writeln!(w, "{LOSS_CSV_HEADER}")?;
    }
    let mut step = 0;
    'epochs: for epoch in 0..s.total_epochs {
        let lambda = s.lambda(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size) {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(net, store, &batch, lambda)?;
            step += 1;
            check_finite(step, &loss)?;
            opt.step(store, &grads, plateau.lr);
            let rec = StepRecord {
                step,
                epoch,
                lambda,
                lr: plateau.lr,
                loss,
            };
            if let Some(w) = log.as_mut() {
                writeln!(
                    w,
                    "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                    rec.step, rec.epoch, rec.lambda, rec.lr, loss[0], loss[1], loss[2], loss[3]
                )?;
            }
            report.steps.push(rec);
            sum += loss[0];
            batches += 1;
        }
        let train_loss = sum / batches as f64;
        let (val_loss, val_dice) = if val_set.is_empty() {
            (train_loss, None)
        } else {
            let pred = predict(net, store, val_set, lambda)?;
            let loss = pred.iter().map(|(_, l)| l).sum::<f64>() / val_set.len() as f64;
            let masks: Vec<BinaryMask> = pred.into_iter().map(|(m, _)| m).collect();
            (loss, Some(mean_dice(val_set, &masks)?))
        };
        report.epochs.push(EpochRecord {
            epoch,
            lambda,
            lr: plateau.lr,
            train_loss,
            val_loss,
            val_dice,
        });
        plateau.observe(val_loss);
    }
    store.round_to_f32();
    if !val_set.is_empty() {
        report.final_val_dice = Some(evaluate_dice(net, store, val_set)?);
    }
    Ok(report)
}
