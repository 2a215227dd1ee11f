use rayon::prelude::*;

use super::{cosine_lr, AdapterMode, Sample, TaskParams, TrainConfig};
use crate::attention::ParamGrads;
use crate::backbone::{encode_tape, ClassTemplate, DualEncoder, EncodeTape};
use crate::error::{Error, Result};
use crate::numkernel::{cross_entropy, dot, Rng};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains fresh parameters for one task with SGD and a cosine schedule.
///
/// Adapters run at weight 1 throughout; calibration only exists at
/// inference. The backbone is borrowed immutably.
pub fn train_task(
    dataset: &[Sample],
    classes: &[ClassTemplate],
    backbone: &DualEncoder,
    cfg: &TrainConfig,
    mode: AdapterMode,
    rng: &mut Rng,
) -> Result<(TaskParams, TrainReport)> {
    cfg.validate(backbone.depth())?;
    if classes.is_empty() {
        return Err(Error::contract("task has no classes"));
    }
    if let Some(s) = dataset.iter().find(|s| s.label >= classes.len()) {
        return Err(Error::Index { index: s.label, len: classes.len() });
    }
    let mut params = TaskParams::init(mode, cfg, backbone.dim(), rng);
    let mut report = TrainReport::default();
    if dataset.is_empty() || cfg.epochs == 0 {
        return Ok((params, report));
    }

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch);
    let total = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, image_grads, text_grads) = batch_gradients(&params, &batch, classes, backbone, cfg.logit_scale)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let lr = cosine_lr(step, total, cfg.lr0)?;
            params.sgd_step(lr, &image_grads, &text_grads)?;
            epoch_loss += loss;
            step += 1;
        }
        report.epoch_losses.push(epoch_loss / steps_per_epoch as f64);
    }
    report.steps = step;
    Ok((params, report))
}

/// Mean cross-entropy over the batch and its gradients for the image-side
/// and text-side parameters.
pub(crate) fn batch_gradients(
    params: &TaskParams,
    batch: &[&Sample],
    classes: &[ClassTemplate],
    backbone: &DualEncoder,
    logit_scale: f64,
) -> Result<(f64, Vec<ParamGrads>, Vec<ParamGrads>)> {
    let img_insert = params.image_insert(1.0);
    let txt_insert = params.text_insert(1.0);
    let inv_b = 1.0 / batch.len() as f64;

    let text: Vec<(Vec<f64>, EncodeTape)> =
        classes.iter().map(|c| encode_tape(&c.tokens(), &backbone.text, &txt_insert)).collect::<Result<_>>()?;

    // Per-sample work is independent; results are reduced in batch order.
    let per_sample: Vec<(f64, Vec<f64>, Vec<ParamGrads>)> = batch
        .par_iter()
        .map(|s| {
            let (feature, tape) = encode_tape(&s.tokens, &backbone.image, &img_insert)?;
            let logits: Vec<f64> = text.iter().map(|(t, _)| logit_scale * dot(&feature, t)).collect();
            let (loss, g) = cross_entropy(&logits, s.label)?;
            let mut d_feature = vec![0.0; feature.len()];
            for ((t, _), gk) in text.iter().zip(&g) {
                for (df, tv) in d_feature.iter_mut().zip(t) {
                    *df += logit_scale * inv_b * gk * tv;
                }
            }
            let grads = tape.backward(&backbone.image, &img_insert, &d_feature)?;
            // Gradient on each text feature from this sample.
            let d_text: Vec<f64> = g.iter().flat_map(|gk| feature.iter().map(move |f| logit_scale * inv_b * gk * f)).collect();
            Ok((loss, d_text, grads))
        })
        .collect::<Result<_>>()?;

    let d = backbone.dim();
    let mut loss = 0.0;
    let mut d_text = vec![0.0; classes.len() * d];
    let mut image_grads: Option<Vec<ParamGrads>> = None;
    for (l, dt, grads) in per_sample {
        loss += l;
        for (acc, v) in d_text.iter_mut().zip(&dt) {
            *acc += v;
        }
        match image_grads.as_mut() {
            None => image_grads = Some(grads),
            Some(acc) => add_grads(acc, &grads)?,
        }
    }

    let mut text_grads: Option<Vec<ParamGrads>> = None;
    for (k, (_, tape)) in text.iter().enumerate() {
        let grads = tape.backward(&backbone.text, &txt_insert, &d_text[k * d..(k + 1) * d])?;
        match text_grads.as_mut() {
            None => text_grads = Some(grads),
            Some(acc) => add_grads(acc, &grads)?,
        }
    }
    Ok((loss * inv_b, image_grads.unwrap_or_default(), text_grads.unwrap_or_default()))
}

fn add_grads(acc: &mut [ParamGrads], other: &[ParamGrads]) -> Result<()> {
    for (a, b) in acc.iter_mut().zip(other) {
        match (a, b) {
            (ParamGrads::Residual { d_keys, d_values }, ParamGrads::Residual { d_keys: k, d_values: v }) => {
                d_keys.axpy(1.0, k)?;
                d_values.axpy(1.0, v)?;
            }
            (ParamGrads::Prepend { d_prompts }, ParamGrads::Prepend { d_prompts: p }) => d_prompts.axpy(1.0, p)?,
            (ParamGrads::None, ParamGrads::None) => {}
            _ => return Err(Error::contract("mismatched gradient kinds")),
        }
    }
    Ok(())
}
