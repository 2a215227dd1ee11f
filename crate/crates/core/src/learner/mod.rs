//! Continual training over a growing task pool and calibrated inference.
//!
//! Each task gets its own adapters (or prompts, for the prepend baseline),
//! trained with plain SGD under a cosine learning-rate schedule while the
//! backbone stays frozen. Before training, the frozen image features of the
//! task are summarized by a Gaussian and a mean key. At inference the most
//! likely task is selected from those statistics and its adapters are applied
//! with a weight derived from the selection score.

mod pool_io;
mod train;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{init_adapter, init_adapter_ablation, init_prompt, Adapter, ParamGrads, PromptBaseline};
use crate::backbone::{argmax, class_embeddings, encode_with, ClassTemplate, DualEncoder, StackInsert, TokenSeq};
use crate::error::{Error, Result};
use crate::numkernel::{normalized, Mat, Rng};
use crate::taskdist::{calibration_weight, fit_gaussian, key_match, log_density, TaskGaussian, DEFAULT_RIDGE};

pub use pool_io::{read_pool, write_pool, POOL_MAGIC};
pub use train::{train_task, TrainReport};

/// One labelled input sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: TokenSeq,
    pub label: usize,
}

/// How per-task parameters are attached and initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdapterMode {
    /// Residual keys/values, `V_r = 0` at init.
    Iki,
    /// Residual keys/values with both matrices uniform on `[−bound, bound]`.
    IkiAblation(f64),
    /// Prompt tokens prepended to the layer input.
    Prepend,
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterMode::Iki => write!(f, "iki"),
            AdapterMode::IkiAblation(b) => write!(f, "iki-ablation:{b}"),
            AdapterMode::Prepend => write!(f, "prepend"),
        }
    }
}

impl FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iki" => Ok(AdapterMode::Iki),
            "prepend" => Ok(AdapterMode::Prepend),
            _ => {
                let bound = s
                    .strip_prefix("iki-ablation:")
                    .and_then(|b| b.parse::<f64>().ok())
                    .filter(|b| b.is_finite() && *b >= 0.0)
                    .ok_or_else(|| Error::Config(format!("unknown adapter mode `{s}`")))?;
                Ok(AdapterMode::IkiAblation(bound))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch: usize,
    pub logit_scale: f64,
    /// Residual keys/values (or prompt tokens) per adapted layer.
    pub prompt_len: usize,
    /// Number of leading layers adapted in each encoder.
    pub adapter_depth: usize,
    pub k_bound: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            epochs: 10,
            batch: 32,
            logit_scale: 100.0,
            prompt_len: 4,
            adapter_depth: 2,
            k_bound: crate::attention::DEFAULT_KEY_BOUND,
            ridge: DEFAULT_RIDGE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, backbone_depth: usize) -> Result<()> {
        let positive = [("lr0", self.lr0), ("logit_scale", self.logit_scale), ("ridge", self.ridge)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if !(self.k_bound >= 0.0) {
            return Err(Error::Config(format!("k_bound must be non-negative, got {}", self.k_bound)));
        }
        if self.batch == 0 || self.prompt_len == 0 || self.adapter_depth == 0 {
            return Err(Error::Config("batch, prompt_len and adapter_depth must be positive".into()));
        }
        if self.adapter_depth > backbone_depth {
            return Err(Error::Config(format!("adapter_depth {} exceeds backbone depth {backbone_depth}", self.adapter_depth)));
        }
        Ok(())
    }
}

/// Residual adapters for the leading layers of both encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub image: Vec<Adapter>,
    pub text: Vec<Adapter>,
}

/// Prepended prompts for the leading layers of both encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub image: Vec<PromptBaseline>,
    pub text: Vec<PromptBaseline>,
}

/// Learned parameters of one task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskParams {
    Residual(AdapterSet),
    Prepend(PromptSet),
}

impl TaskParams {
    pub fn init(mode: AdapterMode, cfg: &TrainConfig, dim: usize, rng: &mut Rng) -> Self {
        let (l, depth) = (cfg.prompt_len, cfg.adapter_depth);
        match mode {
            AdapterMode::Iki => {
                let mut make = || (0..depth).map(|_| init_adapter(l, dim, cfg.k_bound, rng)).collect();
                let image = make();
                let text = make();
                TaskParams::Residual(AdapterSet { image, text })
            }
            AdapterMode::IkiAblation(bound) => {
                let mut make = || (0..depth).map(|_| init_adapter_ablation(l, dim, bound, rng)).collect();
                let image = make();
                let text = make();
                TaskParams::Residual(AdapterSet { image, text })
            }
            AdapterMode::Prepend => {
                let mut make = || (0..depth).map(|_| init_prompt(l, dim, cfg.k_bound, rng)).collect();
                let image = make();
                let text = make();
                TaskParams::Prepend(PromptSet { image, text })
            }
        }
    }

    pub fn is_residual(&self) -> bool {
        matches!(self, TaskParams::Residual(_))
    }

    /// Attachment for the image encoder at residual weight `w` (ignored for
    /// prompts).
    pub fn image_insert(&self, w: f64) -> StackInsert<'_> {
        match self {
            TaskParams::Residual(a) => StackInsert::Residual { adapters: &a.image, weight: w },
            TaskParams::Prepend(p) => StackInsert::Prepend(&p.image),
        }
    }

    pub fn text_insert(&self, w: f64) -> StackInsert<'_> {
        match self {
            TaskParams::Residual(a) => StackInsert::Residual { adapters: &a.text, weight: w },
            TaskParams::Prepend(p) => StackInsert::Prepend(&p.text),
        }
    }

    pub(crate) fn sgd_step(&mut self, lr: f64, image: &[ParamGrads], text: &[ParamGrads]) -> Result<()> {
        match self {
            TaskParams::Residual(a) => {
                for (adapter, g) in a.image.iter_mut().chain(a.text.iter_mut()).zip(image.iter().chain(text)) {
                    let ParamGrads::Residual { d_keys, d_values } = g else {
                        return Err(Error::contract("residual adapter got non-residual gradient"));
                    };
                    adapter.sgd_step(lr, d_keys, d_values)?;
                }
            }
            TaskParams::Prepend(p) => {
                for (prompt, g) in p.image.iter_mut().chain(p.text.iter_mut()).zip(image.iter().chain(text)) {
                    let ParamGrads::Prepend { d_prompts } = g else {
                        return Err(Error::contract("prompt got non-prompt gradient"));
                    };
                    prompt.sgd_step(lr, d_prompts)?;
                }
            }
        }
        Ok(())
    }
}

/// Everything kept for one learned task.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub params: TaskParams,
    pub gaussian: TaskGaussian,
    pub mean_key: Vec<f64>,
    pub classes: Vec<ClassTemplate>,
}

/// Learned tasks in training order. Entries are only ever appended.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskPool {
    entries: Vec<PoolEntry>,
}

impl TaskPool {
    pub fn new() -> Self {
        TaskPool::default()
    }

    pub fn push(&mut self, entry: PoolEntry) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.params.is_residual() != entry.params.is_residual() {
                return Err(Error::contract("cannot mix residual and prepend entries in one pool"));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The pool as it was after its first `n` tasks.
    pub fn prefix(&self, n: usize) -> TaskPool {
        TaskPool { entries: self.entries[..n.min(self.entries.len())].to_vec() }
    }
}

/// Where inference takes its candidate classes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSource {
    /// The caller's candidate list.
    #[default]
    Harness,
    /// The selected task's own classes.
    SelectedTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub calibrate: bool,
    /// Affine map `a·S + b` applied to the selection score before the sigmoid.
    pub prescale_a: f64,
    pub prescale_b: f64,
    pub logit_scale: f64,
    pub candidates: CandidateSource,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            calibrate: true,
            prescale_a: 1.0,
            prescale_b: 0.0,
            logit_scale: 100.0,
            candidates: CandidateSource::Harness,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub task: usize,
    pub weight: f64,
    pub score: f64,
    pub logits: Vec<f64>,
}

/// Frozen-feature statistics of a task: its Gaussian and normalized mean.
pub fn estimate_task_stats(dataset: &[Sample], backbone: &DualEncoder, ridge: f64) -> Result<(TaskGaussian, Vec<f64>)> {
    let features = frozen_features(dataset, backbone)?;
    let gaussian = fit_gaussian(&features, ridge)?;
    let mean_key = normalized(gaussian.mean());
    Ok((gaussian, mean_key))
}

/// Frozen image features of `dataset`, one row per sample.
pub fn frozen_features(dataset: &[Sample], backbone: &DualEncoder) -> Result<Mat> {
    if dataset.is_empty() {
        return Err(Error::contract("dataset must be non-empty"));
    }
    let rows = dataset.iter().map(|s| encode_with(&s.tokens, &backbone.image, &StackInsert::None)).collect::<Result<Vec<_>>>()?;
    Mat::from_rows(&rows)
}

/// `lr0 · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::contract(format!("step {step} outside 0..={total_steps}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// Statistics first (frozen encoder), then adapters; appends the task.
pub fn learn_task(
    pool: &mut TaskPool,
    dataset: &[Sample],
    classes: &[ClassTemplate],
    backbone: &DualEncoder,
    cfg: &TrainConfig,
    mode: AdapterMode,
    rng: &mut Rng,
) -> Result<TrainReport> {
    let (gaussian, mean_key) = estimate_task_stats(dataset, backbone, cfg.ridge)?;
    let (params, report) = train_task(dataset, classes, backbone, cfg, mode, rng)?;
    pool.push(PoolEntry { params, gaussian, mean_key, classes: classes.to_vec() })?;
    Ok(report)
}

/// Logits of `x` against `candidates` with `params` attached at weight `w`.
pub fn logits_with(
    x: &TokenSeq,
    params: Option<&TaskParams>,
    w: f64,
    candidates: &[ClassTemplate],
    backbone: &DualEncoder,
    logit_scale: f64,
) -> Result<Vec<f64>> {
    let (img, txt) = match params {
        Some(p) => (p.image_insert(w), p.text_insert(w)),
        None => (StackInsert::None, StackInsert::None),
    };
    let feature = encode_with(x, &backbone.image, &img)?;
    let text = class_embeddings(candidates, &backbone.text, &txt)?;
    crate::backbone::logits(&feature, &text, logit_scale)
}

/// Calibrated inference: pick a task from the pool, weight its adapters by
/// the sigmoid of the selection score, classify by cosine logits.
pub fn infer(
    x: &TokenSeq,
    pool: &TaskPool,
    candidates: &[ClassTemplate],
    backbone: &DualEncoder,
    cfg: &InferConfig,
) -> Result<Prediction> {
    if pool.is_empty() {
        return Err(Error::contract("inference needs a non-empty pool"));
    }
    let feature = encode_with(x, &backbone.image, &StackInsert::None)?;
    let residual = pool.entries[0].params.is_residual();
    let (task, score) = if residual {
        let scores = pool.entries.iter().map(|e| log_density(&e.gaussian, &feature)).collect::<Result<Vec<_>>>()?;
        let best = argmax(&scores);
        (best, scores[best])
    } else {
        let keys = Mat::from_rows(&pool.entries.iter().map(|e| e.mean_key.clone()).collect::<Vec<_>>())?;
        let best = key_match(&keys, &feature)?;
        (best, crate::numkernel::dot(keys.row(best), &feature))
    };
    let weight = if residual && cfg.calibrate { calibration_weight(score, cfg.prescale_a, cfg.prescale_b) } else { 1.0 };
    let entry = &pool.entries[task];
    let candidates = match cfg.candidates {
        CandidateSource::Harness => candidates,
        CandidateSource::SelectedTask => &entry.classes,
    };
    if candidates.is_empty() {
        return Err(Error::contract("candidate class list must be non-empty"));
    }
    let logits = logits_with(x, Some(&entry.params), weight, candidates, backbone, cfg.logit_scale)?;
    Ok(Prediction { class: argmax(&logits), task, weight, score, logits })
}

/// Frozen-only prediction.
pub fn zero_shot_infer(x: &TokenSeq, candidates: &[ClassTemplate], backbone: &DualEncoder, logit_scale: f64) -> Result<usize> {
    Ok(argmax(&logits_with(x, None, 0.0, candidates, backbone, logit_scale)?))
}

#[cfg(test)]
mod tests;
