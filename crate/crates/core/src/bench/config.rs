//! Flat `key = value` run configuration.
//!
//! ```text
//! num_tasks = 5
//! lr0 = 0.1
//! mode = "iki"
//! calibrate = true
//! ```
//!
//! Every key is optional and unknown keys are rejected. `seed` drives both
//! the stream and training; `backbone_seed` picks the frozen encoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stream::StreamSpec;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::learner::{AdapterMode, CandidateSource, InferConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub background_tokens: usize,
    pub domain_tokens_per_task: usize,
    pub domain_shift: f64,
    pub class_prob: f64,
    pub confuser_prob: f64,
    pub seed: u64,

    pub dim: usize,
    pub depth: usize,
    pub qk_scale: f64,
    pub value_scale: f64,
    pub bias_scale: f64,
    pub backbone_seed: u64,

    pub lr0: f64,
    pub epochs: usize,
    pub batch: usize,
    pub logit_scale: f64,
    pub prompt_len: usize,
    pub adapter_depth: usize,
    pub k_bound: f64,
    pub ridge: f64,

    pub mode: String,
    pub calibrate: bool,
    pub prescale_a: f64,
    pub prescale_b: f64,
    pub candidates: CandidateSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        let (s, b, t, i) = (StreamSpec::default(), BackboneConfig::default(), TrainConfig::default(), InferConfig::default());
        RunConfig {
            num_tasks: s.num_tasks,
            classes_per_task: s.classes_per_task,
            samples_per_class: s.samples_per_class,
            seq_len: s.seq_len,
            vocab: s.vocab,
            background_tokens: s.background_tokens,
            domain_tokens_per_task: s.domain_tokens_per_task,
            domain_shift: s.domain_shift,
            class_prob: s.class_prob,
            confuser_prob: s.confuser_prob,
            seed: s.seed,
            dim: b.dim,
            depth: b.depth,
            qk_scale: b.qk_scale,
            value_scale: b.value_scale,
            bias_scale: b.bias_scale,
            backbone_seed: b.seed,
            lr0: t.lr0,
            epochs: t.epochs,
            batch: t.batch,
            logit_scale: t.logit_scale,
            prompt_len: t.prompt_len,
            adapter_depth: t.adapter_depth,
            k_bound: t.k_bound,
            ridge: t.ridge,
            mode: AdapterMode::Iki.to_string(),
            calibrate: i.calibrate,
            prescale_a: i.prescale_a,
            prescale_b: i.prescale_b,
            candidates: i.candidates,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.adapter_mode()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn stream(&self) -> StreamSpec {
        StreamSpec {
            num_tasks: self.num_tasks,
            classes_per_task: self.classes_per_task,
            samples_per_class: self.samples_per_class,
            seq_len: self.seq_len,
            vocab: self.vocab,
            background_tokens: self.background_tokens,
            domain_tokens_per_task: self.domain_tokens_per_task,
            domain_shift: self.domain_shift,
            class_prob: self.class_prob,
            confuser_prob: self.confuser_prob,
            seed: self.seed,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            dim: self.dim,
            depth: self.depth,
            vocab: self.vocab,
            qk_scale: self.qk_scale,
            value_scale: self.value_scale,
            bias_scale: self.bias_scale,
            seed: self.backbone_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            epochs: self.epochs,
            batch: self.batch,
            logit_scale: self.logit_scale,
            prompt_len: self.prompt_len,
            adapter_depth: self.adapter_depth,
            k_bound: self.k_bound,
            ridge: self.ridge,
            seed: self.seed,
        }
    }

    pub fn infer(&self) -> InferConfig {
        InferConfig {
            calibrate: self.calibrate,
            prescale_a: self.prescale_a,
            prescale_b: self.prescale_b,
            logit_scale: self.logit_scale,
            candidates: self.candidates,
        }
    }

    pub fn adapter_mode(&self) -> Result<AdapterMode> {
        self.mode.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn flat_keys() {
        let cfg = RunConfig::parse("num_tasks = 3\nlr0 = 1\nmode = \"iki-ablation:1.0\"\ncalibrate = false\n# note\n").unwrap();
        assert_eq!(cfg.num_tasks, 3);
        assert_eq!(cfg.lr0, 1.0);
        assert_eq!(cfg.adapter_mode().unwrap(), AdapterMode::IkiAblation(1.0));
        assert!(!cfg.infer().calibrate);
        assert_eq!(cfg.train().seed, cfg.stream().seed);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::parse("learning_rate = 0.1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("mode = \"lora\""), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[stream]\nnum_tasks = 2"), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig { num_tasks: 2, ridge: 1e-5, ..Default::default() };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
