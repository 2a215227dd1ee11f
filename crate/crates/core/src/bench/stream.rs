//! Synthetic domain-and-class incremental task streams.
//!
//! The vocabulary is partitioned into a three-token template prefix, a
//! shared background pool, and per task a block of class tokens followed by
//! a block of domain tokens. A sample of class `c` from task `i` is a token
//! sequence in which each position independently holds the class token, a
//! confusing class token of the same task, a domain token of task `i`, or a
//! background token. Domain tokens give each task its own frozen-feature
//! cluster; class tokens shared with the text template give the frozen
//! encoder a partial zero-shot signal.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ClassTemplate, TokenSeq};
use crate::error::{Error, Result};
use crate::learner::Sample;
use crate::numkernel::Rng;

pub const TEMPLATE_PREFIX: [usize; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub background_tokens: usize,
    pub domain_tokens_per_task: usize,
    /// Probability that a non-class position draws from the task's domain
    /// pool instead of the shared background.
    pub domain_shift: f64,
    /// Probability that a position holds the sample's class token.
    pub class_prob: f64,
    /// Probability that a position holds another class token of the task.
    pub confuser_prob: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            num_tasks: 5,
            classes_per_task: 4,
            samples_per_class: 200,
            seq_len: 8,
            vocab: 256,
            background_tokens: 32,
            domain_tokens_per_task: 16,
            domain_shift: 0.8,
            class_prob: 0.45,
            confuser_prob: 0.1,
            seed: 0,
        }
    }
}

impl StreamSpec {
    /// Tokens consumed by the layout.
    pub fn tokens_needed(&self) -> usize {
        TEMPLATE_PREFIX.len() + self.background_tokens + self.num_tasks * (self.classes_per_task + self.domain_tokens_per_task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.classes_per_task == 0 || self.samples_per_class == 0 || self.seq_len == 0 {
            return Err(Error::Config("tasks, classes, samples and seq_len must be positive".into()));
        }
        if self.domain_tokens_per_task == 0 && self.domain_shift > 0.0 {
            return Err(Error::Config("domain_shift > 0 needs domain tokens".into()));
        }
        if self.background_tokens == 0 && self.domain_shift < 1.0 {
            return Err(Error::Config("domain_shift < 1 needs background tokens".into()));
        }
        for (name, p) in
            [("domain_shift", self.domain_shift), ("class_prob", self.class_prob), ("confuser_prob", self.confuser_prob)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.class_prob + self.confuser_prob > 1.0 {
            return Err(Error::Config("class_prob + confuser_prob exceeds 1".into()));
        }
        if self.tokens_needed() > self.vocab {
            return Err(Error::Config(format!(
                "layout needs {} tokens but the vocabulary has {}",
                self.tokens_needed(),
                self.vocab
            )));
        }
        Ok(())
    }

    fn task_base(&self, task: usize) -> usize {
        TEMPLATE_PREFIX.len() + self.background_tokens + task * (self.classes_per_task + self.domain_tokens_per_task)
    }

    pub fn class_tokens(&self, task: usize) -> std::ops::Range<usize> {
        let base = self.task_base(task);
        base..base + self.classes_per_task
    }

    pub fn domain_tokens(&self, task: usize) -> std::ops::Range<usize> {
        let base = self.task_base(task) + self.classes_per_task;
        base..base + self.domain_tokens_per_task
    }

    pub fn background(&self) -> std::ops::Range<usize> {
        TEMPLATE_PREFIX.len()..TEMPLATE_PREFIX.len() + self.background_tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<ClassTemplate>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generates the whole stream from `spec.seed`. Each class contributes
/// `samples_per_class` sequences, split 80/20 into train and test.
pub fn gen_stream(spec: &StreamSpec) -> Result<Vec<Task>> {
    spec.validate()?;
    let mut root = Rng::seed(spec.seed);
    (0..spec.num_tasks).map(|i| gen_task(spec, i, &mut root.fork())).collect()
}

fn gen_task(spec: &StreamSpec, id: usize, rng: &mut Rng) -> Result<Task> {
    let class_tokens: Vec<usize> = spec.class_tokens(id).collect();
    let domain: Vec<usize> = spec.domain_tokens(id).collect();
    let background: Vec<usize> = spec.background().collect();
    let classes = class_tokens.iter().map(|&c| ClassTemplate { prefix: TEMPLATE_PREFIX, class_token: c }).collect();
    let n_train = (spec.samples_per_class * 4).div_ceil(5);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, &token) in class_tokens.iter().enumerate() {
        let mut samples: Vec<Sample> = (0..spec.samples_per_class)
            .map(|_| {
                let ids = sample_tokens(spec, token, &class_tokens, &domain, &background, rng);
                Ok(Sample { tokens: TokenSeq::new(ids)?, label })
            })
            .collect::<Result<_>>()?;
        let rest = samples.split_off(n_train.min(samples.len()));
        train.extend(samples);
        test.extend(rest);
    }
    rng.shuffle(&mut train);
    Ok(Task { id, classes, train, test })
}

fn sample_tokens(
    spec: &StreamSpec,
    class_token: usize,
    class_tokens: &[usize],
    domain: &[usize],
    background: &[usize],
    rng: &mut Rng,
) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..spec.seq_len)
        .map(|_| {
            let u = rng.uniform(0.0, 1.0);
            if u < spec.class_prob {
                class_token
            } else if u < spec.class_prob + spec.confuser_prob && class_tokens.len() > 1 {
                let mut other = class_tokens[rng.below(class_tokens.len() - 1)];
                if other == class_token {
                    other = *class_tokens.last().expect("non-empty");
                }
                other
            } else if rng.bernoulli(spec.domain_shift) {
                domain[rng.below(domain.len())]
            } else {
                background[rng.below(background.len())]
            }
        })
        .collect();
    if !ids.contains(&class_token) {
        let pos = rng.below(ids.len());
        ids[pos] = class_token;
    }
    ids
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: StreamSpec,
    tasks: usize,
}

fn task_file(i: usize) -> String {
    format!("task_{i:03}.json")
}

/// Writes `stream.json` plus one `task_NNN.json` per task.
pub fn write_stream(dir: impl AsRef<Path>, spec: &StreamSpec, tasks: &[Task]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest { spec: spec.clone(), tasks: tasks.len() };
    std::fs::write(dir.join("stream.json"), to_json(&manifest)?)?;
    for t in tasks {
        std::fs::write(dir.join(task_file(t.id)), to_json(t)?)?;
    }
    Ok(())
}

pub fn read_stream(dir: impl AsRef<Path>) -> Result<(StreamSpec, Vec<Task>)> {
    let dir = dir.as_ref();
    let manifest: Manifest = from_json(&std::fs::read_to_string(dir.join("stream.json"))?)?;
    let tasks = (0..manifest.tasks)
        .map(|i| from_json(&std::fs::read_to_string(dir.join(task_file(i)))?))
        .collect::<Result<Vec<Task>>>()?;
    Ok((manifest.spec, tasks))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn from_json<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_task() {
        let spec = StreamSpec { num_tasks: 1, samples_per_class: 10, ..Default::default() };
        let tasks = gen_stream(&spec).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].train.len(), 32);
        assert_eq!(tasks[0].test.len(), 8);
    }

    #[test]
    fn deterministic() {
        let spec = StreamSpec { samples_per_class: 20, ..Default::default() };
        let a = serde_json::to_string(&gen_stream(&spec).unwrap()).unwrap();
        let b = serde_json::to_string(&gen_stream(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_tokens_disjoint_and_present() {
        let spec = StreamSpec { samples_per_class: 20, ..Default::default() };
        let tasks = gen_stream(&spec).unwrap();
        let mut seen = std::collections::HashSet::new();
        for t in &tasks {
            for c in &t.classes {
                assert!(seen.insert(c.class_token));
            }
            for s in t.train.iter().chain(&t.test) {
                assert!(s.tokens.ids().contains(&t.classes[s.label].class_token));
                assert!(s.tokens.ids().iter().all(|&id| id < spec.vocab));
            }
        }
    }

    #[test]
    fn infeasible_vocab() {
        let spec = StreamSpec { vocab: 50, ..Default::default() };
        assert!(matches!(gen_stream(&spec), Err(Error::Config(_))));
    }
}
