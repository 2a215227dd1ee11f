//! Sequential training over a task stream with evaluation after every step.

use rayon::prelude::*;

use super::metrics::AccuracyMatrix;
use super::stream::Task;
use crate::backbone::DualEncoder;
use crate::error::{Error, Result};
use crate::learner::{infer, learn_task, zero_shot_infer, AdapterMode, InferConfig, TaskPool, TrainConfig, TrainReport};
use crate::numkernel::Rng;

#[derive(Clone, Debug)]
pub struct ContinualRun {
    pub matrix: AccuracyMatrix,
    pub pool: TaskPool,
    pub reports: Vec<TrainReport>,
}

/// Trains the tasks in order; after task `i` every task's test split is
/// scored against the current pool, filling row `i` of the grid.
pub fn run_continual(
    tasks: &[Task],
    backbone: &DualEncoder,
    train: &TrainConfig,
    infer_cfg: &InferConfig,
    mode: AdapterMode,
) -> Result<ContinualRun> {
    if tasks.is_empty() {
        return Err(Error::contract("empty task stream"));
    }
    let mut root = Rng::seed(train.seed);
    let mut pool = TaskPool::new();
    let mut matrix = AccuracyMatrix::zeros(tasks.len());
    let mut reports = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        reports.push(learn_task(&mut pool, &task.train, &task.classes, backbone, train, mode, &mut root.fork())?);
        for (j, eval) in tasks.iter().enumerate() {
            matrix.set(i, j, evaluate_task(eval, &pool, backbone, infer_cfg)?)?;
        }
    }
    Ok(ContinualRun { matrix, pool, reports })
}

/// Trains every task in order without evaluating. Uses the same random
/// streams as [`run_continual`], so the resulting pool is identical.
pub fn train_stream(
    tasks: &[Task],
    backbone: &DualEncoder,
    train: &TrainConfig,
    mode: AdapterMode,
) -> Result<(TaskPool, Vec<TrainReport>)> {
    let mut root = Rng::seed(train.seed);
    let mut pool = TaskPool::new();
    let reports = tasks
        .iter()
        .map(|task| learn_task(&mut pool, &task.train, &task.classes, backbone, train, mode, &mut root.fork()))
        .collect::<Result<Vec<_>>>()?;
    Ok((pool, reports))
}

/// Rebuilds the grid from a finished pool. Pool entries never change after
/// they are appended, so the first `i + 1` entries are the pool as it stood
/// after task `i`.
pub fn evaluate_grid(tasks: &[Task], pool: &TaskPool, backbone: &DualEncoder, infer_cfg: &InferConfig) -> Result<AccuracyMatrix> {
    if pool.len() != tasks.len() {
        return Err(Error::shape(format!("pool has {} tasks, stream has {}", pool.len(), tasks.len())));
    }
    let mut matrix = AccuracyMatrix::zeros(tasks.len());
    for i in 0..tasks.len() {
        let prefix = pool.prefix(i + 1);
        for (j, eval) in tasks.iter().enumerate() {
            matrix.set(i, j, evaluate_task(eval, &prefix, backbone, infer_cfg)?)?;
        }
    }
    Ok(matrix)
}

/// Test accuracy on `task` with its own classes as candidates.
pub fn evaluate_task(task: &Task, pool: &TaskPool, backbone: &DualEncoder, infer_cfg: &InferConfig) -> Result<f64> {
    fraction(&task.test, |s| Ok(infer(&s.tokens, pool, &task.classes, backbone, infer_cfg)?.class == s.label))
}

pub fn zero_shot_accuracy(task: &Task, backbone: &DualEncoder, logit_scale: f64) -> Result<f64> {
    fraction(&task.test, |s| Ok(zero_shot_infer(&s.tokens, &task.classes, backbone, logit_scale)? == s.label))
}

/// Fraction of test samples, pooled over all tasks, whose selected task is
/// the one they came from. Task `i` of the stream must be entry `i`.
pub fn task_assignment_accuracy(tasks: &[Task], pool: &TaskPool, backbone: &DualEncoder, infer_cfg: &InferConfig) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, task) in tasks.iter().enumerate() {
        let acc = fraction(&task.test, |s| Ok(infer(&s.tokens, pool, &task.classes, backbone, infer_cfg)?.task == i))?;
        hits += (acc * task.test.len() as f64).round() as usize;
        total += task.test.len();
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

fn fraction<T: Sync>(items: &[T], hit: impl Fn(&T) -> Result<bool> + Sync) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let hits = items.par_iter().map(|s| hit(s).map(usize::from)).collect::<Result<Vec<_>>>()?.into_iter().sum::<usize>();
    Ok(hits as f64 / items.len() as f64)
}
