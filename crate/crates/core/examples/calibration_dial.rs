//! Train on the first task only, then fix the residual weight by hand and
//! watch accuracy on the trained task and on the unseen ones.

use adapterlab::backbone::{argmax, BackboneConfig, DualEncoder};
use adapterlab::bench::{gen_stream, train_stream, StreamSpec, Task};
use adapterlab::learner::{logits_with, AdapterMode, TaskParams, TrainConfig};

fn accuracy(task: &Task, params: &TaskParams, w: f64, backbone: &DualEncoder) -> adapterlab::Result<f64> {
    let mut hits = 0;
    for s in &task.test {
        hits += usize::from(argmax(&logits_with(&s.tokens, Some(params), w, &task.classes, backbone, 100.0)?) == s.label);
    }
    Ok(hits as f64 / task.test.len() as f64)
}

fn main() -> adapterlab::Result<()> {
    let tasks = gen_stream(&StreamSpec::default())?;
    let backbone = DualEncoder::new(&BackboneConfig::default())?;
    let (pool, _) = train_stream(&tasks[..1], &backbone, &TrainConfig::default(), AdapterMode::Iki)?;
    let params = &pool.entries()[0].params;

    println!("{:>5} {:>10} {:>10}", "w", "trained", "unseen");
    for w in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let trained = accuracy(&tasks[0], params, w, &backbone)?;
        let mut unseen = 0.0;
        for t in &tasks[1..] {
            unseen += accuracy(t, params, w, &backbone)?;
        }
        println!("{w:>5.2} {trained:>10.4} {:>10.4}", unseen / (tasks.len() - 1) as f64);
    }
    Ok(())
}
