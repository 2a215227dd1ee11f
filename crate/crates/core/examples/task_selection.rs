//! Gaussian task statistics: which task each test sample is routed to and
//! the calibration weight it receives.

use adapterlab::backbone::{BackboneConfig, DualEncoder};
use adapterlab::bench::{gen_stream, train_stream, StreamSpec};
use adapterlab::learner::{infer, AdapterMode, InferConfig, TrainConfig};

fn main() -> adapterlab::Result<()> {
    let tasks = gen_stream(&StreamSpec { num_tasks: 4, ..Default::default() })?;
    let backbone = DualEncoder::new(&BackboneConfig::default())?;
    // Statistics only; zero epochs keeps the adapters at their initial state.
    let cfg = TrainConfig { epochs: 0, ..Default::default() };
    let (pool, _) = train_stream(&tasks[..3], &backbone, &cfg, AdapterMode::Iki)?;
    let ic = InferConfig::default();

    println!("pool holds tasks 0..3; task 3 is unseen");
    println!("{:>5} {:>30} {:>12} {:>12}", "task", "routed to (counts)", "median S", "median w");
    for t in &tasks {
        let mut counts = [0usize; 3];
        let mut scores = Vec::new();
        let mut weights = Vec::new();
        for s in &t.test {
            let p = infer(&s.tokens, &pool, &t.classes, &backbone, &ic)?;
            counts[p.task] += 1;
            scores.push(p.score);
            weights.push(p.weight);
        }
        scores.sort_by(f64::total_cmp);
        weights.sort_by(f64::total_cmp);
        let mid = scores.len() / 2;
        println!("{:>5} {:>30} {:>12.1} {:>12.3e}", t.id, format!("{counts:?}"), scores[mid], weights[mid]);
    }
    Ok(())
}
