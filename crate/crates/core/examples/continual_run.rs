//! The default five-task stream end to end: accuracy grid and summaries.

use adapterlab::backbone::{BackboneConfig, DualEncoder};
use adapterlab::bench::{gen_stream, run_continual, task_assignment_accuracy, zero_shot_accuracy, Metrics, StreamSpec};
use adapterlab::learner::{AdapterMode, InferConfig, TrainConfig};

fn main() -> adapterlab::Result<()> {
    let tasks = gen_stream(&StreamSpec::default())?;
    let backbone = DualEncoder::new(&BackboneConfig::default())?;
    let ic = InferConfig::default();
    let run = run_continual(&tasks, &backbone, &TrainConfig::default(), &ic, AdapterMode::Iki)?;

    println!("rows: after training task i; columns: evaluated task j");
    for i in 0..run.matrix.n() {
        let row: Vec<String> = run.matrix.row(i).iter().map(|v| format!("{v:.3}")).collect();
        println!("  {i}: {}", row.join("  "));
    }
    let zs: Vec<String> = tasks
        .iter()
        .map(|t| zero_shot_accuracy(t, &backbone, ic.logit_scale).map(|v| format!("{v:.3}")))
        .collect::<Result<_, _>>()?;
    println!("  zero-shot: {}", zs.join("  "));

    let m = Metrics::of(&run.matrix)?;
    println!(
        "transfer {:.4}  avg {:.4}  last {:.4}",
        m.transfer.map_or(f64::NAN, |t| t.aggregate),
        m.avg.aggregate,
        m.last.aggregate
    );
    println!("task assignment {:.4}", task_assignment_accuracy(&tasks, &run.pool, &backbone, &ic)?);
    for (t, r) in tasks.iter().zip(&run.reports) {
        println!("task {} loss {:.3} -> {:.3}", t.id, r.epoch_losses[0], r.epoch_losses.last().copied().unwrap_or(f64::NAN));
    }
    Ok(())
}
