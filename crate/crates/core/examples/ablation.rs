//! Transfer and Last for calibrated and uncalibrated zero-init adapters,
//! adapters with random values, and prepended prompts.

use adapterlab::backbone::{BackboneConfig, DualEncoder};
use adapterlab::bench::{evaluate_grid, gen_stream, run_continual, train_stream, Metrics, StreamSpec};
use adapterlab::learner::{AdapterMode, InferConfig, TrainConfig};

fn main() -> adapterlab::Result<()> {
    let tasks = gen_stream(&StreamSpec::default())?;
    let backbone = DualEncoder::new(&BackboneConfig::default())?;
    let train = TrainConfig::default();
    let on = InferConfig::default();
    let off = InferConfig { calibrate: false, ..on.clone() };

    let (pool, _) = train_stream(&tasks, &backbone, &train, AdapterMode::Iki)?;
    let mut rows = vec![
        ("zero-init, calibrated".to_string(), evaluate_grid(&tasks, &pool, &backbone, &on)?),
        ("zero-init, w = 1".to_string(), evaluate_grid(&tasks, &pool, &backbone, &off)?),
    ];
    for bound in [0.01, 0.1, 1.0] {
        let run = run_continual(&tasks, &backbone, &train, &off, AdapterMode::IkiAblation(bound))?;
        rows.push((format!("random V_r ({bound})"), run.matrix));
    }
    rows.push(("prepended prompts".to_string(), run_continual(&tasks, &backbone, &train, &off, AdapterMode::Prepend)?.matrix));

    println!("{:<24} {:>9} {:>9}", "", "transfer", "last");
    for (name, grid) in rows {
        let m = Metrics::of(&grid)?;
        println!("{name:<24} {:>9.4} {:>9.4}", m.transfer.map_or(f64::NAN, |t| t.aggregate), m.last.aggregate);
    }
    Ok(())
}
