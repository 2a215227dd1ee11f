//! Write a stream and a trained pool to disk, read them back, and evaluate.

use adapterlab::backbone::{BackboneConfig, DualEncoder};
use adapterlab::bench::{evaluate_grid, gen_stream, read_stream, train_stream, write_csv, write_stream, Metrics, StreamSpec};
use adapterlab::learner::{read_pool, write_pool, AdapterMode, InferConfig, TrainConfig};

fn main() -> adapterlab::Result<()> {
    let dir = std::env::temp_dir().join("adapterlab-save-and-reload");
    let spec = StreamSpec { num_tasks: 3, samples_per_class: 50, ..Default::default() };
    write_stream(dir.join("tasks"), &spec, &gen_stream(&spec)?)?;

    let (_, tasks) = read_stream(dir.join("tasks"))?;
    let backbone = DualEncoder::new(&BackboneConfig::default())?;
    let (pool, _) = train_stream(&tasks, &backbone, &TrainConfig::default(), AdapterMode::Iki)?;
    write_pool(&pool, dir.join("pool.txt"))?;

    let reloaded = read_pool(dir.join("pool.txt"))?;
    assert_eq!(reloaded, pool);
    let grid = evaluate_grid(&tasks, &reloaded, &backbone, &InferConfig::default())?;
    write_csv(&grid, &Metrics::of(&grid)?, dir.join("results"))?;
    println!("wrote {}", dir.display());
    print!("{}", std::fs::read_to_string(dir.join("results/summary.csv"))?);
    Ok(())
}
