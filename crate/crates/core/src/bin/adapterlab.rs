use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use adapterlab::backbone::DualEncoder;
use adapterlab::bench::{
    evaluate_grid, gen_stream, read_stream, run_continual, run_suite, task_assignment_accuracy, train_stream, write_csv,
    write_stream, zero_shot_accuracy, Metrics, RunConfig, StreamSpec, Suite, Task,
};
use adapterlab::learner::{read_pool, write_pool, AdapterMode, InferConfig, TaskPool};
use adapterlab::Error;

#[derive(Parser)]
#[command(name = "adapterlab", version, about = "Zero-initialized residual attention adapters on a toy dual encoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic task stream.
    GenTasks {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        tasks: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every task of a stream in order and save the pool.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the accuracy grid from a trained pool.
    Eval {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        calibrate: Switch,
        #[arg(long, default_value = "iki")]
        mode: String,
        /// Backbone and inference settings; must match the one used to train.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, train and evaluate in one go.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run self-checks.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

enum Failure {
    Verify,
    Input(Error),
    Runtime(Error),
}

fn input(e: Error) -> Failure {
    Failure::Input(e)
}

fn runtime(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::Format(_) | Error::Io(_) => Failure::Input(e),
        other => Failure::Runtime(other),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load).map_err(input)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(1),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenTasks { seed, tasks, classes, samples, out } => {
            let spec = StreamSpec {
                seed,
                num_tasks: tasks,
                classes_per_task: classes,
                samples_per_class: samples,
                ..Default::default()
            };
            let stream = gen_stream(&spec).map_err(input)?;
            write_stream(&out, &spec, &stream).map_err(runtime)?;
            println!("wrote {} tasks to {}", stream.len(), out.display());
        }
        Cmd::Train { config, tasks, out } => {
            let cfg = load_config(config.as_deref())?;
            let (_, stream) = read_stream(&tasks).map_err(input)?;
            let mode = cfg.adapter_mode().map_err(input)?;
            let backbone = DualEncoder::new(&cfg.backbone()).map_err(input)?;
            let (pool, reports) = train_stream(&stream, &backbone, &cfg.train(), mode).map_err(runtime)?;
            for (task, report) in stream.iter().zip(&reports) {
                let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
                println!("task {}: {} steps, final epoch loss {last:.4}", task.id, report.steps);
            }
            write_pool(&pool, &out).map_err(runtime)?;
            println!("wrote pool of {} tasks to {}", pool.len(), out.display());
        }
        Cmd::Eval { pool, tasks, calibrate, mode, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let mode: AdapterMode = mode.parse().map_err(input)?;
            let pool = read_pool(&pool).map_err(input)?;
            let (_, stream) = read_stream(&tasks).map_err(input)?;
            let residual = pool.entries().first().map(|e| e.params.is_residual());
            if residual.is_some_and(|r| r != (mode != AdapterMode::Prepend)) {
                return Err(input(Error::Config(format!("pool kind does not match mode `{mode}`"))));
            }
            let backbone = DualEncoder::new(&cfg.backbone()).map_err(input)?;
            let infer = InferConfig { calibrate: matches!(calibrate, Switch::On), ..cfg.infer() };
            let grid = evaluate_grid(&stream, &pool, &backbone, &infer).map_err(runtime)?;
            let metrics = Metrics::of(&grid).map_err(runtime)?;
            write_csv(&grid, &metrics, &out).map_err(runtime)?;
            print_metrics(&metrics);
        }
        Cmd::Run { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let mode = cfg.adapter_mode().map_err(input)?;
            let stream = gen_stream(&cfg.stream()).map_err(input)?;
            let backbone = DualEncoder::new(&cfg.backbone()).map_err(input)?;
            let infer = cfg.infer();
            let run = run_continual(&stream, &backbone, &cfg.train(), &infer, mode).map_err(runtime)?;
            let metrics = Metrics::of(&run.matrix).map_err(runtime)?;
            write_csv(&run.matrix, &metrics, &out).map_err(runtime)?;
            print_metrics(&metrics);
            print_diagnostics(&stream, &run.pool, &backbone, &infer, mode)?;
        }
        Cmd::Verify { suite, seed } => {
            let suite: Suite = suite.parse().map_err(input)?;
            let reports = run_suite(suite, seed).map_err(runtime)?;
            for r in &reports {
                print!("{r}");
            }
            if !reports.iter().all(|r| r.passed()) {
                return Err(Failure::Verify);
            }
        }
    }
    Ok(())
}

fn print_metrics(m: &Metrics) {
    if let Some(t) = &m.transfer {
        println!("transfer {:.4}", t.aggregate);
    }
    println!("avg      {:.4}", m.avg.aggregate);
    println!("last     {:.4}", m.last.aggregate);
}

fn print_diagnostics(
    stream: &[Task],
    pool: &TaskPool,
    backbone: &DualEncoder,
    infer: &InferConfig,
    mode: AdapterMode,
) -> Result<(), Failure> {
    let zero_shot = stream
        .iter()
        .map(|t| zero_shot_accuracy(t, backbone, infer.logit_scale))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    if zero_shot.len() > 1 {
        let mean = zero_shot[1..].iter().sum::<f64>() / (zero_shot.len() - 1) as f64;
        println!("zero-shot transfer {mean:.4}");
    }
    let assign = task_assignment_accuracy(stream, pool, backbone, infer).map_err(runtime)?;
    println!("task assignment {assign:.4} ({mode})");
    Ok(())
}
