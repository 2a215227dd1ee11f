//! Continual-learning harness: synthetic streams, the accuracy grid and its
//! metrics, reports, and self-checks.

pub mod config;
pub mod continual;
pub mod metrics;
pub mod report;
pub mod stream;
pub mod verify;

pub use config::RunConfig;
pub use continual::{
    evaluate_grid, evaluate_task, run_continual, task_assignment_accuracy, train_stream, zero_shot_accuracy, ContinualRun,
};
pub use metrics::{metric_avg, metric_last, metric_transfer, AccuracyMatrix, MetricSummary};
pub use report::{read_grid, write_csv, Metrics};
pub use stream::{gen_stream, read_stream, write_stream, StreamSpec, Task};
pub use verify::{run_suite, Suite, VerifyReport};
