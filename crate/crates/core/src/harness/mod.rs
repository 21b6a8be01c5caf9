//! Benchmarks, reports and toy training.

pub mod bench;
pub mod optim;
pub mod report;
pub mod toy;

pub use bench::{
    gi_probe, input_frames, log_log_slope, median, run_head_bench, run_scaling_bench, summarize, BenchModel,
    BenchOptions, BenchRecord, BenchSummary, BENCH_SECONDS, FRAMES_PER_SECOND,
};
pub use optim::{Adam, AdamConfig};
pub use report::{emit_report, read_csv, write_csv, CSV_HEADER};
pub use toy::{combined_loss, train_toy, ToyModel, ToyTask, ToyTaskKind, TrainOptions, TrainReport, CTC_WEIGHT};
