//! Training, evaluation and benchmarking on top of the detector.

mod bench;
mod eval;
mod train;

pub use bench::{bench, BenchReport, MIN_ITERATIONS, WARMUP};
pub use eval::{evaluate, predict, render_report, score};
pub use train::{augment, dataset_loss, init_detector, train, EpochLog, TrainOutcome, CALIBRATION_SAMPLES};

use crate::config::RunConfig;
use crate::data::{generate_range, worker_threads, SamplePair};
use crate::error::Result;

/// Disjoint train and validation sets of one seed: sample indices
/// `0..n_train` and `n_train..n_train + n_val`.
pub fn dataset_split(cfg: &RunConfig) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
    let spec = cfg.synth_spec();
    let train = generate_range(0..cfg.n_train, cfg.seed, &spec, worker_threads())?;
    let val = if cfg.n_val == 0 {
        Vec::new()
    } else {
        generate_range(cfg.n_train..cfg.n_train + cfg.n_val, cfg.seed, &spec, worker_threads())?
    };
    Ok((train, val))
}
