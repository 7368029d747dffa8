//! Experiment driver: dataset construction, sequence encoding, training,
//! sampling and evaluation, plus every on-disk format they share.
//!
//! Randomness is always drawn from per-task seeds derived from a master seed
//! and a task index, and parallel results are consumed in index order, so
//! outputs do not depend on the thread count.

mod dataset;
mod encode;
mod eval;
mod sample;
mod train;

use std::io;
use std::path::PathBuf;

use rayon::prelude::*;
use thiserror::Error;

use crate::cvae::{CheckpointError, CvaeError};
use crate::dfscode::DfsCodeError;
use crate::features::{FeatureError, FeatureVector};
use crate::graph::GraphError;

pub use dataset::{
    build_dataset, read_manifest, verify_dataset, write_manifest, Bin, BinSummary, DatasetSpec,
    DatasetSummary, ManifestEntry,
};
pub use encode::{encode_dataset, load_corpus, Corpus, EncodeSummary, Sequence};
pub use eval::{
    evaluate, evaluate_model, read_conditions, ConditionReport, EvalOptions, EvalReport,
    REPORT_HEADER, SUMMARY_HEADER,
};
pub use sample::{sample, SampleOptions, SampleStats};
pub use train::{metrics_csv, train, EpochMetrics, TrainConfig, TrainSummary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error(
        "bin {bin} (target {target}) accepted {accepted} of {draws} draws at u = {u}; \
         nearest features seen: {nearest}. Widen the tolerance."
    )]
    BinUnfillable {
        bin: usize,
        target: FeatureVector,
        u: f64,
        draws: usize,
        accepted: usize,
        nearest: FeatureVector,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{0}: no encoded sequences; run `encode` first")]
    MissingCorpus(PathBuf),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Code(#[from] DfsCodeError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] CvaeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("thread pool: {0}")]
    Threads(String),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> PipelineError {
    let path = path.into();
    move |source| PipelineError::Io { path, source }
}

/// SplitMix64 finalizer over `master` and `index`. Distinct indices give
/// statistically independent seeds for ChaCha streams.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Worker count from `CVAEGG_THREADS`; 1 when unset or unparsable.
pub fn thread_count() -> usize {
    std::env::var("CVAEGG_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over `0..n` on the configured number of threads and returns the
/// results in index order.
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Result<Vec<T>, PipelineError>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let threads = thread_count();
    if threads == 1 {
        return Ok((0..n).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::Threads(e.to_string()))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}
