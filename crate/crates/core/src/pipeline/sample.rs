//! Conditional sampling from a checkpoint.

use std::fs;
use std::path::Path;

use super::{derive_seed, io_err, par_map, PipelineError};
use crate::cvae::{load_checkpoint, CvaeModel, GenerateOptions, Generated, Rejection};
use crate::dfscode::decode;
use crate::features::FeatureVector;
use crate::graph::Graph;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub n: usize,
    pub seed: u64,
    pub greedy: bool,
    pub temperature: f64,
    /// Decoder step budget; defaults to the one stored with the model.
    pub max_len: Option<usize>,
}

impl SampleOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            greedy: false,
            temperature: 1.0,
            max_len: None,
        }
    }
}

/// Attempt accounting: `attempts = accepted + invalid_code + max_len`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub attempts: usize,
    pub accepted: usize,
    pub invalid_code: usize,
    pub max_len: usize,
}

impl SampleStats {
    pub const CSV_HEADER: &'static str = "attempts,accepted,invalid_code,max_len";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.attempts, self.accepted, self.invalid_code, self.max_len
        )
    }

    pub(super) fn record(&mut self, outcome: &Result<Graph, Rejection>) {
        self.attempts += 1;
        match outcome {
            Ok(_) => self.accepted += 1,
            Err(Rejection::InvalidCode(_)) => self.invalid_code += 1,
            Err(Rejection::MaxLenExceeded) => self.max_len += 1,
        }
    }
}

/// The model's stored step budget, or the largest possible code plus EOS
/// for models that never saw a corpus.
pub(super) fn default_max_len(model: &CvaeModel) -> usize {
    let n = model.vocab().max_nodes();
    model
        .hyperparams()
        .max_seq_len
        .unwrap_or(n * (n - 1) / 2 + 1)
}

/// Runs `n` independent generation attempts; attempt `i` draws from its own
/// stream `derive_seed(seed, i)`. Accepted codes are decoded and labeled by
/// reciprocal degree.
pub(super) fn generate_many(
    model: &CvaeModel,
    condition: &FeatureVector,
    n: usize,
    seed: u64,
    opts: &GenerateOptions,
) -> Result<Vec<Result<Graph, Rejection>>, PipelineError> {
    use rand::SeedableRng;
    let outcomes = par_map(n, |i| -> Result<_, PipelineError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        match model.generate(condition.values(), &mut rng, opts)? {
            Generated::Accepted(code) => Ok(Ok(decode(&code)?.relabel_reciprocal_degree()?)),
            Generated::Rejected(r) => Ok(Err(r)),
        }
    })?;
    outcomes.into_iter().collect()
}

pub(super) fn generate_options(
    model: &CvaeModel,
    greedy: bool,
    temperature: f64,
    max_len: Option<usize>,
) -> GenerateOptions {
    GenerateOptions {
        max_len: max_len.unwrap_or_else(|| default_max_len(model)),
        greedy,
        temperature,
    }
}

/// Samples `opts.n` graphs under `condition` and writes accepted ones to
/// `out/graph_{attempt}.txt` with the counts in `out/stats.csv`.
pub fn sample(
    checkpoint: &Path,
    condition: &FeatureVector,
    opts: &SampleOptions,
    out: &Path,
) -> Result<SampleStats, PipelineError> {
    let model = load_checkpoint(checkpoint)?.model;
    let gen = generate_options(&model, opts.greedy, opts.temperature, opts.max_len);
    let outcomes = generate_many(&model, condition, opts.n, opts.seed, &gen)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut stats = SampleStats::default();
    for (i, o) in outcomes.iter().enumerate() {
        stats.record(o);
        if let Ok(g) = o {
            let path = out.join(format!("graph_{i:04}.txt"));
            fs::write(&path, g.to_text()).map_err(io_err(&path))?;
        }
    }
    let path = out.join("stats.csv");
    fs::write(
        &path,
        format!("{}\n{}\n", SampleStats::CSV_HEADER, stats.csv_row()),
    )
    .map_err(io_err(&path))?;
    Ok(stats)
}
