//! Conditioned generation measured against its conditions.
//!
//! The report CSV has one row per accepted graph:
//! `condition_exponent,condition_clustering,measured_exponent,measured_clustering`.
//! The summary CSV has one row per condition with the attempt accounting and
//! the mean and standard deviation of the measured features.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::sample::{generate_many, generate_options};
use super::{derive_seed, io_err, PipelineError};
use crate::cvae::{load_checkpoint, CvaeModel, Rejection};
use crate::features::{clustering_coefficient, scaling_exponent, FeatureError, FeatureVector};

pub const REPORT_HEADER: &str =
    "condition_exponent,condition_clustering,measured_exponent,measured_clustering";
pub const SUMMARY_HEADER: &str = "condition_exponent,condition_clustering,attempts,accepted,\
degenerate,invalid_code,max_len,acceptance_rate,mean_exponent,std_exponent,mean_clustering,std_clustering";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub n: usize,
    pub seed: u64,
    pub greedy: bool,
    pub temperature: f64,
    pub max_len: Option<usize>,
    /// Where to write accepted graphs as `cond{j}_{attempt}.txt`.
    pub graphs_dir: Option<PathBuf>,
}

impl EvalOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            greedy: false,
            temperature: 1.0,
            max_len: None,
            graphs_dir: None,
        }
    }
}

/// Results for one condition. A decoded graph whose degree distribution has
/// fewer than two distinct degrees has no exponent; it is counted as
/// `degenerate` instead of `accepted`, so
/// `attempts = accepted + degenerate + invalid_code + max_len` and
/// `exponents.len() == accepted`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    pub condition: FeatureVector,
    pub attempts: usize,
    pub accepted: usize,
    pub degenerate: usize,
    pub invalid_code: usize,
    pub max_len: usize,
    pub exponents: Vec<f64>,
    pub clusterings: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ConditionReport {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }

    /// Mean and population standard deviation; NaN when nothing was accepted.
    pub fn exponent_stats(&self) -> (f64, f64) {
        mean_std(&self.exponents)
    }

    pub fn clustering_stats(&self) -> (f64, f64) {
        mean_std(&self.clusterings)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub conditions: Vec<ConditionReport>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for c in &self.conditions {
            let v = c.condition.values();
            for (e, k) in c.exponents.iter().zip(&c.clusterings) {
                writeln!(s, "{},{},{e},{k}", v[0], v[1]).unwrap();
            }
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for c in &self.conditions {
            let v = c.condition.values();
            let (me, se) = c.exponent_stats();
            let (mc, sc) = c.clustering_stats();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{me},{se},{mc},{sc}",
                v[0],
                v[1],
                c.attempts,
                c.accepted,
                c.degenerate,
                c.invalid_code,
                c.max_len,
                c.acceptance_rate()
            )
            .unwrap();
        }
        s
    }
}

/// Reads one `exponent,clustering` pair per line. Blank lines, `#` comments
/// and a leading header line are skipped.
pub fn read_conditions(path: &Path) -> Result<Vec<FeatureVector>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.parse::<FeatureVector>() {
            Ok(c) if c.len() == 2 => out.push(c),
            Err(_) if out.is_empty() && line.chars().any(|ch| ch.is_ascii_alphabetic()) => {}
            _ => {
                return Err(PipelineError::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: expected `exponent,clustering`", i + 1),
                })
            }
        }
    }
    Ok(out)
}

/// Evaluates an in-memory model; see [`evaluate`].
pub fn evaluate_model(
    model: &CvaeModel,
    conditions: &[FeatureVector],
    opts: &EvalOptions,
) -> Result<EvalReport, PipelineError> {
    let gen = generate_options(model, opts.greedy, opts.temperature, opts.max_len);
    if let Some(dir) = &opts.graphs_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut reports = Vec::new();
    for (j, c) in conditions.iter().enumerate() {
        let outcomes = generate_many(model, c, opts.n, derive_seed(opts.seed, j as u64), &gen)?;
        let mut r = ConditionReport {
            condition: c.clone(),
            attempts: outcomes.len(),
            accepted: 0,
            degenerate: 0,
            invalid_code: 0,
            max_len: 0,
            exponents: Vec::new(),
            clusterings: Vec::new(),
        };
        for (i, o) in outcomes.iter().enumerate() {
            let g = match o {
                Ok(g) => g,
                Err(Rejection::InvalidCode(_)) => {
                    r.invalid_code += 1;
                    continue;
                }
                Err(Rejection::MaxLenExceeded) => {
                    r.max_len += 1;
                    continue;
                }
            };
            match scaling_exponent(g) {
                Ok(e) => {
                    r.accepted += 1;
                    r.exponents.push(e);
                    r.clusterings.push(clustering_coefficient(g));
                    if let Some(dir) = &opts.graphs_dir {
                        let path = dir.join(format!("cond{j}_{i:04}.txt"));
                        fs::write(&path, g.to_text()).map_err(io_err(&path))?;
                    }
                }
                Err(FeatureError::DegenerateDistribution { .. }) => r.degenerate += 1,
                Err(e) => return Err(e.into()),
            }
        }
        reports.push(r);
    }
    Ok(EvalReport {
        conditions: reports,
    })
}

/// Samples `opts.n` graphs per condition from a checkpoint and measures
/// them. Condition `j`, attempt `i` uses seed
/// `derive_seed(derive_seed(seed, j), i)`.
pub fn evaluate(
    checkpoint: &Path,
    conditions: &[FeatureVector],
    opts: &EvalOptions,
) -> Result<EvalReport, PipelineError> {
    let model = load_checkpoint(checkpoint)?.model;
    evaluate_model(&model, conditions, opts)
}
