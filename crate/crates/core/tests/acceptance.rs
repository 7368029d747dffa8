//! Acceptance suite: one PASS/FAIL line per criterion, with its runtime
//! budget. Runs as a plain binary (no libtest harness) so the lines always
//! reach the terminal.
//!
//! Criterion 7 trains a 200-epoch model and is skipped unless the binary is
//! given `--ignored` or `--include-ignored`, or `CVAEGG_ACCEPT_CKPT` is set:
//!
//! ```text
//! cargo test --release -p cvaegg --test acceptance -- --include-ignored
//! ```
//!
//! `CVAEGG_ACCEPT_CKPT=path/to/final.ckpt` evaluates an existing checkpoint
//! trained on the same dataset (`gen-data --seed 1`) instead of training one.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{graph_from_degrees, random_connected, random_permutation};
use cvaegg::cnn::{cnn_generate, CnnParams};
use cvaegg::cvae::{CvaeModel, Hyperparams, LatentWiring, TokenizedTuple, Vocabularies};
use cvaegg::dfscode::{all_dfs_codes, decode, min_dfs_code};
use cvaegg::features::{clustering_coefficient, scaling_exponent, FeatureVector};
use cvaegg::graph::Graph;
use cvaegg::pipeline::{
    build_dataset, encode_dataset, evaluate, read_manifest, train, verify_dataset, DatasetSpec,
    EvalOptions, EvalReport, PipelineError, TrainConfig,
};
use cvaegg_autodiff::gradcheck::check;
use cvaegg_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA_SEED: u64 = 1;
const TRAIN_SEED: u64 = 1;
const EVAL_SEED: u64 = 1;
const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Runs one criterion and prints its line. A criterion over budget fails.
fn report(id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let in_budget = budget.is_none_or(|b| took <= b);
    let pass = o.pass && in_budget;
    let budget_text = budget.map_or_else(String::new, |b| format!(" / {}s", b.as_secs()));
    println!(
        "criterion {id} {}: {name}: {}{} [{:.1}s{budget_text}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        if in_budget { "" } else { "; over time budget" },
        took.as_secs_f64(),
    );
    pass
}

fn codec_canonicality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let us = [0.2, 0.5, 0.8];
    let mut failures = Vec::new();
    for i in 0..1000u64 {
        let u = us[i as usize % 3];
        let g = cnn_generate(&CnnParams::new(25, u, 10_000 + i).unwrap())
            .relabel_reciprocal_degree()
            .unwrap();
        let code = match min_dfs_code(&g) {
            Ok(c) => c,
            Err(e) => {
                failures.push(format!("graph {i} (u={u}): {e}"));
                continue;
            }
        };
        for _ in 0..5 {
            let h = g.permute(&random_permutation(25, &mut rng));
            if min_dfs_code(&h).as_ref() != Ok(&code) {
                failures.push(format!("graph {i} (u={u}): permutation changed the code"));
            }
        }
        let back = decode(&code).and_then(|d| min_dfs_code(&d));
        if back.as_ref() != Ok(&code) {
            failures.push(format!(
                "graph {i} (u={u}): decode/re-encode is not a fixed point"
            ));
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "1000 CNN graphs x 5 permutations, {} failures{}",
            failures.len(),
            failures
                .first()
                .map_or(String::new(), |f| format!(" (first: {f})"))
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = 0;
    for _ in 0..500 {
        let edges = rng.gen_range(1..=7);
        let nodes = rng.gen_range(2..=edges + 1);
        let g = random_connected(nodes, edges, &mut rng)
            .relabel_reciprocal_degree()
            .unwrap();
        let oracle = all_dfs_codes(&g).unwrap().into_iter().min();
        if min_dfs_code(&g).ok() != oracle {
            failures += 1;
        }
    }
    Outcome::new(
        failures == 0,
        format!("500 graphs with <= 7 edges, {failures} mismatches"),
    )
}

type Build = dyn Fn(&mut Tape<'_>, &[Var]) -> Var;
type OpCase = (&'static str, Vec<(usize, usize)>, Box<Build>);

/// Worst relative error of one op over 20 random input draws. Non-scalar
/// outputs are projected onto fixed random weights.
fn op_error(shapes: &[(usize, usize)], build: &Build) -> f64 {
    let eval = |inputs: &[Tensor], proj: Option<&Tensor>| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let mut out = build(&mut tape, &vars);
        if let Some(p) = proj {
            let w = tape.constant(p.clone());
            let prod = tape.mul(out, w).unwrap();
            out = tape.sum(prod);
        }
        let value = tape.value(out).item();
        let grads = tape.backward(out).unwrap();
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect();
        (value, analytic)
    };
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|&(r, c)| Tensor::uniform(r, c, 2.0, &mut rng))
            .collect();
        let shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).shape()
        };
        let proj = (shape != (1, 1)).then(|| Tensor::uniform(shape.0, shape.1, 1.0, &mut rng));
        let (_, analytic) = eval(&inputs, proj.as_ref());
        let f = |xs: &[Tensor]| eval(xs, proj.as_ref()).0;
        worst = worst.max(check(&inputs, &analytic, FD_STEP, FD_FLOOR, &f).max_relative_error);
    }
    worst
}

fn cvae_loss_error() -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let wiring = if trial % 2 == 0 {
            LatentWiring::HiddenConcat
        } else {
            LatentWiring::InputConcat
        };
        let hp = Hyperparams {
            hidden_dim: 8,
            embed_dim: 4,
            latent_dim: 3,
            wiring,
            ..Hyperparams::default()
        };
        let vocab = Vocabularies::new(5).unwrap();
        let model = CvaeModel::new(hp, vocab, 2, trial).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
        // A 3- or 4-node tree next to a single edge: the shorter sequence
        // exercises padding and masking.
        let nodes = rng.gen_range(3..=4);
        let tokens = |g: Graph| {
            vocab
                .tokenize(&min_dfs_code(&g.relabel_reciprocal_degree().unwrap()).unwrap())
                .unwrap()
        };
        let a = tokens(random_connected(nodes, nodes - 1, &mut rng));
        let b = tokens(Graph::from_edges(2, &[(0, 1)]).unwrap());
        let ca = [rng.gen_range(-1.5..-0.3), rng.gen_range(0.0..0.7)];
        let cb = [rng.gen_range(-1.5..-0.3), rng.gen_range(0.0..0.7)];
        let eps = Tensor::normal(2, 3, 1.0, &mut rng);
        let loss = |m: &CvaeModel| {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let seqs: [&[TokenizedTuple]; 2] = [&a, &b];
            let conds: [&[f64]; 2] = [&ca, &cb];
            let terms = m
                .loss_batch(&mut tape, &bound, &seqs, &conds, eps.clone())
                .unwrap();
            let value = tape.value(terms.total).item();
            let mut grads = tape.backward(terms.total).unwrap();
            (value, bound.collect_gradients(&mut grads, m.params()))
        };
        let (_, analytic) = loss(&model);
        let f = |params: &[Tensor]| {
            let m = CvaeModel::from_parts(hp, vocab, 2, params.to_vec()).unwrap();
            loss(&m).0
        };
        worst =
            worst.max(check(model.params(), &analytic, FD_STEP, FD_FLOOR, &f).max_relative_error);
    }
    worst
}

fn numeric_correctness() -> Outcome {
    let ops: Vec<OpCase> = vec![
        (
            "matmul",
            vec![(4, 5), (5, 3)],
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "add",
            vec![(3, 4), (3, 4)],
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            vec![(3, 4), (3, 4)],
            Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![(3, 4), (3, 4)],
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        ),
        (
            "add_row",
            vec![(3, 4), (1, 4)],
            Box::new(|t, v| t.add_row(v[0], v[1]).unwrap()),
        ),
        ("scale", vec![(3, 4)], Box::new(|t, v| t.scale(v[0], -1.7))),
        (
            "add_scalar",
            vec![(3, 4)],
            Box::new(|t, v| t.add_scalar(v[0], 0.3)),
        ),
        ("sigmoid", vec![(3, 4)], Box::new(|t, v| t.sigmoid(v[0]))),
        ("tanh", vec![(3, 4)], Box::new(|t, v| t.tanh(v[0]))),
        ("exp", vec![(3, 4)], Box::new(|t, v| t.exp(v[0]))),
        ("sum", vec![(3, 4)], Box::new(|t, v| t.sum(v[0]))),
        (
            "concat_cols",
            vec![(3, 2), (3, 4)],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
        ),
        (
            "concat_rows",
            vec![(2, 3), (1, 3)],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
        ),
        (
            "slice_cols",
            vec![(3, 6)],
            Box::new(|t, v| t.slice_cols(v[0], 2, 5).unwrap()),
        ),
        (
            "slice_rows",
            vec![(5, 3)],
            Box::new(|t, v| t.slice_rows(v[0], 1, 3).unwrap()),
        ),
        (
            "gather_rows",
            vec![(4, 3)],
            Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3, 1, 3]).unwrap()),
        ),
        (
            "softmax_cross_entropy",
            vec![(5, 4)],
            Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 2, 2, 1]).unwrap()),
        ),
        (
            "weighted_softmax_cross_entropy",
            vec![(3, 6)],
            Box::new(|t, v| {
                t.weighted_softmax_cross_entropy(v[0], &[5, 0, 1], &[0.5, 0.0, 2.0])
                    .unwrap()
            }),
        ),
    ];
    let mut worst = ("", 0.0f64);
    for (name, shapes, build) in &ops {
        let e = op_error(shapes, build.as_ref());
        if e >= worst.1 {
            worst = (name, e);
        }
    }
    let loss = cvae_loss_error();
    Outcome::new(
        worst.1 < GRAD_TOL && loss < GRAD_TOL,
        format!(
            "{} ops, worst {} rel err {:.2e}; CVAE loss worst rel err {:.2e} over 20 trials (< {GRAD_TOL:e})",
            ops.len(),
            worst.0,
            worst.1,
            loss
        ),
    )
}

/// Local clustering by triple enumeration, then averaged with the same
/// sorted summation as the library, so equality can be exact.
fn triple_clustering(g: &Graph) -> f64 {
    let n = g.node_count();
    let mut closed = vec![0usize; n];
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                if g.has_edge(a, b) && g.has_edge(b, c) && g.has_edge(a, c) {
                    closed[a] += 1;
                    closed[b] += 1;
                    closed[c] += 1;
                }
            }
        }
    }
    let mut local: Vec<f64> = (0..n)
        .map(|v| {
            let d = (0..n).filter(|&w| g.has_edge(v, w)).count();
            if d < 2 {
                0.0
            } else {
                2.0 * closed[v] as f64 / (d * (d - 1)) as f64
            }
        })
        .collect();
    local.sort_by(f64::total_cmp);
    local.iter().sum::<f64>() / n as f64
}

fn feature_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    for _ in 0..200 {
        let nodes = rng.gen_range(2..=25);
        let edges = rng.gen_range(nodes - 1..=nodes * (nodes - 1) / 2);
        let g = random_connected(nodes, edges, &mut rng);
        if clustering_coefficient(&g) != triple_clustering(&g) {
            mismatches += 1;
        }
    }
    // Degree k held by c(k) = A * k^gamma nodes, realized by Havel-Hakimi.
    let laws: [(f64, &[(usize, usize)]); 3] = [
        (-0.5, &[(1, 32), (4, 16), (16, 8)]),
        (-1.0, &[(1, 32), (2, 16), (4, 8), (8, 4)]),
        (-1.5, &[(1, 64), (4, 8), (16, 1)]),
    ];
    let mut worst: f64 = 0.0;
    for (gamma, hist) in laws {
        let degrees: Vec<usize> = hist
            .iter()
            .flat_map(|&(k, c)| std::iter::repeat_n(k, c))
            .collect();
        let err = match graph_from_degrees(&degrees).map(|g| scaling_exponent(&g)) {
            Some(Ok(slope)) => (slope - gamma).abs(),
            _ => f64::INFINITY,
        };
        worst = worst.max(err);
    }
    Outcome::new(
        mismatches == 0 && worst <= 1e-9,
        format!(
            "clustering: {mismatches}/200 inexact; exponent worst |error| {worst:.1e} for gamma in {{-0.5, -1.0, -1.5}} (<= 1e-9)"
        ),
    )
}

fn dataset_reproduction(dir: &Path) -> Outcome {
    let spec = DatasetSpec::default();
    let summary = match build_dataset(&spec, DATA_SEED, dir) {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, format!("gen-data failed: {e}")),
    };
    let per_bin: Vec<usize> = (0..3)
        .map(|b| summary.entries.iter().filter(|e| e.bin == b).count())
        .collect();
    let inside = summary
        .entries
        .iter()
        .all(|e| spec.bins[e.bin].accepts(&e.features));
    let verified = verify_dataset(dir);
    let pass = summary.entries.len() == 1200
        && per_bin == [400, 400, 400]
        && inside
        && matches!(verified, Ok(1200));
    Outcome::new(
        pass,
        format!(
            "{} graphs, per bin {:?}, all within tolerance: {inside}, manifest re-check: {}; u per bin {:?}",
            summary.entries.len(),
            per_bin,
            verified.map_or_else(|e| e.to_string(), |n| format!("{n} ok")),
            summary.bins.iter().map(|b| b.u).collect::<Vec<_>>()
        ),
    )
}

/// Hyperparameters of the reduced run. Batch 6 keeps the 20 optimizer
/// steps per epoch of the full 1200-graph run on the 120-graph subset.
fn smoke_config() -> TrainConfig {
    let hp = Hyperparams {
        hidden_dim: 64,
        embed_dim: 32,
        latent_dim: 10,
        epochs: 50,
        batch_size: 6,
        ..Hyperparams::default()
    };
    TrainConfig {
        limit: Some(120),
        checkpoint_every: 0,
        ..TrainConfig::new(hp, TRAIN_SEED)
    }
}

fn training_smoke(data: &Path, out: &Path) -> Outcome {
    if let Err(e) = encode_dataset(data) {
        return Outcome::new(false, format!("encode failed: {e}"));
    }
    match train(data, out, &smoke_config(), |_| {}) {
        Ok(s) => {
            let first = s.metrics[0].total;
            let last = s.metrics.last().unwrap().total;
            let kl_ok = s.metrics.iter().all(|m| m.kl >= 0.0);
            Outcome::new(
                last < 0.5 * first && kl_ok && s.sequences == 120 && s.metrics.len() == 50,
                format!(
                    "{} graphs, 50 epochs: first {first:.4}, final {last:.4}, ratio {:.3} (< 0.5), KL >= 0 every epoch: {kl_ok}",
                    s.sequences,
                    last / first
                ),
            )
        }
        Err(e @ PipelineError::NonFiniteLoss { .. }) => Outcome::new(false, e.to_string()),
        Err(e) => Outcome::new(false, format!("training failed: {e}")),
    }
}

fn bin_targets() -> Vec<FeatureVector> {
    DatasetSpec::default()
        .bins
        .iter()
        .map(|b| b.target.clone())
        .collect()
}

fn steered_exponents(data: &Path, work: &Path) -> Outcome {
    let ckpt = match std::env::var_os("CVAEGG_ACCEPT_CKPT") {
        Some(p) => PathBuf::from(p),
        None => {
            if let Err(e) = encode_dataset(data) {
                return Outcome::new(false, format!("encode failed: {e}"));
            }
            let hp = Hyperparams {
                epochs: 200,
                ..Hyperparams::default()
            };
            match train(
                data,
                &work.join("half"),
                &TrainConfig::new(hp, TRAIN_SEED),
                |m| {
                    if m.epoch % 10 == 0 {
                        eprintln!(
                            "  criterion 7 training: epoch {} total {:.4}",
                            m.epoch, m.total
                        );
                    }
                },
            ) {
                Ok(s) => s.final_checkpoint,
                Err(e) => return Outcome::new(false, format!("training failed: {e}")),
            }
        }
    };
    let report = match evaluate(&ckpt, &bin_targets(), &EvalOptions::new(200, EVAL_SEED)) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("evaluation failed: {e}")),
    };
    let _ = fs::write(work.join("steered_report.csv"), report.to_csv());
    let _ = fs::write(work.join("steered_summary.csv"), report.summary_csv());
    let means: Vec<f64> = report
        .conditions
        .iter()
        .map(|c| c.exponent_stats().0)
        .collect();
    let rates: Vec<f64> = report
        .conditions
        .iter()
        .map(|c| c.acceptance_rate())
        .collect();
    let soft_a = rates.iter().all(|&r| r >= 0.5);
    let soft_b = report
        .conditions
        .iter()
        .zip(&means)
        .all(|(c, m)| (m - c.condition.exponent()).abs() <= 0.3);
    let hard_c = means[0] < means[1] && means[1] < means[2];
    Outcome::new(
        hard_c,
        format!(
            "(c) ordering {:.3} < {:.3} < {:.3}: {hard_c}; (a) acceptance {:?} >= 0.5: {soft_a}; \
             (b) means within 0.3 of targets: {soft_b}; checkpoint {}",
            means[0],
            means[1],
            means[2],
            rates.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            ckpt.display()
        ),
    )
}

fn determinism(first_data: &Path, first_smoke: &Path, work: &Path) -> Outcome {
    let data = work.join("data_again");
    let smoke = work.join("smoke_again");
    if let Err(e) = build_dataset(&DatasetSpec::default(), DATA_SEED, &data)
        .and_then(|_| encode_dataset(&data))
        .and_then(|_| train(&data, &smoke, &smoke_config(), |_| {}))
    {
        return Outcome::new(false, format!("repeat run failed: {e}"));
    }
    let same =
        |a: &Path, b: &Path| fs::read(a).ok().is_some() && fs::read(a).ok() == fs::read(b).ok();
    let manifest = same(&first_data.join("manifest.csv"), &data.join("manifest.csv"));
    let graphs = read_manifest(first_data).is_ok_and(|entries| {
        entries
            .iter()
            .all(|e| same(&first_data.join(&e.file), &data.join(&e.file)))
    });
    let metrics = same(&first_smoke.join("metrics.csv"), &smoke.join("metrics.csv"));
    let ckpt = same(&first_smoke.join("final.ckpt"), &smoke.join("final.ckpt"));
    // Evaluation of the smoke checkpoint, twice, with the evaluation seed.
    let eval = |p: &Path| -> Result<EvalReport, PipelineError> {
        evaluate(
            &p.join("final.ckpt"),
            &bin_targets(),
            &EvalOptions::new(200, EVAL_SEED),
        )
    };
    let reports = match (eval(first_smoke), eval(&smoke)) {
        (Ok(a), Ok(b)) => a.to_csv() == b.to_csv() && a.summary_csv() == b.summary_csv(),
        _ => false,
    };
    let metrics_text = fs::read_to_string(first_smoke.join("metrics.csv")).unwrap_or_default();
    let rows_consistent = metrics_text.lines().count() == 51;
    Outcome::new(
        manifest && graphs && metrics && ckpt && reports && rows_consistent,
        format!(
            "manifest {manifest}, graph files {graphs}, metrics CSV {metrics}, checkpoint {ckpt}, eval report {reports} (byte-identical on repeat)"
        ),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // libtest-style listing probes get an empty list.
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let run_ignored = args
        .iter()
        .any(|a| a == "--ignored" || a == "--include-ignored")
        || std::env::var_os("CVAEGG_ACCEPT_CKPT").is_some();
    let work = tempfile::tempdir().expect("temporary directory");
    let data = work.path().join("data");
    let smoke = work.path().join("smoke");
    let mins = |m: u64| Some(Duration::from_secs(60 * m));

    let mut all = true;
    all &= report(
        1,
        "codec canonicality and round trip",
        mins(2),
        codec_canonicality,
    );
    all &= report(2, "oracle equivalence", mins(1), oracle_equivalence);
    all &= report(3, "numeric correctness", mins(1), numeric_correctness);
    all &= report(4, "feature oracles", None, feature_oracles);
    all &= report(5, "dataset reproduction", mins(10), || {
        dataset_reproduction(&data)
    });
    all &= report(6, "training smoke", mins(20), || {
        training_smoke(&data, &smoke)
    });
    if run_ignored {
        all &= report(7, "condition-steered exponents", None, || {
            steered_exponents(&data, work.path())
        });
    } else {
        println!(
            "criterion 7 SKIP: hours-scale training; run with `-- --include-ignored` or set CVAEGG_ACCEPT_CKPT"
        );
    }
    all &= report(8, "determinism", None, || {
        determinism(&data, &smoke, work.path())
    });
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
