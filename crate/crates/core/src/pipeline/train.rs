//! Mini-batch training with per-epoch metrics and resumable checkpoints.
//!
//! Output directory layout:
//!
//! ```text
//! metrics.csv          epoch,total,reconstruction,kl (one row per epoch)
//! epoch_{NNNN}.ckpt    every `checkpoint_every` epochs
//! final.ckpt           after the last epoch
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cvaegg_autodiff::{
    adam_step, add_weight_decay, clip_gradients, AdamConfig, AdamState, Tape, Tensor,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encode::{load_corpus, Sequence};
use super::{derive_seed, io_err, PipelineError};
use crate::cvae::{
    load_checkpoint, save_checkpoint, CvaeError, CvaeModel, DecayMode, Hyperparams, TokenizedTuple,
    TrainState, Vocabularies,
};

const METRICS: &str = "metrics.csv";
const METRICS_HEADER: &str = "epoch,total,reconstruction,kl";
const INIT_STREAM: u64 = 0;
const EPOCH_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hyperparams: Hyperparams,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Linear ramp of the KL weight from `kl_weight / warmup` to `kl_weight`
    /// over this many epochs; 0 disables it.
    pub kl_warmup_epochs: usize,
    /// Train on at most this many sequences, taken round-robin across bins.
    pub limit: Option<usize>,
    /// Continue from a checkpoint that carries optimizer state. Its
    /// hyperparameters and seed win over the fields above, except `epochs`.
    pub resume: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(hyperparams: Hyperparams, seed: u64) -> Self {
        Self {
            hyperparams,
            seed,
            checkpoint_every: 50,
            kl_warmup_epochs: 0,
            limit: None,
            resume: None,
        }
    }
}

/// Per-sequence means over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    /// Every epoch from the first, including rows kept from a resumed run.
    pub metrics: Vec<EpochMetrics>,
    pub final_checkpoint: PathBuf,
    pub sequences: usize,
}

/// Bins in manifest order, interleaved so that any prefix is balanced.
fn round_robin(seqs: Vec<Sequence>, limit: Option<usize>) -> Vec<Sequence> {
    let bins = seqs.iter().map(|s| s.bin).max().map_or(0, |b| b + 1);
    let mut groups: Vec<std::collections::VecDeque<Sequence>> = vec![Default::default(); bins];
    for s in seqs {
        groups[s.bin].push_back(s);
    }
    let mut out = Vec::new();
    let cap = limit.unwrap_or(usize::MAX);
    while out.len() < cap && groups.iter().any(|g| !g.is_empty()) {
        for g in groups.iter_mut() {
            if out.len() == cap {
                break;
            }
            if let Some(s) = g.pop_front() {
                out.push(s);
            }
        }
    }
    out
}

fn format_metrics(m: &EpochMetrics) -> String {
    format!("{},{},{},{}\n", m.epoch, m.total, m.reconstruction, m.kl)
}

fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |message: String| PipelineError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(bad(format!("expected header `{METRICS_HEADER}`")));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad row `{l}`")));
            if f.len() != 4 {
                return Err(bad(format!("bad row `{l}`")));
            }
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad(format!("bad row `{l}`")))?,
                total: real(f[1])?,
                reconstruction: real(f[2])?,
                kl: real(f[3])?,
            })
        })
        .collect()
}

/// Trains on the encoded corpus in `data` and writes metrics and checkpoints
/// to `out`. `progress` sees every finished epoch.
pub fn train(
    data: &Path,
    out: &Path,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainSummary, PipelineError> {
    let corpus = load_corpus(data)?;
    let max_nodes = corpus.max_nodes();
    let max_edges = corpus.max_edges();
    let seqs = round_robin(corpus.sequences, cfg.limit);
    if seqs.is_empty() {
        return Err(PipelineError::MissingCorpus(data.to_path_buf()));
    }
    let vocab = Vocabularies::new(max_nodes)?;
    let cond_dim = seqs[0].condition.len();
    let tokens: Vec<Vec<TokenizedTuple>> = seqs
        .iter()
        .map(|s| vocab.tokenize(&s.code))
        .collect::<Result<_, _>>()?;

    fs::create_dir_all(out).map_err(io_err(out))?;
    let metrics_path = out.join(METRICS);
    let (mut model, mut adam, start, seed, mut metrics) = match &cfg.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let state = ckpt.train.ok_or_else(|| PipelineError::Format {
                path: path.clone(),
                message: "checkpoint has no optimizer state to resume from".into(),
            })?;
            let mut model = ckpt.model;
            if *model.vocab() != vocab || model.condition_dim() != cond_dim {
                return Err(PipelineError::Format {
                    path: path.clone(),
                    message: "checkpoint vocabulary or condition width does not match the corpus"
                        .into(),
                });
            }
            let mut hp = *model.hyperparams();
            hp.epochs = cfg.hyperparams.epochs;
            model.set_hyperparams(hp)?;
            let mut metrics = read_metrics(&metrics_path)?;
            if metrics.len() < state.epoch {
                return Err(PipelineError::Format {
                    path: metrics_path,
                    message: format!("fewer than {} epochs recorded", state.epoch),
                });
            }
            metrics.truncate(state.epoch);
            (model, state.adam, state.epoch, state.seed, metrics)
        }
        None => {
            let mut hp = cfg.hyperparams;
            hp.max_seq_len = Some(hp.resolved_max_len(max_edges));
            let model = CvaeModel::new(hp, vocab, cond_dim, derive_seed(cfg.seed, INIT_STREAM))?;
            let adam = AdamState::new(model.params());
            (model, adam, 0, cfg.seed, Vec::new())
        }
    };
    let mut text = metrics_csv(&metrics);
    fs::write(&metrics_path, &text).map_err(io_err(&metrics_path))?;

    let hp = *model.hyperparams();
    let adam_cfg = AdamConfig {
        lr: hp.lr,
        decoupled_weight_decay: match hp.decay {
            DecayMode::Decoupled => hp.weight_decay,
            DecayMode::L2 => 0.0,
        },
        ..AdamConfig::default()
    };
    let epoch_stream = derive_seed(seed, EPOCH_STREAM);
    let n = seqs.len();
    let final_checkpoint = out.join("final.ckpt");
    for epoch in start..hp.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_stream, epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let kl_weight = if cfg.kl_warmup_epochs > 0 {
            hp.kl_weight * ((epoch + 1) as f64 / cfg.kl_warmup_epochs as f64).min(1.0)
        } else {
            hp.kl_weight
        };
        let (mut total, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for (batch, idx) in order.chunks(hp.batch_size).enumerate() {
            let eps = Tensor::normal(idx.len(), hp.latent_dim, 1.0, &mut rng);
            let batch_seqs: Vec<&[TokenizedTuple]> = idx.iter().map(|&i| &tokens[i][..]).collect();
            let conds: Vec<&[f64]> = idx.iter().map(|&i| &seqs[i].condition[..]).collect();
            let mut grads = {
                let mut tape = Tape::new();
                let b = model.bind(&mut tape);
                let terms = model.loss_batch(&mut tape, &b, &batch_seqs, &conds, eps)?;
                let objective = if kl_weight == hp.kl_weight {
                    terms.total
                } else {
                    let weighted = tape.scale(terms.kl, kl_weight);
                    tape.add(terms.reconstruction, weighted)
                        .map_err(CvaeError::from)?
                };
                let value = tape.value(objective).item();
                if !value.is_finite() {
                    return Err(PipelineError::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch,
                    });
                }
                let w = idx.len() as f64;
                total += value * w;
                recon += tape.value(terms.reconstruction).item() * w;
                kl += tape.value(terms.kl).item() * w;
                let mut g = tape.backward(objective).map_err(CvaeError::from)?;
                b.collect_gradients(&mut g, model.params())
            };
            // An L2 penalty joins the gradient before clipping, so the clip
            // bounds the whole update direction.
            if hp.decay == DecayMode::L2 {
                add_weight_decay(&mut grads, model.params(), hp.weight_decay);
            }
            clip_gradients(&mut grads, hp.clip_threshold);
            adam_step(model.params_mut(), &grads, &mut adam, &adam_cfg);
        }
        let m = EpochMetrics {
            epoch: epoch + 1,
            total: total / n as f64,
            reconstruction: recon / n as f64,
            kl: kl / n as f64,
        };
        text.push_str(&format_metrics(&m));
        fs::write(&metrics_path, &text).map_err(io_err(&metrics_path))?;
        metrics.push(m);
        progress(&m);

        let state = TrainState {
            epoch: epoch + 1,
            seed,
            adam: adam.clone(),
        };
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            let path = out.join(format!("epoch_{:04}.ckpt", epoch + 1));
            save_checkpoint(&path, &model, Some(&state)).map_err(io_err(&path))?;
        }
        if epoch + 1 == hp.epochs {
            save_checkpoint(&final_checkpoint, &model, Some(&state))
                .map_err(io_err(&final_checkpoint))?;
        }
    }
    if start >= hp.epochs {
        let state = TrainState {
            epoch: start,
            seed,
            adam,
        };
        save_checkpoint(&final_checkpoint, &model, Some(&state))
            .map_err(io_err(&final_checkpoint))?;
    }
    Ok(TrainSummary {
        metrics,
        final_checkpoint,
        sequences: n,
    })
}

/// Renders metrics as the CSV written to `metrics.csv`.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::new();
    writeln!(s, "{METRICS_HEADER}").unwrap();
    for m in metrics {
        s.push_str(&format_metrics(m));
    }
    s
}
