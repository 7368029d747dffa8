use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cvaegg::cvae::{DecayMode, Hyperparams, LatentWiring};
use cvaegg::features::FeatureVector;
use cvaegg::pipeline::{
    build_dataset, encode_dataset, evaluate, read_conditions, sample, train, DatasetSpec,
    EvalOptions, PipelineError, SampleOptions, TrainConfig,
};

#[derive(Parser)]
#[command(name = "cvaegg", version, about = "Condition-steered graph generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a tolerance-binned CNN dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        nodes: usize,
        /// `default`, or `exp,clust,count[,tol_exp,tol_clust];...`
        #[arg(long, default_value = "default")]
        bins: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Encode every dataset graph as a minimum DFS code.
    Encode {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the conditional VAE on an encoded dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        epochs: usize,
        #[arg(long, default_value_t = 60)]
        batch: usize,
        #[arg(long, default_value_t = 256)]
        hidden: usize,
        #[arg(long, default_value_t = 128)]
        embed: usize,
        #[arg(long, default_value_t = 20)]
        latent: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        /// `decoupled` (AdamW) or `l2` (penalty added to the gradient).
        #[arg(long, default_value = "decoupled")]
        decay: DecayMode,
        #[arg(long, default_value_t = 0.015)]
        clip: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        kl_weight: f64,
        /// Epochs over which the KL weight ramps up linearly (0 = off).
        #[arg(long, default_value_t = 0)]
        kl_warmup: usize,
        /// `hidden` feeds [h; z] to the heads, `input` appends z to every step.
        #[arg(long, default_value = "hidden")]
        wiring: LatentWiring,
        #[arg(long, default_value_t = 50)]
        checkpoint_every: usize,
        /// Decoder step budget stored with the model.
        #[arg(long)]
        max_len: Option<usize>,
        /// Train on at most this many graphs, balanced across bins.
        #[arg(long)]
        limit: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate graphs under one condition vector.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        cond: FeatureVector,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        greedy: bool,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Sample under each condition in a file and measure the results.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// One `exponent,clustering` pair per line.
        #[arg(long)]
        conds: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// Per-condition summary; defaults to the report path with
        /// `.summary.csv`.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Also write every accepted graph here.
        #[arg(long)]
        graphs: Option<PathBuf>,
        #[arg(long)]
        greedy: bool,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        max_len: Option<usize>,
    },
}

fn write(path: &PathBuf, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.clone(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::GenData {
            out,
            nodes,
            bins,
            seed,
        } => {
            let spec = DatasetSpec {
                bins: DatasetSpec::parse_bins(&bins)?,
                node_count: nodes,
                ..DatasetSpec::default()
            };
            let summary = build_dataset(&spec, seed, &out)?;
            for (b, s) in summary.bins.iter().enumerate() {
                println!(
                    "bin {b}: u = {}, probe acceptance {:.3}, {} draws",
                    s.u, s.probe_acceptance, s.draws
                );
            }
            println!(
                "{} graphs written to {}",
                summary.entries.len(),
                out.display()
            );
        }
        Command::Encode { data } => {
            let s = encode_dataset(&data)?;
            println!(
                "{} sequences ({} computed, {} cached), max length {} with EOS",
                s.sequences, s.computed, s.reused, s.max_seq_len
            );
        }
        Command::Train {
            data,
            out,
            epochs,
            batch,
            hidden,
            embed,
            latent,
            lr,
            weight_decay,
            decay,
            clip,
            seed,
            kl_weight,
            kl_warmup,
            wiring,
            checkpoint_every,
            max_len,
            limit,
            resume,
        } => {
            let hp = Hyperparams {
                hidden_dim: hidden,
                embed_dim: embed,
                latent_dim: latent,
                lr,
                weight_decay,
                decay,
                clip_threshold: clip,
                batch_size: batch,
                epochs,
                max_seq_len: max_len,
                kl_weight,
                wiring,
            };
            hp.validate()?;
            let cfg = TrainConfig {
                checkpoint_every,
                kl_warmup_epochs: kl_warmup,
                limit,
                resume,
                ..TrainConfig::new(hp, seed)
            };
            let summary = train(&data, &out, &cfg, |m| {
                println!(
                    "epoch {:>4}  total {:.4}  reconstruction {:.4}  kl {:.4}",
                    m.epoch, m.total, m.reconstruction, m.kl
                );
            })?;
            println!(
                "trained on {} sequences; final checkpoint {}",
                summary.sequences,
                summary.final_checkpoint.display()
            );
        }
        Command::Sample {
            ckpt,
            cond,
            n,
            seed,
            out,
            greedy,
            temperature,
            max_len,
        } => {
            let opts = SampleOptions {
                greedy,
                temperature,
                max_len,
                ..SampleOptions::new(n, seed)
            };
            let s = sample(&ckpt, &cond, &opts, &out)?;
            println!(
                "{} attempts: {} accepted, {} invalid code, {} over max length",
                s.attempts, s.accepted, s.invalid_code, s.max_len
            );
        }
        Command::Eval {
            ckpt,
            conds,
            n,
            seed,
            report,
            summary,
            graphs,
            greedy,
            temperature,
            max_len,
        } => {
            let conditions = read_conditions(&conds)?;
            let opts = EvalOptions {
                greedy,
                temperature,
                max_len,
                graphs_dir: graphs,
                ..EvalOptions::new(n, seed)
            };
            let r = evaluate(&ckpt, &conditions, &opts)?;
            write(&report, &r.to_csv())?;
            let summary = summary.unwrap_or_else(|| report.with_extension("summary.csv"));
            write(&summary, &r.summary_csv())?;
            for c in &r.conditions {
                let (mean, std) = c.exponent_stats();
                println!(
                    "condition {}: {}/{} accepted ({} degenerate), exponent {mean:.3} +/- {std:.3}",
                    c.condition, c.accepted, c.attempts, c.degenerate
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
