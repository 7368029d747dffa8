//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "CVAEGG1\n"
//! hyperparams   u64 hidden, embed, latent; f64 lr, weight_decay, clip;
//!               u64 batch, epochs, max_seq_len (0 = unset); f64 kl_weight;
//!               u8 wiring (0 hidden, 1 input); u8 decay (0 decoupled, 1 l2)
//! u64 condition_dim
//! vocab table   u64 max_nodes; u64 timestamp size; u64 label count, then
//!               that many f64 label values; u64 edge size
//! u64 block count, then per block:
//!               u64 name length, name bytes, u64 rows, u64 cols, f64 data
//! u8 has_train_state; if 1: u64 epoch, u64 seed, u64 adam step, then the
//!               Adam first and second moments as named blocks
//! ```
//!
//! Floats are stored bit for bit, so save, load, save yields identical bytes.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use cvaegg_autodiff::{AdamState, Tensor};
use thiserror::Error;

use super::model::{param_names, CvaeModel};
use super::vocab::Vocabularies;
use super::{CvaeError, DecayMode, Hyperparams, LatentWiring};

const MAGIC: &[u8; 8] = b"CVAEGG1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] CvaeError),
}

fn format_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

/// Optimizer progress needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Master training seed.
    pub seed: u64,
    pub adam: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CvaeModel,
    pub train: Option<TrainState>,
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    model: &CvaeModel,
    train: Option<&TrainState>,
) -> io::Result<()> {
    w.write_all(MAGIC)?;
    let hp = model.hyperparams();
    for v in [hp.hidden_dim, hp.embed_dim, hp.latent_dim] {
        put_u64(w, v as u64)?;
    }
    for v in [hp.lr, hp.weight_decay, hp.clip_threshold] {
        put_f64(w, v)?;
    }
    for v in [hp.batch_size, hp.epochs, hp.max_seq_len.unwrap_or(0)] {
        put_u64(w, v as u64)?;
    }
    put_f64(w, hp.kl_weight)?;
    w.write_all(&[match hp.wiring {
        LatentWiring::HiddenConcat => 0,
        LatentWiring::InputConcat => 1,
    }])?;
    w.write_all(&[match hp.decay {
        DecayMode::Decoupled => 0,
        DecayMode::L2 => 1,
    }])?;
    put_u64(w, model.condition_dim() as u64)?;

    let vocab = model.vocab();
    let sizes = vocab.sizes();
    put_u64(w, vocab.max_nodes() as u64)?;
    put_u64(w, sizes[0] as u64)?;
    let labels: Vec<f64> = (0..).map_while(|i| vocab.label_value(i)).collect();
    put_u64(w, labels.len() as u64)?;
    for l in labels {
        put_f64(w, l)?;
    }
    put_u64(w, sizes[3] as u64)?;

    let names = model.param_names();
    write_blocks(w, &names, model.params())?;
    match train {
        None => w.write_all(&[0]),
        Some(t) => {
            w.write_all(&[1])?;
            put_u64(w, t.epoch as u64)?;
            put_u64(w, t.seed)?;
            put_u64(w, t.adam.step)?;
            let prefixed = |p: &str| names.iter().map(|n| format!("{p}.{n}")).collect::<Vec<_>>();
            write_blocks(w, &prefixed("adam.m"), &t.adam.m)?;
            write_blocks(w, &prefixed("adam.v"), &t.adam.v)
        }
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_err("missing CVAEGG1 header"));
    }
    let hidden_dim = get_usize(r)?;
    let embed_dim = get_usize(r)?;
    let latent_dim = get_usize(r)?;
    let lr = get_f64(r)?;
    let weight_decay = get_f64(r)?;
    let clip_threshold = get_f64(r)?;
    let batch_size = get_usize(r)?;
    let epochs = get_usize(r)?;
    let max_seq_len = Some(get_usize(r)?).filter(|&m| m > 0);
    let kl_weight = get_f64(r)?;
    let wiring = match get_u8(r)? {
        0 => LatentWiring::HiddenConcat,
        1 => LatentWiring::InputConcat,
        other => return Err(format_err(format!("unknown wiring tag {other}"))),
    };
    let decay = match get_u8(r)? {
        0 => DecayMode::Decoupled,
        1 => DecayMode::L2,
        other => return Err(format_err(format!("unknown decay tag {other}"))),
    };
    let hp = Hyperparams {
        hidden_dim,
        embed_dim,
        latent_dim,
        lr,
        weight_decay,
        decay,
        clip_threshold,
        batch_size,
        epochs,
        max_seq_len,
        kl_weight,
        wiring,
    };
    let condition_dim = get_usize(r)?;

    let vocab = Vocabularies::new(get_usize(r)?)?;
    let sizes = vocab.sizes();
    if get_usize(r)? != sizes[0] {
        return Err(format_err("timestamp vocabulary size mismatch"));
    }
    let label_count = get_usize(r)?;
    if label_count != sizes[2] - 1 {
        return Err(format_err("label vocabulary size mismatch"));
    }
    for i in 0..label_count {
        let stored = get_f64(r)?;
        if Some(stored.to_bits()) != vocab.label_value(i).map(f64::to_bits) {
            return Err(format_err(format!("label table entry {i} is {stored}")));
        }
    }
    if get_usize(r)? != sizes[3] {
        return Err(format_err("edge vocabulary size mismatch"));
    }

    // Names are checked here, shapes by `from_parts`.
    let names = param_names();
    let params = read_blocks(r, &names, "")?;
    let model = CvaeModel::from_parts(hp, vocab, condition_dim, params)?;

    let train = match get_u8(r)? {
        0 => None,
        1 => {
            let epoch = get_usize(r)?;
            let seed = get_u64(r)?;
            let step = get_u64(r)?;
            let m = read_blocks(r, &names, "adam.m.")?;
            let v = read_blocks(r, &names, "adam.v.")?;
            for (p, (m, v)) in model.params().iter().zip(m.iter().zip(&v)) {
                if p.shape() != m.shape() || p.shape() != v.shape() {
                    return Err(format_err("optimizer state shape mismatch"));
                }
            }
            Some(TrainState {
                epoch,
                seed,
                adam: AdamState { step, m, v },
            })
        }
        other => return Err(format_err(format!("unknown train-state tag {other}"))),
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { model, train })
}

pub fn save_checkpoint(
    path: &Path,
    model: &CvaeModel,
    train: Option<&TrainState>,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, train)?;
    w.flush()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

fn write_blocks<W: Write>(w: &mut W, names: &[String], tensors: &[Tensor]) -> io::Result<()> {
    put_u64(w, tensors.len() as u64)?;
    for (name, t) in names.iter().zip(tensors) {
        put_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        put_u64(w, t.rows() as u64)?;
        put_u64(w, t.cols() as u64)?;
        let mut buf = Vec::with_capacity(8 * t.len());
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_blocks<R: Read>(
    r: &mut R,
    names: &[String],
    prefix: &str,
) -> Result<Vec<Tensor>, CheckpointError> {
    let count = get_usize(r)?;
    if count != names.len() {
        return Err(format_err(format!(
            "expected {} parameter blocks, found {count}",
            names.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for expected in names {
        let len = get_usize(r)?;
        if len > 256 {
            return Err(format_err("parameter name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| format_err("parameter name is not UTF-8"))?;
        if name != format!("{prefix}{expected}") {
            return Err(format_err(format!(
                "expected block {prefix}{expected}, found {name}"
            )));
        }
        let rows = get_usize(r)?;
        let cols = get_usize(r)?;
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n > 0 && n <= 1 << 28)
            .ok_or_else(|| format_err(format!("block {name} has bad shape {rows}x{cols}")))?;
        let mut bytes = vec![0u8; 8 * len];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push(Tensor::new(rows, cols, data).map_err(CvaeError::from)?);
    }
    Ok(out)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u8<R: Read>(r: &mut R) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_usize<R: Read>(r: &mut R) -> Result<usize, CheckpointError> {
    usize::try_from(get_u64(r)?).map_err(|_| format_err("integer field overflows usize"))
}

fn get_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
