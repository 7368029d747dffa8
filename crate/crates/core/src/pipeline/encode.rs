//! Minimum DFS code sequences for a dataset, with an incremental cache.
//!
//! `encode` writes `seqs/{stem}.seq` (the DFS code text format) per graph
//! and a binary cache `sequences.bin`, little-endian:
//!
//! ```text
//! "CVSEQ01\n"
//! u64 entry count, u64 max sequence length (EOS row included)
//! per entry: u64 name length, name bytes, 32-byte SHA-256 key, u64 bin,
//!            u64 condition width, f64 condition values, u64 tuple count,
//!            per tuple: u64 from, u64 to, f64 from_label, u32 edge_label,
//!            f64 to_label
//! ```
//!
//! The key hashes the graph file bytes together with the manifest's
//! condition values, so an entry is reused only when both are unchanged.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::dataset::read_manifest;
use super::{io_err, par_map, PipelineError};
use crate::dfscode::{min_dfs_code, DfsCode, EdgeTuple};
use crate::graph::Graph;

const MAGIC: &[u8; 8] = b"CVSEQ01\n";
const CACHE: &str = "sequences.bin";

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub file: String,
    pub bin: usize,
    pub condition: Vec<f64>,
    pub code: DfsCode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<Sequence>,
    /// Longest tokenized sequence, EOS row included.
    pub max_seq_len: usize,
}

impl Corpus {
    pub fn max_nodes(&self) -> usize {
        self.sequences
            .iter()
            .map(|s| s.code.node_count())
            .max()
            .unwrap_or(0)
    }

    pub fn max_edges(&self) -> usize {
        self.sequences
            .iter()
            .map(|s| s.code.len())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodeSummary {
    pub sequences: usize,
    /// Entries whose minimum code was computed in this run.
    pub computed: usize,
    /// Entries taken from the cache.
    pub reused: usize,
    pub max_seq_len: usize,
}

struct CacheEntry {
    key: [u8; 32],
    sequence: Sequence,
}

fn cache_key(graph_bytes: &[u8], condition: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(graph_bytes);
    for v in condition {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

fn seq_path(file: &str) -> String {
    let stem = Path::new(file)
        .file_stem()
        .map_or_else(|| file.to_string(), |s| s.to_string_lossy().into_owned());
    format!("seqs/{stem}.seq")
}

/// Encodes every manifest graph, reusing cached codes whose key matches.
pub fn encode_dataset(dir: &Path) -> Result<EncodeSummary, PipelineError> {
    let entries = read_manifest(dir)?;
    let cache_path = dir.join(CACHE);
    // A stale or damaged cache only costs recomputation.
    let mut cached: HashMap<String, CacheEntry> = match fs::File::open(&cache_path) {
        Ok(mut f) => read_cache(&mut f)
            .map(|(entries, _)| {
                entries
                    .into_iter()
                    .map(|e| (e.sequence.file.clone(), e))
                    .collect()
            })
            .unwrap_or_default(),
        Err(_) => HashMap::new(),
    };

    let seq_dir = dir.join("seqs");
    fs::create_dir_all(&seq_dir).map_err(io_err(&seq_dir))?;
    let keyed = par_map(entries.len(), |i| -> Result<_, PipelineError> {
        let e = &entries[i];
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let key = cache_key(&bytes, e.features.values());
        Ok((bytes, key))
    })?;
    let mut work = Vec::new();
    let mut out: Vec<Option<CacheEntry>> = Vec::with_capacity(entries.len());
    for (i, k) in keyed.into_iter().enumerate() {
        let (bytes, key) = k?;
        match cached.remove(&entries[i].file) {
            Some(c) if c.key == key && c.sequence.bin == entries[i].bin => out.push(Some(c)),
            _ => {
                out.push(None);
                work.push((i, bytes, key));
            }
        }
    }
    let computed = par_map(work.len(), |w| -> Result<CacheEntry, PipelineError> {
        let (i, bytes, key) = &work[w];
        let e = &entries[*i];
        let path = dir.join(&e.file);
        let text = std::str::from_utf8(bytes).map_err(|_| PipelineError::Format {
            path: path.clone(),
            message: "graph file is not UTF-8".into(),
        })?;
        // File labels are rounded; codes always use exact reciprocal degrees.
        let g = Graph::from_text(text)?.relabel_reciprocal_degree()?;
        Ok(CacheEntry {
            key: *key,
            sequence: Sequence {
                file: e.file.clone(),
                bin: e.bin,
                condition: e.features.values().to_vec(),
                code: min_dfs_code(&g)?,
            },
        })
    })?;
    let n_computed = computed.len();
    for ((i, _, _), c) in work.iter().zip(computed) {
        out[*i] = Some(c?);
    }
    let out: Vec<CacheEntry> = out.into_iter().map(|c| c.expect("filled above")).collect();

    for c in &out {
        let path = dir.join(seq_path(&c.sequence.file));
        let text = c.sequence.code.to_text();
        if fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
            fs::write(&path, text).map_err(io_err(&path))?;
        }
    }
    let max_seq_len = out
        .iter()
        .map(|c| c.sequence.code.len() + 1)
        .max()
        .unwrap_or(0);
    let tmp = dir.join(format!("{CACHE}.tmp"));
    let mut w = io::BufWriter::new(fs::File::create(&tmp).map_err(io_err(&tmp))?);
    write_cache(&mut w, &out, max_seq_len)
        .and_then(|_| w.flush())
        .map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, &cache_path).map_err(io_err(&cache_path))?;

    Ok(EncodeSummary {
        sequences: out.len(),
        computed: n_computed,
        reused: out.len() - n_computed,
        max_seq_len,
    })
}

/// Loads the encoded corpus written by [`encode_dataset`].
pub fn load_corpus(dir: &Path) -> Result<Corpus, PipelineError> {
    let path = dir.join(CACHE);
    let mut f = match fs::File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(PipelineError::MissingCorpus(dir.to_path_buf()))
        }
        Err(e) => return Err(io_err(&path)(e)),
    };
    let (entries, max_seq_len) = read_cache(&mut f).map_err(|e| PipelineError::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if entries.is_empty() {
        return Err(PipelineError::MissingCorpus(dir.to_path_buf()));
    }
    Ok(Corpus {
        sequences: entries.into_iter().map(|e| e.sequence).collect(),
        max_seq_len,
    })
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_cache<W: Write>(w: &mut W, entries: &[CacheEntry], max_seq_len: usize) -> io::Result<()> {
    w.write_all(MAGIC)?;
    put_u64(w, entries.len() as u64)?;
    put_u64(w, max_seq_len as u64)?;
    for e in entries {
        let s = &e.sequence;
        put_u64(w, s.file.len() as u64)?;
        w.write_all(s.file.as_bytes())?;
        w.write_all(&e.key)?;
        put_u64(w, s.bin as u64)?;
        put_u64(w, s.condition.len() as u64)?;
        for v in &s.condition {
            w.write_all(&v.to_le_bytes())?;
        }
        put_u64(w, s.code.len() as u64)?;
        for t in s.code.tuples() {
            put_u64(w, t.from as u64)?;
            put_u64(w, t.to as u64)?;
            w.write_all(&t.from_label.to_le_bytes())?;
            w.write_all(&t.edge_label.to_le_bytes())?;
            w.write_all(&t.to_label.to_le_bytes())?;
        }
    }
    Ok(())
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

fn get<const N: usize, R: Read>(r: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn get_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    get::<8, _>(r).map(u64::from_le_bytes)
}

fn get_len<R: Read>(r: &mut R) -> io::Result<usize> {
    // Lengths beyond this are corruption, not data.
    let v = get_u64(r)?;
    if v > 1 << 32 {
        return Err(bad("implausible length"));
    }
    Ok(v as usize)
}

fn get_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    get::<8, _>(r).map(f64::from_le_bytes)
}

fn read_cache<R: Read>(r: &mut R) -> io::Result<(Vec<CacheEntry>, usize)> {
    let mut r = io::BufReader::new(r);
    if &get::<8, _>(&mut r)? != MAGIC {
        return Err(bad("not a sequence cache"));
    }
    let count = get_len(&mut r)?;
    let max_seq_len = get_len(&mut r)?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = get_len(&mut r)?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let file = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
        let key = get::<32, _>(&mut r)?;
        let bin = get_len(&mut r)?;
        let width = get_len(&mut r)?;
        let condition = (0..width)
            .map(|_| get_f64(&mut r))
            .collect::<io::Result<_>>()?;
        let tuples = get_len(&mut r)?;
        let mut code = Vec::with_capacity(tuples.min(1 << 16));
        for _ in 0..tuples {
            code.push(EdgeTuple {
                from: get_len(&mut r)?,
                to: get_len(&mut r)?,
                from_label: get_f64(&mut r)?,
                edge_label: get::<4, _>(&mut r).map(u32::from_le_bytes)?,
                to_label: get_f64(&mut r)?,
            });
        }
        entries.push(CacheEntry {
            key,
            sequence: Sequence {
                file,
                bin,
                condition,
                code: DfsCode::new(code),
            },
        });
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok((entries, max_seq_len))
}
