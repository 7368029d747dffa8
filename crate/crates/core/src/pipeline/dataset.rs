//! Tolerance-binned CNN datasets.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! graphs/b{bin}_{index}.txt   reciprocal-degree labeled graphs
//! manifest.csv                file,bin,u,seed,exponent,clustering
//! bins.csv                    bin,target_exponent,target_clustering,
//!                             tol_exponent,tol_clustering,count,u,
//!                             probe_acceptance,draws
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{derive_seed, io_err, par_map, PipelineError};
use crate::cnn::{cnn_generate, CnnParams};
use crate::features::{condition_vector, FeatureVector};
use crate::graph::{format_significant, Graph};

/// Probe grid for the conversion probability: `u = k / 20`, `k = 1..=19`.
const PROBE_STEPS: usize = 19;
const FILL_BLOCK: usize = 1024;
pub(super) const MANIFEST: &str = "manifest.csv";
const BINS: &str = "bins.csv";
const MANIFEST_HEADER: &str = "file,bin,u,seed,exponent,clustering";
const BINS_HEADER: &str =
    "bin,target_exponent,target_clustering,tol_exponent,tol_clustering,count,u,probe_acceptance,draws";

#[derive(Clone, Debug, PartialEq)]
pub struct Bin {
    pub target: FeatureVector,
    /// Per-component absolute tolerance; may be infinite.
    pub tolerance: Vec<f64>,
    pub count: usize,
}

impl Bin {
    pub fn new(exponent: f64, clustering: f64, count: usize) -> Self {
        Self {
            target: FeatureVector::pair(exponent, clustering),
            tolerance: vec![0.15, 0.05],
            count,
        }
    }

    pub fn accepts(&self, features: &FeatureVector) -> bool {
        features.within(&self.target, &self.tolerance)
    }

    /// Largest per-component distance in units of tolerance; 0 inside
    /// infinite tolerances.
    fn distance(&self, features: &FeatureVector) -> f64 {
        features
            .values()
            .iter()
            .zip(self.target.values())
            .zip(&self.tolerance)
            .map(|((f, t), tol)| {
                if tol.is_infinite() {
                    0.0
                } else {
                    (f - t).abs() / tol.max(f64::MIN_POSITIVE)
                }
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub bins: Vec<Bin>,
    pub node_count: usize,
    /// Draws per probed `u` when choosing each bin's conversion probability.
    pub probe_draws: usize,
    /// Draws after which a bin accepting fewer than `min_acceptance` of
    /// them is declared unfillable.
    pub budget: usize,
    pub min_acceptance: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            bins: vec![
                Bin::new(-1.1, 0.2, 400),
                Bin::new(-0.8, 0.4, 400),
                Bin::new(-0.5, 0.6, 400),
            ],
            node_count: 25,
            probe_draws: 500,
            budget: 100_000,
            min_acceptance: 1e-4,
        }
    }
}

impl DatasetSpec {
    /// Parses `--bins`: either `default` or `;`-separated bins of the form
    /// `exponent,clustering,count[,tol_exponent,tol_clustering]`.
    pub fn parse_bins(s: &str) -> Result<Vec<Bin>, PipelineError> {
        if s.trim() == "default" {
            return Ok(Self::default().bins);
        }
        s.split(';')
            .filter(|part| !part.trim().is_empty())
            .map(|part| {
                let fields: Vec<&str> = part.split(',').map(str::trim).collect();
                if fields.len() != 3 && fields.len() != 5 {
                    return Err(PipelineError::Spec(format!(
                        "bin `{part}` needs 3 or 5 comma-separated fields"
                    )));
                }
                let real = |f: &str| {
                    f.parse::<f64>()
                        .map_err(|_| PipelineError::Spec(format!("`{f}` is not a number")))
                };
                let count = fields[2]
                    .parse::<usize>()
                    .map_err(|_| PipelineError::Spec(format!("`{}` is not a count", fields[2])))?;
                let mut bin = Bin::new(real(fields[0])?, real(fields[1])?, count);
                if fields.len() == 5 {
                    bin.tolerance = vec![real(fields[3])?, real(fields[4])?];
                }
                Ok(bin)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Spec(m));
        if self.bins.is_empty() {
            return fail("no bins".into());
        }
        if self.node_count < 3 {
            return fail(format!(
                "{} nodes cannot produce two distinct degrees",
                self.node_count
            ));
        }
        if self.probe_draws == 0 || self.budget == 0 {
            return fail("probe and budget draw counts must be positive".into());
        }
        for (i, b) in self.bins.iter().enumerate() {
            if b.count == 0 {
                return fail(format!("bin {i} has count 0"));
            }
            if b.target.len() != 2 || b.target.values().iter().any(|v| !v.is_finite()) {
                return fail(format!(
                    "bin {i} needs a finite [exponent, clustering] target"
                ));
            }
            if b.tolerance.len() != 2 || b.tolerance.iter().any(|t| t.is_nan() || *t < 0.0) {
                return fail(format!("bin {i} needs two non-negative tolerances"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Path relative to the dataset directory.
    pub file: String,
    pub bin: usize,
    pub u: f64,
    pub seed: u64,
    pub features: FeatureVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinSummary {
    pub u: f64,
    pub probe_acceptance: f64,
    /// Fill-phase draws consumed.
    pub draws: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    pub bins: Vec<BinSummary>,
    pub entries: Vec<ManifestEntry>,
}

fn probe_u(k: usize) -> f64 {
    (k + 1) as f64 / 20.0
}

fn draw(nodes: usize, u: f64, seed: u64) -> (Graph, Option<FeatureVector>) {
    let params = CnnParams::new(nodes, u, seed).expect("u is a probe value in (0, 1)");
    let g = cnn_generate(&params);
    let features = condition_vector(&g).ok();
    (g, features)
}

/// Picks each bin's `u` from a probe sweep: the highest acceptance wins,
/// ties go to the smaller `u`. Bins no probe hit fall back to the `u` that
/// produced the nearest graph.
fn choose_u(spec: &DatasetSpec, seed: u64) -> Result<Vec<(f64, f64)>, PipelineError> {
    let stream = derive_seed(seed, 0);
    let per = spec.probe_draws;
    let features = par_map(PROBE_STEPS * per, |i| {
        draw(
            spec.node_count,
            probe_u(i / per),
            derive_seed(stream, i as u64),
        )
        .1
    })?;
    Ok(spec
        .bins
        .iter()
        .map(|bin| {
            let mut best = (0usize, 0usize);
            let mut nearest = (0usize, f64::INFINITY);
            for k in 0..PROBE_STEPS {
                let mut hits = 0;
                for f in features[k * per..(k + 1) * per].iter().flatten() {
                    if bin.accepts(f) {
                        hits += 1;
                    }
                    let d = bin.distance(f);
                    if d < nearest.1 {
                        nearest = (k, d);
                    }
                }
                if hits > best.1 {
                    best = (k, hits);
                }
            }
            let k = if best.1 > 0 { best.0 } else { nearest.0 };
            (probe_u(k), best.1 as f64 / per as f64)
        })
        .collect())
}

/// Rejection-samples every bin and writes the dataset under `out`.
pub fn build_dataset(
    spec: &DatasetSpec,
    seed: u64,
    out: &Path,
) -> Result<DatasetSummary, PipelineError> {
    spec.validate()?;
    let choices = choose_u(spec, seed)?;
    let graph_dir = out.join("graphs");
    fs::create_dir_all(&graph_dir).map_err(io_err(&graph_dir))?;

    let mut summaries = Vec::new();
    let mut entries = Vec::new();
    for (b, (bin, &(u, probe_acceptance))) in spec.bins.iter().zip(&choices).enumerate() {
        let stream = derive_seed(seed, 1 + b as u64);
        let mut accepted: Vec<(Graph, u64, FeatureVector)> = Vec::new();
        let mut nearest: Option<(f64, FeatureVector)> = None;
        let mut draws = 0usize;
        'fill: loop {
            let block = par_map(FILL_BLOCK, |j| {
                let s = derive_seed(stream, (draws + j) as u64);
                let (g, f) = draw(spec.node_count, u, s);
                (g, s, f)
            })?;
            for (g, s, f) in block {
                draws += 1;
                let Some(f) = f else { continue };
                if bin.accepts(&f) {
                    accepted.push((g, s, f));
                    if accepted.len() == bin.count {
                        break 'fill;
                    }
                } else {
                    let d = bin.distance(&f);
                    if nearest.as_ref().is_none_or(|(best, _)| d < *best) {
                        nearest = Some((d, f));
                    }
                }
            }
            if draws >= spec.budget && (accepted.len() as f64) < spec.min_acceptance * draws as f64
            {
                return Err(PipelineError::BinUnfillable {
                    bin: b,
                    target: bin.target.clone(),
                    u,
                    draws,
                    accepted: accepted.len(),
                    nearest: nearest.map_or_else(|| FeatureVector::new(vec![f64::NAN; 2]), |n| n.1),
                });
            }
        }
        for (i, (g, s, f)) in accepted.into_iter().enumerate() {
            let file = format!("graphs/b{b}_{i:04}.txt");
            let path = out.join(&file);
            let labeled = g.relabel_reciprocal_degree()?;
            fs::write(&path, labeled.to_text()).map_err(io_err(&path))?;
            entries.push(ManifestEntry {
                file,
                bin: b,
                u,
                seed: s,
                features: f,
            });
        }
        summaries.push(BinSummary {
            u,
            probe_acceptance,
            draws,
        });
    }

    write_manifest(&out.join(MANIFEST), &entries)?;
    let mut bins_csv = format!("{BINS_HEADER}\n");
    for (b, (bin, s)) in spec.bins.iter().zip(&summaries).enumerate() {
        let t = bin.target.values();
        writeln!(
            bins_csv,
            "{b},{},{},{},{},{},{},{},{}",
            t[0],
            t[1],
            bin.tolerance[0],
            bin.tolerance[1],
            bin.count,
            s.u,
            s.probe_acceptance,
            s.draws
        )
        .unwrap();
    }
    let path = out.join(BINS);
    fs::write(&path, bins_csv).map_err(io_err(&path))?;
    Ok(DatasetSummary {
        bins: summaries,
        entries,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), PipelineError> {
    let mut text = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        writeln!(
            text,
            "{},{},{},{},{},{}",
            e.file,
            e.bin,
            e.u,
            e.seed,
            e.features.exponent(),
            e.features.clustering()
        )
        .unwrap();
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Reads a headed CSV into rows of fields, checking the header and width.
fn read_csv(path: &Path, header: &str) -> Result<Vec<Vec<String>>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let format = |message: String| PipelineError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(format(format!("expected header `{header}`")));
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let fields: Vec<String> = l.split(',').map(|f| f.trim().to_string()).collect();
            if fields.len() == width {
                Ok(fields)
            } else {
                Err(format(format!("line {}: expected {width} fields", i + 2)))
            }
        })
        .collect()
}

fn parse_field<T: std::str::FromStr>(path: &Path, field: &str) -> Result<T, PipelineError> {
    field.parse().map_err(|_| PipelineError::Format {
        path: path.to_path_buf(),
        message: format!("bad field `{field}`"),
    })
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, PipelineError> {
    let path = dir.join(MANIFEST);
    read_csv(&path, MANIFEST_HEADER)?
        .into_iter()
        .map(|f| {
            Ok(ManifestEntry {
                file: f[0].clone(),
                bin: parse_field(&path, &f[1])?,
                u: parse_field(&path, &f[2])?,
                seed: parse_field(&path, &f[3])?,
                features: FeatureVector::pair(
                    parse_field(&path, &f[4])?,
                    parse_field(&path, &f[5])?,
                ),
            })
        })
        .collect()
}

fn read_bins(dir: &Path) -> Result<Vec<Bin>, PipelineError> {
    let path = dir.join(BINS);
    read_csv(&path, BINS_HEADER)?
        .into_iter()
        .map(|f| {
            Ok(Bin {
                target: FeatureVector::pair(parse_field(&path, &f[1])?, parse_field(&path, &f[2])?),
                tolerance: vec![parse_field(&path, &f[3])?, parse_field(&path, &f[4])?],
                count: parse_field(&path, &f[5])?,
            })
        })
        .collect()
}

/// Re-reads every graph of a dataset and checks it against the manifest and
/// its bin: features recomputed within 1e-9 of the stored ones, inside the
/// bin tolerance, labels equal to reciprocal degrees, and bin counts exact.
/// Returns the number of graphs checked.
pub fn verify_dataset(dir: &Path) -> Result<usize, PipelineError> {
    let bins = read_bins(dir)?;
    let entries = read_manifest(dir)?;
    let mut counts = vec![0usize; bins.len()];
    for e in &entries {
        let path: PathBuf = dir.join(&e.file);
        let bad = |message: String| PipelineError::Format {
            path: path.clone(),
            message,
        };
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let g = Graph::from_text(&text)?;
        if !g.is_connected() {
            return Err(bad("graph is disconnected".into()));
        }
        let relabeled = g.relabel_reciprocal_degree()?;
        let labels = g.labels().ok_or_else(|| bad("graph is unlabeled".into()))?;
        for (a, b) in labels.iter().zip(relabeled.labels().unwrap()) {
            // File labels carry six significant digits.
            if format_significant(*a, 6) != format_significant(*b, 6) {
                return Err(bad(format!("label {a} is not a reciprocal degree ({b})")));
            }
        }
        let f = condition_vector(&g)?;
        for (x, y) in f.values().iter().zip(e.features.values()) {
            if (x - y).abs() > 1e-9 {
                return Err(bad(format!(
                    "features {f} differ from the manifest's {}",
                    e.features
                )));
            }
        }
        let bin = bins
            .get(e.bin)
            .ok_or_else(|| bad(format!("bin {} does not exist", e.bin)))?;
        if !bin.accepts(&f) {
            return Err(bad(format!("features {f} fall outside bin {}", e.bin)));
        }
        counts[e.bin] += 1;
    }
    for (b, (bin, &c)) in bins.iter().zip(&counts).enumerate() {
        if bin.count != c {
            return Err(PipelineError::Format {
                path: dir.join(MANIFEST),
                message: format!("bin {b} holds {c} graphs, expected {}", bin.count),
            });
        }
    }
    Ok(entries.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(bins: Vec<Bin>) -> DatasetSpec {
        DatasetSpec {
            bins,
            probe_draws: 40,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn parses_bin_specs() {
        assert_eq!(
            DatasetSpec::parse_bins("default").unwrap(),
            DatasetSpec::default().bins
        );
        let bins = DatasetSpec::parse_bins("-1.1,0.2,10; -0.5,0.6,5,inf,0.1").unwrap();
        assert_eq!(bins.len(), 2);
        assert_eq!(bins[0].tolerance, vec![0.15, 0.05]);
        assert_eq!(bins[1].count, 5);
        assert!(bins[1].tolerance[0].is_infinite());
        assert!(DatasetSpec::parse_bins("-1.1,0.2").is_err());
        assert!(DatasetSpec::parse_bins("-1.1,x,3").is_err());
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(small(vec![Bin::new(-1.0, 0.2, 0)]).validate().is_err());
        let spec = DatasetSpec {
            node_count: 2,
            ..DatasetSpec::default()
        };
        assert!(spec.validate().is_err());
        let mut bin = Bin::new(-1.0, 0.2, 1);
        bin.tolerance = vec![f64::NAN, 0.1];
        assert!(small(vec![bin]).validate().is_err());
    }

    #[test]
    fn infinite_tolerance_takes_the_first_draw() {
        let dir = tempfile::tempdir().unwrap();
        let mut bin = Bin::new(-1.0, 0.3, 1);
        bin.tolerance = vec![f64::INFINITY, f64::INFINITY];
        let spec = small(vec![bin]);
        let summary = build_dataset(&spec, 3, dir.path()).unwrap();
        assert_eq!(summary.bins[0].draws, 1);
        assert_eq!(summary.bins[0].probe_acceptance, 1.0);
        let e = &summary.entries[0];
        assert_eq!(e.seed, derive_seed(derive_seed(3, 1), 0));
        assert_eq!(verify_dataset(dir.path()).unwrap(), 1);
    }

    #[test]
    fn unreachable_bin_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut bin = Bin::new(3.0, 0.99, 2);
        bin.tolerance = vec![0.01, 0.001];
        let spec = DatasetSpec {
            budget: 2048,
            ..small(vec![bin])
        };
        match build_dataset(&spec, 1, dir.path()) {
            Err(PipelineError::BinUnfillable {
                bin: 0,
                accepted: 0,
                draws,
                nearest,
                ..
            }) => {
                assert_eq!(draws, 2048);
                assert!(nearest.values().iter().all(|v| v.is_finite()));
            }
            other => panic!("expected BinUnfillable, got {other:?}"),
        }
    }

    #[test]
    fn small_dataset_round_trips_through_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(vec![Bin::new(-1.1, 0.2, 6), Bin::new(-0.5, 0.6, 4)]);
        let summary = build_dataset(&spec, 11, dir.path()).unwrap();
        assert_eq!(summary.entries.len(), 10);
        assert_eq!(read_manifest(dir.path()).unwrap(), summary.entries);
        assert_eq!(verify_dataset(dir.path()).unwrap(), 10);
        assert!(summary.bins[0].u < summary.bins[1].u);
    }

    #[test]
    fn verification_catches_tampering() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&small(vec![Bin::new(-0.8, 0.4, 3)]), 2, dir.path()).unwrap();
        let mut entries = read_manifest(dir.path()).unwrap();
        let f = &entries[1].features;
        entries[1].features = FeatureVector::pair(f.exponent() + 1e-6, f.clustering());
        write_manifest(&dir.path().join(MANIFEST), &entries).unwrap();
        assert!(verify_dataset(dir.path()).is_err());
    }
}
