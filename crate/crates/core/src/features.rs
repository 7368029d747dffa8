//! Structural features used as condition vectors: the scaling exponent of
//! the degree distribution and the average clustering coefficient.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::graph::Graph;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("degree distribution has {distinct} distinct nonzero degree(s); need at least 2 for a slope")]
    DegenerateDistribution { distinct: usize },
    #[error("invalid feature vector `{0}`")]
    Parse(String),
}

/// An ordered list of feature values. For this crate it is always
/// `[scaling_exponent, clustering_coefficient]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn pair(exponent: f64, clustering: f64) -> Self {
        Self::new(vec![exponent, clustering])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn exponent(&self) -> f64 {
        self.values[0]
    }

    pub fn clustering(&self) -> f64 {
        self.values[1]
    }

    /// Component-wise `|self - target| <= tolerance`.
    pub fn within(&self, target: &FeatureVector, tolerance: &[f64]) -> bool {
        self.values.len() == target.values.len()
            && self
                .values
                .iter()
                .zip(&target.values)
                .zip(tolerance)
                .all(|((a, b), t)| (a - b).abs() <= *t)
    }
}

impl fmt::Display for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Parses comma-separated reals, e.g. `-1.1,0.2`.
impl FromStr for FeatureVector {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let values = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| FeatureError::Parse(s.to_string()))?;
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Parse(s.to_string()));
        }
        Ok(Self::new(values))
    }
}

/// Map from degree `k >= 1` to the number of nodes with that degree.
pub fn degree_histogram(g: &Graph) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for v in 0..g.node_count() {
        let d = g.degree(v);
        if d > 0 {
            *hist.entry(d).or_insert(0) += 1;
        }
    }
    hist
}

/// Unweighted least-squares slope of `ln(count)` against `ln(k)`.
pub fn log_log_slope(hist: &BTreeMap<usize, usize>) -> Result<f64, FeatureError> {
    let points: Vec<(f64, f64)> = hist
        .iter()
        .filter(|(&k, &c)| k > 0 && c > 0)
        .map(|(&k, &c)| ((k as f64).ln(), (c as f64).ln()))
        .collect();
    if points.len() < 2 {
        return Err(FeatureError::DegenerateDistribution {
            distinct: points.len(),
        });
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in &points {
        sxy += (x - mean_x) * (y - mean_y);
        sxx += (x - mean_x) * (x - mean_x);
    }
    Ok(sxy / sxx)
}

/// Slope of the degree distribution in log-log space (negative for
/// heavy-tailed graphs).
pub fn scaling_exponent(g: &Graph) -> Result<f64, FeatureError> {
    log_log_slope(&degree_histogram(g))
}

/// Mean over all nodes of the local clustering coefficient
/// `2 T(v) / (d(v) (d(v) - 1))`, where nodes of degree below 2 contribute 0.
///
/// Local values are summed in sorted order, so relabeling the nodes cannot
/// change the result even in the last bit.
pub fn clustering_coefficient(g: &Graph) -> f64 {
    let n = g.node_count();
    if n == 0 {
        return 0.0;
    }
    let mut local: Vec<f64> = (0..n)
        .map(|v| {
            let nbrs = g.neighbors(v);
            let d = nbrs.len();
            if d < 2 {
                return 0.0;
            }
            let mut links = 0usize;
            for (i, &a) in nbrs.iter().enumerate() {
                links += nbrs[i + 1..].iter().filter(|&&b| g.has_edge(a, b)).count();
            }
            2.0 * links as f64 / (d * (d - 1)) as f64
        })
        .collect();
    local.sort_by(f64::total_cmp);
    local.iter().sum::<f64>() / n as f64
}

/// `[scaling_exponent, clustering_coefficient]`.
pub fn condition_vector(g: &Graph) -> Result<FeatureVector, FeatureError> {
    Ok(FeatureVector::pair(
        scaling_exponent(g)?,
        clustering_coefficient(g),
    ))
}
