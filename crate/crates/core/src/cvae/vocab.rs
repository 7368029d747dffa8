use crate::dfscode::{DfsCode, EdgeTuple, UNLABELED_EDGE};

use super::CvaeError;

/// Number of categorical components in one tuple: `t_u, t_v, l_u, l_e, l_v`.
pub const COMPONENTS: usize = 5;

/// One tuple as vocabulary indices, or the end-of-sequence row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenizedTuple {
    pub indices: [usize; COMPONENTS],
    pub eos: bool,
}

/// Per-component vocabularies for graphs of at most `max_nodes` nodes.
///
/// * timestamps: `0..max_nodes`, then EOS
/// * node labels: `1/k` for `k = 1..max_nodes-1` at index `k - 1`, then EOS
/// * edge labels: the unlabeled sentinel, then EOS
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabularies {
    max_nodes: usize,
}

impl Vocabularies {
    pub fn new(max_nodes: usize) -> Result<Self, CvaeError> {
        if max_nodes < 2 {
            return Err(CvaeError::Config(format!(
                "vocabulary needs at least 2 nodes, got {max_nodes}"
            )));
        }
        Ok(Self { max_nodes })
    }

    pub fn max_nodes(&self) -> usize {
        self.max_nodes
    }

    /// Vocabulary size per component.
    pub fn sizes(&self) -> [usize; COMPONENTS] {
        let n = self.max_nodes;
        [n + 1, n + 1, n, 2, n]
    }

    /// The EOS index per component (always the last one).
    pub fn eos_indices(&self) -> [usize; COMPONENTS] {
        self.sizes().map(|s| s - 1)
    }

    pub fn eos(&self) -> TokenizedTuple {
        TokenizedTuple {
            indices: self.eos_indices(),
            eos: true,
        }
    }

    /// Index of an exact reciprocal-degree label.
    pub fn label_index(&self, label: f64) -> Option<usize> {
        if !(label.is_finite() && label > 0.0) {
            return None;
        }
        let k = (1.0 / label).round();
        if k < 1.0 || k > (self.max_nodes - 1) as f64 {
            return None;
        }
        let k = k as usize;
        (1.0 / k as f64 == label).then_some(k - 1)
    }

    /// The label `1/k` stored at `index`, or `None` for EOS and out of range.
    pub fn label_value(&self, index: usize) -> Option<f64> {
        (index < self.max_nodes - 1).then(|| 1.0 / (index + 1) as f64)
    }

    pub fn tokenize_tuple(&self, t: &EdgeTuple) -> Result<TokenizedTuple, CvaeError> {
        let n = self.max_nodes;
        if t.from >= n || t.to >= n {
            return Err(CvaeError::TimestampOutOfRange {
                timestamp: t.from.max(t.to),
                max_nodes: n,
            });
        }
        if t.edge_label != UNLABELED_EDGE {
            return Err(CvaeError::UnknownEdgeLabel(t.edge_label));
        }
        let lu = self
            .label_index(t.from_label)
            .ok_or(CvaeError::UnknownLabel(t.from_label))?;
        let lv = self
            .label_index(t.to_label)
            .ok_or(CvaeError::UnknownLabel(t.to_label))?;
        Ok(TokenizedTuple {
            indices: [t.from, t.to, lu, 0, lv],
            eos: false,
        })
    }

    /// One row per tuple plus a final EOS row.
    pub fn tokenize(&self, code: &DfsCode) -> Result<Vec<TokenizedTuple>, CvaeError> {
        let mut rows = code
            .tuples()
            .iter()
            .map(|t| self.tokenize_tuple(t))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(self.eos());
        Ok(rows)
    }

    /// Converts a non-EOS row back to a tuple. Fails if any component holds
    /// an EOS or out-of-range index.
    pub fn detokenize_tuple(&self, row: &TokenizedTuple) -> Result<EdgeTuple, CvaeError> {
        let [tu, tv, lu, le, lv] = row.indices;
        let n = self.max_nodes;
        let bad = |component: usize| CvaeError::BadToken {
            component,
            index: row.indices[component],
        };
        if row.eos || tu >= n {
            return Err(bad(0));
        }
        if tv >= n {
            return Err(bad(1));
        }
        if le != 0 {
            return Err(bad(3));
        }
        let lu = self.label_value(lu).ok_or_else(|| bad(2))?;
        let lv = self.label_value(lv).ok_or_else(|| bad(4))?;
        Ok(EdgeTuple::new(tu, tv, lu, lv))
    }

    /// Inverse of [`tokenize`](Self::tokenize): rows up to the first EOS.
    pub fn detokenize(&self, rows: &[TokenizedTuple]) -> Result<DfsCode, CvaeError> {
        let end = rows
            .iter()
            .position(|r| r.eos)
            .ok_or(CvaeError::MissingEos)?;
        let tuples = rows[..end]
            .iter()
            .map(|r| self.detokenize_tuple(r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DfsCode::new(tuples))
    }
}
