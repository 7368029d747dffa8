//! Minimum DFS codes: a canonical serialization of a connected labeled graph
//! as a sequence of 5-tuples `(t_u, t_v, L(u), L(e), L(v))`.
//!
//! Timestamps are DFS discovery indices. A tuple with `t_u < t_v` is a
//! forward (tree) edge that discovers `t_v`; one with `t_v < t_u` is a
//! backward edge closing a cycle. Codes are compared with the gSpan order,
//! under which the smallest code over all DFS traversals is a canonical form:
//! two graphs are isomorphic (respecting node labels) iff their minimum codes
//! are equal.
//!
//! The minimum is found by growing the code one tuple at a time, keeping
//! every partial embedding that realizes the current prefix and always
//! extending with the smallest possible next tuple. Embeddings that agree on
//! the rightmost path and on the visited node set have identical futures and
//! are merged. [`all_dfs_codes`] enumerates traversals exhaustively and is
//! kept as a test oracle for small graphs.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::Graph;

/// The single edge label: edges carry no information.
pub const UNLABELED_EDGE: u32 = 0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DfsCodeError {
    #[error("graph must have at least 2 nodes")]
    TooSmall,
    #[error("graph is disconnected")]
    Disconnected,
    #[error("graph has no node labels")]
    Unlabeled,
    #[error("invalid code at tuple {position}: {reason}")]
    InvalidCode { position: usize, reason: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("minimum-code search exceeded {limit} partial embeddings")]
    SearchLimit { limit: usize },
}

/// One edge of a DFS code.
#[derive(Clone, Copy, Debug)]
pub struct EdgeTuple {
    pub from: usize,
    pub to: usize,
    pub from_label: f64,
    pub edge_label: u32,
    pub to_label: f64,
}

impl EdgeTuple {
    pub fn new(from: usize, to: usize, from_label: f64, to_label: f64) -> Self {
        Self {
            from,
            to,
            from_label,
            edge_label: UNLABELED_EDGE,
            to_label,
        }
    }

    pub fn is_forward(&self) -> bool {
        self.from < self.to
    }

    pub fn is_backward(&self) -> bool {
        self.to < self.from
    }
}

/// Labels compare exactly (they are reciprocals of small integers).
impl PartialEq for EdgeTuple {
    fn eq(&self, other: &Self) -> bool {
        self.from == other.from
            && self.to == other.to
            && self.from_label.total_cmp(&other.from_label).is_eq()
            && self.edge_label == other.edge_label
            && self.to_label.total_cmp(&other.to_label).is_eq()
    }
}

impl Eq for EdgeTuple {}

/// gSpan precedence between two tuples at the same code position.
///
/// Backward edges from the rightmost vertex precede forward extensions;
/// among forward edges, the one grown from the deeper node comes first; ties
/// on the timestamp pair fall through to `L(u)`, `L(e)`, `L(v)`.
pub fn compare_tuples(a: &EdgeTuple, b: &EdgeTuple) -> Ordering {
    let by_time = match (a.is_forward(), b.is_forward()) {
        (true, true) => a.to.cmp(&b.to).then(b.from.cmp(&a.from)),
        (false, false) => a.from.cmp(&b.from).then(a.to.cmp(&b.to)),
        (false, true) => {
            if a.from < b.to {
                Ordering::Less
            } else {
                Ordering::Greater
            }
        }
        (true, false) => {
            if a.to <= b.from {
                Ordering::Less
            } else {
                Ordering::Greater
            }
        }
    };
    by_time
        .then(a.from_label.total_cmp(&b.from_label))
        .then(a.edge_label.cmp(&b.edge_label))
        .then(a.to_label.total_cmp(&b.to_label))
}

/// A sequence of [`EdgeTuple`]s. The end-of-sequence marker is not stored;
/// it is added when a code is serialized or tokenized.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DfsCode {
    tuples: Vec<EdgeTuple>,
}

impl DfsCode {
    pub fn new(tuples: Vec<EdgeTuple>) -> Self {
        Self { tuples }
    }

    pub fn tuples(&self) -> &[EdgeTuple] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Number of distinct timestamps (nodes) referenced.
    pub fn node_count(&self) -> usize {
        self.tuples
            .iter()
            .map(|t| t.from.max(t.to) + 1)
            .max()
            .unwrap_or(0)
    }

    /// One tuple per line (`t_u t_v l_u l_e l_v`) followed by a final `EOS`
    /// line. Labels use the shortest representation that parses back to the
    /// identical `f64`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tuples {
            writeln!(
                out,
                "{} {} {} {} {}",
                t.from, t.to, t.from_label, t.edge_label, t.to_label
            )
            .unwrap();
        }
        out.push_str("EOS\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DfsCodeError> {
        let err = |line: usize, message: String| DfsCodeError::Parse { line, message };
        let mut tuples = Vec::new();
        let mut terminated = false;
        for (i, line) in text.lines().enumerate() {
            let no = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if terminated {
                return Err(err(no, "content after EOS".into()));
            }
            if line == "EOS" {
                terminated = true;
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [from, to, lu, le, lv] = fields[..] else {
                return Err(err(no, format!("expected 5 fields, got {}", fields.len())));
            };
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| err(no, format!("`{s}`: {e}")))
            };
            let real = |s: &str| s.parse::<f64>().map_err(|e| err(no, format!("`{s}`: {e}")));
            tuples.push(EdgeTuple {
                from: int(from)?,
                to: int(to)?,
                from_label: real(lu)?,
                edge_label: le
                    .parse::<u32>()
                    .map_err(|e| err(no, format!("`{le}`: {e}")))?,
                to_label: real(lv)?,
            });
        }
        if !terminated {
            return Err(err(text.lines().count(), "missing EOS".into()));
        }
        Ok(Self { tuples })
    }
}

impl Ord for DfsCode {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.tuples.iter().zip(&other.tuples) {
            match compare_tuples(a, b) {
                Ordering::Equal => {}
                ord => return ord,
            }
        }
        self.tuples.len().cmp(&other.tuples.len())
    }
}

impl PartialOrd for DfsCode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn encodable_labels(g: &Graph) -> Result<&[f64], DfsCodeError> {
    if g.node_count() < 2 {
        return Err(DfsCodeError::TooSmall);
    }
    if !g.is_connected() {
        return Err(DfsCodeError::Disconnected);
    }
    g.labels().ok_or(DfsCodeError::Unlabeled)
}

/// Partition of the nodes into twin classes: nodes with equal labels and
/// either equal open neighborhoods (pairwise non-adjacent) or equal closed
/// neighborhoods (pairwise adjacent). Any permutation inside a class is a
/// label-preserving automorphism.
struct TwinClasses {
    class_of: Vec<Option<usize>>,
    members: Vec<Vec<usize>>,
}

impl TwinClasses {
    fn new(g: &Graph, labels: &[f64]) -> Self {
        let n = g.node_count();
        let mut groups: HashMap<(bool, u64, Vec<usize>), Vec<usize>> = HashMap::new();
        for v in 0..n {
            let open = g.neighbors(v).to_vec();
            groups
                .entry((false, labels[v].to_bits(), open))
                .or_default()
                .push(v);
            let mut closed = g.neighbors(v).to_vec();
            let pos = closed.binary_search(&v).unwrap_err();
            closed.insert(pos, v);
            groups
                .entry((true, labels[v].to_bits(), closed))
                .or_default()
                .push(v);
        }
        let mut members: Vec<Vec<usize>> = groups.into_values().filter(|m| m.len() > 1).collect();
        members.sort();
        let mut class_of = vec![None; n];
        for (c, m) in members.iter().enumerate() {
            for &v in m {
                // Open- and closed-neighborhood twin classes never overlap.
                debug_assert!(class_of[v].is_none());
                class_of[v] = Some(c);
            }
        }
        Self { class_of, members }
    }

    /// Applies the automorphism that sends the nodes of each class, in
    /// timestamp order, to the smallest members of that class.
    fn canonicalize(&self, e: &mut Embedding) {
        if self.members.is_empty() {
            return;
        }
        let mut used = vec![0usize; self.members.len()];
        for w in e.visited.iter_mut() {
            *w = 0;
        }
        for ts in 0..e.nodes.len() {
            let v = e.nodes[ts];
            let v = match self.class_of[v] {
                Some(c) => {
                    used[c] += 1;
                    self.members[c][used[c] - 1]
                }
                None => v,
            };
            e.nodes[ts] = v;
            e.visited[v / 64] |= 1 << (v % 64);
        }
    }
}

/// Partial mapping of timestamps onto graph nodes.
#[derive(Clone)]
struct Embedding {
    nodes: Vec<usize>,
    visited: Vec<u64>,
}

impl Embedding {
    fn new(node_count: usize) -> Self {
        Self {
            nodes: Vec::new(),
            visited: vec![0; node_count.div_ceil(64)],
        }
    }

    fn push(&mut self, v: usize) {
        self.nodes.push(v);
        self.visited[v / 64] |= 1 << (v % 64);
    }

    fn is_visited(&self, v: usize) -> bool {
        self.visited[v / 64] & (1 << (v % 64)) != 0
    }
}

/// Default bound on live partial embeddings in [`min_dfs_code`], roughly a
/// gigabyte for 25-node graphs.
pub const DEFAULT_SEARCH_LIMIT: usize = 2_000_000;

/// The canonical (minimum) DFS code of a connected labeled graph.
///
/// Runs a rightmost-extension search that keeps every partial embedding
/// consistent with the best prefix so far, merging embeddings that are equal
/// up to swapping twin nodes. Sparse and clustered graphs stay small, but
/// near-complete graphs with few distinct labels can need exponentially many
/// embeddings; those fail with [`DfsCodeError::SearchLimit`] instead of
/// exhausting memory. See [`min_dfs_code_with_limit`].
pub fn min_dfs_code(g: &Graph) -> Result<DfsCode, DfsCodeError> {
    min_dfs_code_with_limit(g, DEFAULT_SEARCH_LIMIT)
}

/// [`min_dfs_code`] with an explicit bound on live partial embeddings.
pub fn min_dfs_code_with_limit(g: &Graph, limit: usize) -> Result<DfsCode, DfsCodeError> {
    let labels = encodable_labels(g)?;
    let n = g.node_count();

    let mut first: Option<(f64, f64)> = None;
    for u in 0..n {
        for &v in g.neighbors(u) {
            let key = (labels[u], labels[v]);
            let smaller =
                first.is_none_or(|(a, b)| key.0.total_cmp(&a).then(key.1.total_cmp(&b)).is_lt());
            if smaller {
                first = Some(key);
            }
        }
    }
    let (l0, l1) = first.expect("connected graph with >= 2 nodes has an edge");
    let twins = TwinClasses::new(g, labels);
    let mut embeddings = Vec::new();
    let mut seen = HashSet::new();
    for u in 0..n {
        for &v in g.neighbors(u) {
            if labels[u].total_cmp(&l0).is_eq() && labels[v].total_cmp(&l1).is_eq() {
                let mut e = Embedding::new(n);
                e.push(u);
                e.push(v);
                twins.canonicalize(&mut e);
                if seen.insert(e.nodes.clone()) {
                    embeddings.push(e);
                }
            }
        }
    }

    let mut code = vec![EdgeTuple::new(0, 1, l0, l1)];
    let mut ts_labels = vec![l0, l1];
    // Timestamps on the rightmost path, root first.
    let mut path: Vec<usize> = vec![0, 1];
    // Last backward target emitted from the current rightmost vertex.
    let mut last_back: Option<usize> = None;

    while code.len() < g.edge_count() {
        let rightmost = *path.last().expect("path is never empty");

        // Backward edges: smallest target timestamp first.
        let candidates = &path[..path.len() - 2];
        let best_back = embeddings
            .iter()
            .filter_map(|e| {
                let x = e.nodes[rightmost];
                candidates
                    .iter()
                    .copied()
                    .filter(|&p| last_back.is_none_or(|b| p > b))
                    .find(|&p| g.has_edge(x, e.nodes[p]))
            })
            .min();
        if let Some(p) = best_back {
            embeddings.retain(|e| g.has_edge(e.nodes[rightmost], e.nodes[p]));
            code.push(EdgeTuple::new(
                rightmost,
                p,
                ts_labels[rightmost],
                ts_labels[p],
            ));
            last_back = Some(p);
            continue;
        }

        // Forward edges: deepest path node first, then the smallest new label.
        let mut extended = false;
        for depth in (0..path.len()).rev() {
            let p = path[depth];
            let mut best_label: Option<f64> = None;
            for e in &embeddings {
                for &y in g.neighbors(e.nodes[p]) {
                    if !e.is_visited(y)
                        && best_label.is_none_or(|b| labels[y].total_cmp(&b).is_lt())
                    {
                        best_label = Some(labels[y]);
                    }
                }
            }
            let Some(label) = best_label else { continue };

            let new_ts = ts_labels.len();
            let mut next = Vec::new();
            let mut seen = HashSet::new();
            for e in &embeddings {
                for &y in g.neighbors(e.nodes[p]) {
                    if e.is_visited(y) || labels[y].total_cmp(&label).is_ne() {
                        continue;
                    }
                    let mut grown = e.clone();
                    grown.push(y);
                    twins.canonicalize(&mut grown);
                    let key: (Vec<usize>, Vec<u64>) = (
                        path[..=depth]
                            .iter()
                            .map(|&t| grown.nodes[t])
                            .chain([grown.nodes[new_ts]])
                            .collect(),
                        grown.visited.clone(),
                    );
                    if seen.insert(key) {
                        if next.len() == limit {
                            return Err(DfsCodeError::SearchLimit { limit });
                        }
                        next.push(grown);
                    }
                }
            }
            embeddings = next;
            code.push(EdgeTuple::new(p, new_ts, ts_labels[p], label));
            ts_labels.push(label);
            path.truncate(depth + 1);
            path.push(new_ts);
            last_back = None;
            extended = true;
            break;
        }
        assert!(extended, "connected graph always admits an extension");
    }
    Ok(DfsCode::new(code))
}

/// Every distinct DFS code of `g`, one per (start node, neighbor visiting
/// order) traversal, sorted ascending. Exponential; meant for small graphs.
pub fn all_dfs_codes(g: &Graph) -> Result<Vec<DfsCode>, DfsCodeError> {
    let labels = encodable_labels(g)?;
    let n = g.node_count();
    let mut out = Vec::new();
    for start in 0..n {
        let mut state = Traversal {
            timestamp: vec![None; n],
            order: Vec::new(),
            stack: Vec::new(),
            code: Vec::new(),
        };
        state.timestamp[start] = Some(0);
        state.order.push(start);
        state.stack.push(start);
        enumerate(g, labels, state, &mut out);
    }
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Clone)]
struct Traversal {
    timestamp: Vec<Option<usize>>,
    order: Vec<usize>,
    stack: Vec<usize>,
    code: Vec<EdgeTuple>,
}

fn enumerate(g: &Graph, labels: &[f64], mut state: Traversal, out: &mut Vec<DfsCode>) {
    // Backtrack to the deepest node that still has an undiscovered neighbor.
    while let Some(&top) = state.stack.last() {
        if g.neighbors(top)
            .iter()
            .any(|&y| state.timestamp[y].is_none())
        {
            break;
        }
        state.stack.pop();
    }
    let Some(&top) = state.stack.last() else {
        out.push(DfsCode::new(state.code));
        return;
    };
    let t_top = state.timestamp[top].expect("stack nodes are discovered");
    for &y in g.neighbors(top) {
        if state.timestamp[y].is_some() {
            continue;
        }
        let mut next = state.clone();
        let t_y = next.order.len();
        next.timestamp[y] = Some(t_y);
        next.order.push(y);
        next.stack.push(y);
        next.code
            .push(EdgeTuple::new(t_top, t_y, labels[top], labels[y]));
        let mut back: Vec<(usize, usize)> = g
            .neighbors(y)
            .iter()
            .filter(|&&w| w != top)
            .filter_map(|&w| next.timestamp[w].map(|t| (t, w)))
            .collect();
        back.sort_unstable();
        for (t_w, w) in back {
            next.code
                .push(EdgeTuple::new(t_y, t_w, labels[y], labels[w]));
        }
        enumerate(g, labels, next, out);
    }
}

/// Incremental structural validation shared by [`decode`] and
/// [`validate_partial`].
#[derive(Default)]
struct CodeBuilder {
    labels: Vec<f64>,
    edges: Vec<(usize, usize)>,
    edge_set: HashSet<(usize, usize)>,
}

impl CodeBuilder {
    fn push(&mut self, t: &EdgeTuple) -> Result<(), String> {
        if t.edge_label != UNLABELED_EDGE {
            return Err(format!(
                "edge label {} is not the unlabeled sentinel",
                t.edge_label
            ));
        }
        if !t.from_label.is_finite() || !t.to_label.is_finite() {
            return Err("non-finite node label".into());
        }
        if self.labels.is_empty() {
            if (t.from, t.to) != (0, 1) {
                return Err(format!(
                    "first tuple must be (0, 1), got ({}, {})",
                    t.from, t.to
                ));
            }
            self.labels = vec![t.from_label, t.to_label];
            self.insert_edge(0, 1)?;
            return Ok(());
        }
        let max = self.labels.len() - 1;
        if t.from > max {
            return Err(format!("timestamp {} has not been discovered", t.from));
        }
        self.check_label(t.from, t.from_label)?;
        if t.to == max + 1 {
            self.labels.push(t.to_label);
        } else if t.to < t.from {
            self.check_label(t.to, t.to_label)?;
        } else if t.to > max + 1 {
            return Err(format!(
                "forward edge skips to timestamp {} after {max}",
                t.to
            ));
        } else {
            return Err(format!(
                "({}, {}) is neither a forward edge to {} nor a backward edge",
                t.from,
                t.to,
                max + 1
            ));
        }
        self.insert_edge(t.from, t.to)
    }

    fn check_label(&self, ts: usize, label: f64) -> Result<(), String> {
        if self.labels[ts].total_cmp(&label).is_ne() {
            return Err(format!(
                "timestamp {ts} labeled {label}, previously {}",
                self.labels[ts]
            ));
        }
        Ok(())
    }

    fn insert_edge(&mut self, u: usize, v: usize) -> Result<(), String> {
        let key = (u.min(v), u.max(v));
        if !self.edge_set.insert(key) {
            return Err(format!("duplicate edge ({}, {})", key.0, key.1));
        }
        self.edges.push(key);
        Ok(())
    }
}

/// Rebuilds the graph a code describes: node `i` is timestamp `i`.
pub fn decode(code: &DfsCode) -> Result<Graph, DfsCodeError> {
    if code.is_empty() {
        return Err(DfsCodeError::InvalidCode {
            position: 0,
            reason: "empty code".into(),
        });
    }
    let mut builder = CodeBuilder::default();
    for (position, t) in code.tuples().iter().enumerate() {
        builder
            .push(t)
            .map_err(|reason| DfsCodeError::InvalidCode { position, reason })?;
    }
    let mut g = Graph::from_edges(builder.labels.len(), &builder.edges)
        .expect("builder rejects invalid edges");
    g.set_labels(builder.labels)
        .expect("one finite label per node");
    Ok(g)
}

/// True iff `tuples` could be the prefix of a code accepted by [`decode`].
pub fn validate_partial(tuples: &[EdgeTuple]) -> bool {
    let mut builder = CodeBuilder::default();
    tuples.iter().all(|t| builder.push(t).is_ok())
}
