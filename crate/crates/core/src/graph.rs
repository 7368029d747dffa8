//! Undirected simple graphs with optional real-valued node labels, and their
//! plain-text file format.
//!
//! The text format holds one graph per file:
//!
//! ```text
//! n 3
//! v 0 1
//! v 1 0.5
//! v 2 1
//! e 0 1
//! e 1 2
//! ```
//!
//! `v` lines are present only for labeled graphs; labels are written with
//! six significant digits. Edges are written `u < v`, sorted.

use std::collections::VecDeque;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("node {node} out of range for {node_count} nodes")]
    NodeOutOfRange { node: usize, node_count: usize },
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("node {0} has degree 0; its reciprocal degree is undefined")]
    IsolatedNode(usize),
    #[error("expected {expected} labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("label {0} is not finite")]
    NonFiniteLabel(f64),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// An undirected simple graph on nodes `0..node_count`.
///
/// Adjacency lists are kept sorted, so two graphs with the same edge set
/// compare equal regardless of insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    adjacency: Vec<Vec<usize>>,
    edge_count: usize,
    labels: Option<Vec<f64>>,
}

impl Graph {
    pub fn new(node_count: usize) -> Self {
        Self {
            adjacency: vec![Vec::new(); node_count],
            edge_count: 0,
            labels: None,
        }
    }

    /// Builds a graph from an edge list; duplicate edges are rejected.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut g = Self::new(node_count);
        for &(u, v) in edges {
            if !g.add_edge(u, v)? {
                return Err(GraphError::DuplicateEdge(u.min(v), u.max(v)));
            }
        }
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Appends an isolated node and returns its index. Drops labels, since
    /// they no longer describe the graph.
    pub fn add_node(&mut self) -> usize {
        self.adjacency.push(Vec::new());
        self.labels = None;
        self.adjacency.len() - 1
    }

    /// Inserts `{u, v}`. Returns `Ok(false)` if the edge already exists.
    pub fn add_edge(&mut self, u: usize, v: usize) -> Result<bool, GraphError> {
        let n = self.node_count();
        for node in [u, v] {
            if node >= n {
                return Err(GraphError::NodeOutOfRange {
                    node,
                    node_count: n,
                });
            }
        }
        if u == v {
            return Err(GraphError::SelfLoop(u));
        }
        match self.adjacency[u].binary_search(&v) {
            Ok(_) => Ok(false),
            Err(pos) => {
                self.adjacency[u].insert(pos, v);
                let pos = self.adjacency[v].binary_search(&u).unwrap_err();
                self.adjacency[v].insert(pos, u);
                self.edge_count += 1;
                Ok(true)
            }
        }
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency
            .get(u)
            .is_some_and(|adj| adj.binary_search(&v).is_ok())
    }

    /// Sorted neighbor list of `v`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    /// Number of edges incident to `v`.
    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    /// Edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, adj)| adj.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn label(&self, v: usize) -> Option<f64> {
        self.labels.as_ref().map(|l| l[v])
    }

    pub fn set_labels(&mut self, labels: Vec<f64>) -> Result<(), GraphError> {
        if labels.len() != self.node_count() {
            return Err(GraphError::LabelCount {
                expected: self.node_count(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|x| !x.is_finite()) {
            return Err(GraphError::NonFiniteLabel(bad));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn clear_labels(&mut self) {
        self.labels = None;
    }

    /// Copy of the graph with `label(v) = 1 / degree(v)`.
    pub fn relabel_reciprocal_degree(&self) -> Result<Graph, GraphError> {
        let labels = (0..self.node_count())
            .map(|v| match self.degree(v) {
                0 => Err(GraphError::IsolatedNode(v)),
                d => Ok(1.0 / d as f64),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut g = self.clone();
        g.labels = Some(labels);
        Ok(g)
    }

    /// True iff every node is reachable from node 0. The empty graph counts
    /// as connected.
    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    reached += 1;
                    queue.push_back(v);
                }
            }
        }
        reached == n
    }

    /// Relabels node `v` as `perm[v]`, carrying node labels along.
    ///
    /// # Panics
    /// If `perm` is not a permutation of `0..node_count`.
    pub fn permute(&self, perm: &[usize]) -> Graph {
        let n = self.node_count();
        assert_eq!(perm.len(), n, "permutation length");
        let mut check = vec![false; n];
        for &p in perm {
            assert!(p < n && !check[p], "not a permutation");
            check[p] = true;
        }
        let mut g = Graph::new(n);
        for (u, v) in self.edges() {
            g.add_edge(perm[u], perm[v])
                .expect("permuted edge is valid");
        }
        if let Some(labels) = &self.labels {
            let mut permuted = vec![0.0; n];
            for (v, &l) in labels.iter().enumerate() {
                permuted[perm[v]] = l;
            }
            g.labels = Some(permuted);
        }
        g
    }

    /// Serializes to the graph text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "n {}", self.node_count()).unwrap();
        if let Some(labels) = &self.labels {
            for (v, &l) in labels.iter().enumerate() {
                writeln!(out, "v {v} {}", format_significant(l, 6)).unwrap();
            }
        }
        for (u, v) in self.edges() {
            writeln!(out, "e {u} {v}").unwrap();
        }
        out
    }

    /// Parses the graph text format. `v` lines must cover every node exactly
    /// once or be absent altogether.
    pub fn from_text(text: &str) -> Result<Graph, GraphError> {
        let err = |line: usize, message: String| GraphError::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (first_no, first) = lines
            .by_ref()
            .find(|(_, l)| !l.is_empty())
            .ok_or_else(|| err(1, "empty input".into()))?;
        let n = match first.split_whitespace().collect::<Vec<_>>()[..] {
            ["n", count] => count
                .parse::<usize>()
                .map_err(|e| err(first_no, format!("node count: {e}")))?,
            _ => {
                return Err(err(
                    first_no,
                    format!("expected `n <count>`, got `{first}`"),
                ))
            }
        };
        let mut g = Graph::new(n);
        let mut labels: Vec<Option<f64>> = vec![None; n];
        let mut label_lines = 0;
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let index = |s: &str| -> Result<usize, GraphError> {
                let i = s
                    .parse::<usize>()
                    .map_err(|e| err(no, format!("node index `{s}`: {e}")))?;
                if i >= n {
                    return Err(err(no, format!("node {i} out of range for {n} nodes")));
                }
                Ok(i)
            };
            match fields[..] {
                ["v", i, label] => {
                    let i = index(i)?;
                    let value = label
                        .parse::<f64>()
                        .map_err(|e| err(no, format!("label `{label}`: {e}")))?;
                    if labels[i].replace(value).is_some() {
                        return Err(err(no, format!("node {i} labeled twice")));
                    }
                    label_lines += 1;
                }
                ["e", u, v] => {
                    let (u, v) = (index(u)?, index(v)?);
                    match g.add_edge(u, v) {
                        Ok(true) => {}
                        Ok(false) => return Err(err(no, format!("duplicate edge {u} {v}"))),
                        Err(e) => return Err(err(no, e.to_string())),
                    }
                }
                _ => return Err(err(no, format!("unrecognized line `{line}`"))),
            }
        }
        if label_lines > 0 {
            if label_lines != n {
                return Err(err(0, format!("{label_lines} labels for {n} nodes")));
            }
            let labels = labels
                .into_iter()
                .map(|l| l.expect("all present"))
                .collect();
            g.set_labels(labels).map_err(|e| err(0, e.to_string()))?;
        }
        Ok(g)
    }
}

/// Free-function form of [`Graph::degree`].
pub fn degree(g: &Graph, v: usize) -> usize {
    g.degree(v)
}

/// Free-function form of [`Graph::is_connected`].
pub fn is_connected(g: &Graph) -> bool {
    g.is_connected()
}

/// Free-function form of [`Graph::relabel_reciprocal_degree`].
pub fn relabel_reciprocal_degree(g: &Graph) -> Result<Graph, GraphError> {
    g.relabel_reciprocal_degree()
}

/// Formats like C's `%.<digits>g`: `digits` significant digits, trailing
/// zeros dropped, scientific notation for very small or large magnitudes.
pub fn format_significant(x: f64, digits: usize) -> String {
    assert!(digits >= 1);
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
