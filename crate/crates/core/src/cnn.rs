//! Connecting Nearest Neighbor growth model.
//!
//! The graph grows from a single node. Each step either attaches a new node
//! by one edge to a uniformly chosen existing node, registering the new
//! node's two-hop pairs as potential edges, or (with probability `u`)
//! converts one uniformly chosen potential edge into a real edge. Growth
//! stops as soon as the target node count is reached, optionally followed by
//! a fixed number of extra conversions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CnnParams {
    /// Target node count, at least 1.
    pub nodes: usize,
    /// Conversion probability `u` in `[0, 1]`.
    pub conversion_prob: f64,
    pub seed: u64,
    /// Conversions run after the last node is attached (0 by default).
    pub flush_steps: usize,
}

impl CnnParams {
    pub fn new(nodes: usize, conversion_prob: f64, seed: u64) -> Result<Self, GraphError> {
        if nodes == 0 {
            return Err(GraphError::InvalidParams(
                "node count must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&conversion_prob) {
            return Err(GraphError::InvalidParams(format!(
                "conversion probability {conversion_prob} outside [0, 1]"
            )));
        }
        Ok(Self {
            nodes,
            conversion_prob,
            seed,
            flush_steps: 0,
        })
    }

    pub fn with_flush_steps(mut self, steps: usize) -> Self {
        self.flush_steps = steps;
        self
    }
}

/// Grows one graph. The output is connected, simple and has exactly
/// `params.nodes` nodes; it is a tree when `conversion_prob` is 0.
///
/// A conversion is only attempted while potential edges remain: with an
/// empty potential set the step is always an attachment. This has the same
/// distribution over graphs as drawing a no-op, and makes `u = 1` terminate.
pub fn cnn_generate(params: &CnnParams) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut g = Graph::new(1);
    // Multiset: a pair may be registered more than once.
    let mut potential: Vec<(usize, usize)> = Vec::new();
    while g.node_count() < params.nodes {
        let convert = !potential.is_empty() && rng.gen::<f64>() < params.conversion_prob;
        if convert {
            convert_one(&mut g, &mut potential, &mut rng);
        } else {
            let anchor = rng.gen_range(0..g.node_count());
            let new = g.add_node();
            potential.extend(g.neighbors(anchor).iter().map(|&w| (new, w)));
            g.add_edge(new, anchor).expect("fresh node");
        }
    }
    for _ in 0..params.flush_steps {
        if potential.is_empty() {
            break;
        }
        convert_one(&mut g, &mut potential, &mut rng);
    }
    g
}

fn convert_one(g: &mut Graph, potential: &mut Vec<(usize, usize)>, rng: &mut ChaCha8Rng) {
    let i = rng.gen_range(0..potential.len());
    let (u, v) = potential.swap_remove(i);
    // Already-realized pairs are skipped.
    g.add_edge(u, v)
        .expect("potential pairs are distinct nodes");
}
