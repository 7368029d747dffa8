#![allow(dead_code)]

use cvaegg::graph::Graph;
use rand::seq::SliceRandom;
use rand::Rng;

/// Random connected graph: a random spanning tree on `nodes` nodes plus
/// extra edges until `edges` is reached (or the graph is complete).
pub fn random_connected<R: Rng>(nodes: usize, edges: usize, rng: &mut R) -> Graph {
    let mut g = Graph::new(nodes);
    for v in 1..nodes {
        let u = rng.gen_range(0..v);
        g.add_edge(u, v).unwrap();
    }
    let max_edges = nodes * (nodes - 1) / 2;
    while g.edge_count() < edges.min(max_edges) {
        let u = rng.gen_range(0..nodes);
        let v = rng.gen_range(0..nodes);
        if u != v {
            g.add_edge(u, v).unwrap();
        }
    }
    // shuffle node indices so node 0 is not special
    let mut perm: Vec<usize> = (0..nodes).collect();
    perm.shuffle(rng);
    g.permute(&perm)
}

pub fn random_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Havel-Hakimi realization of a degree sequence, if graphical.
pub fn graph_from_degrees(degrees: &[usize]) -> Option<Graph> {
    let n = degrees.len();
    let mut g = Graph::new(n);
    let mut remaining: Vec<(usize, usize)> = degrees.iter().copied().zip(0..n).collect();
    loop {
        remaining.sort_unstable_by(|a, b| b.cmp(a));
        let (d, v) = remaining[0];
        if d == 0 {
            return Some(g);
        }
        if d >= remaining.len() {
            return None;
        }
        remaining[0].0 = 0;
        for entry in remaining.iter_mut().skip(1).take(d) {
            if entry.0 == 0 {
                return None;
            }
            entry.0 -= 1;
            g.add_edge(v, entry.1).unwrap();
        }
    }
}
