//! Independent oracles and the fast property suites behind `spagan selftest`.
//!
//! Everything here recomputes expected results from first principles --
//! exhaustive enumeration, dense per-group softmax, finite differences --
//! and never calls into the code path it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::SparseGraph;
use crate::paths::EdgeCosts;

/// Minimum cost per target over all simple paths from `center` with at most
/// `max_edges` edges, by exhaustive depth-first enumeration. Costs accumulate
/// left to right, matching Dijkstra's accumulation order exactly.
pub fn brute_force_shortest_paths(
    graph: &SparseGraph,
    costs: &EdgeCosts,
    center: usize,
    max_edges: usize,
) -> Vec<Option<f64>> {
    let n = graph.num_nodes();
    let mut best: Vec<Option<f64>> = vec![None; n];
    let mut visited = vec![false; n];
    visited[center] = true;

    fn dfs(
        graph: &SparseGraph,
        costs: &EdgeCosts,
        u: usize,
        cost: f64,
        depth: usize,
        max_edges: usize,
        visited: &mut [bool],
        best: &mut [Option<f64>],
    ) {
        if depth == max_edges {
            return;
        }
        for (pos, &v) in graph.neighbors(u).iter().enumerate() {
            if visited[v] {
                continue;
            }
            let c = cost + costs.get(graph.neighbor_edge_index(u, pos));
            if best[v].is_none_or(|b| c < b) {
                best[v] = Some(c);
            }
            visited[v] = true;
            dfs(graph, costs, v, c, depth + 1, max_edges, visited, best);
            visited[v] = false;
        }
    }

    dfs(
        graph, costs, center, 0.0, 0, max_edges, &mut visited, &mut best,
    );
    best
}

/// Random connected-ish graph for oracle comparisons.
pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> SparseGraph {
    let n = rng.gen_range(2..=max_nodes);
    let mut pairs = Vec::new();
    for v in 1..n {
        // spanning tree keeps most of the graph reachable
        pairs.push((rng.gen_range(0..v), v));
    }
    let extra = rng.gen_range(0..=n);
    for _ in 0..extra {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            pairs.push((a.min(b), a.max(b)));
        }
    }
    SparseGraph::from_undirected_edges(n, &pairs).expect("valid random graph")
}

/// Random strictly positive symmetric edge costs for a graph.
pub fn random_costs(rng: &mut ChaCha8Rng, graph: &SparseGraph) -> EdgeCosts {
    let mut values = vec![0.0; graph.num_directed_edges()];
    for (idx, (i, j)) in graph.edge_list().into_iter().enumerate() {
        if i < j {
            let w = rng.gen_range(0.05..2.0);
            values[idx] = w;
            let back = graph.edge_index(j, i).expect("graph is symmetric");
            values[back] = w;
        }
    }
    EdgeCosts::new(graph, values).expect("positive costs")
}
