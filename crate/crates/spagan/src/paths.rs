//! Shortest-path generation, cost transforms and path sampling.
//!
//! Learned attention coefficients become positive edge costs, Dijkstra runs
//! from every center over those costs, and each center keeps the cheapest
//! paths per length plus its own self-path.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::SparseGraph;

/// Costs below this are clamped up; keeps Dijkstra strictly positive even
/// for attention coefficients of exactly 1.
pub const COST_EPS: f64 = 1e-8;

/// One non-negative cost per stored directed edge, aligned with the graph's
/// CSR edge ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeCosts {
    values: Vec<f64>,
}

impl EdgeCosts {
    pub fn new(graph: &SparseGraph, values: Vec<f64>) -> Result<Self> {
        if values.len() != graph.num_directed_edges() {
            return Err(Error::dim(
                "edge_costs",
                format!(
                    "{} costs for {} directed edges",
                    values.len(),
                    graph.num_directed_edges()
                ),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < COST_EPS) {
            return Err(Error::Numeric(format!("edge cost {bad} below epsilon or non-finite")));
        }
        Ok(EdgeCosts { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, edge_idx: usize) -> f64 {
        self.values[edge_idx]
    }
}

/// Unit cost on every edge; shortest paths degenerate to fewest-hop paths.
/// Used for the initial training phase.
pub fn uniform_costs(graph: &SparseGraph) -> EdgeCosts {
    EdgeCosts {
        values: vec![1.0; graph.num_directed_edges()],
    }
}

/// Mean attention per edge across heads. Each head column is aligned with
/// the graph edge ordering; values must lie in (0, 1].
pub fn edge_costs_from_attention(per_head: &[Vec<f64>]) -> Result<Vec<f64>> {
    let heads = per_head.len();
    if heads == 0 {
        return Err(Error::Usage("attention mean over zero heads".into()));
    }
    let len = per_head[0].len();
    if per_head.iter().any(|h| h.len() != len) {
        return Err(Error::dim("edge_costs_from_attention", "head column lengths differ"));
    }
    let mut mean = vec![0.0; len];
    for head in per_head {
        for (m, &a) in mean.iter_mut().zip(head) {
            if !a.is_finite() || a <= 0.0 || a > 1.0 + 1e-9 {
                return Err(Error::Numeric(format!(
                    "attention coefficient {a} outside (0, 1]"
                )));
            }
            *m += a;
        }
    }
    for m in &mut mean {
        *m /= heads as f64;
    }
    Ok(mean)
}

/// Order-reversing positive transform: cost = max(-ln(attention), eps).
/// Stronger attention means cheaper edges.
pub fn transform_costs(graph: &SparseGraph, mean_attention: &[f64]) -> Result<EdgeCosts> {
    let values = mean_attention
        .iter()
        .map(|&a| {
            if !a.is_finite() || a <= 0.0 {
                return Err(Error::Numeric(format!("attention {a} not in (0, 1]")));
            }
            Ok((-a.ln()).max(COST_EPS))
        })
        .collect::<Result<Vec<_>>>()?;
    EdgeCosts::new(graph, values)
}

/// A shortest path from `center` to `target`. The stored sequence excludes
/// the center; `length` counts nodes including the center, so a direct
/// neighbor path has length 2 and the self-path has length 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub center: usize,
    pub target: usize,
    pub sequence: Vec<usize>,
    pub cost: f64,
}

impl Path {
    pub fn self_path(center: usize) -> Self {
        Path {
            center,
            target: center,
            sequence: Vec::new(),
            cost: 0.0,
        }
    }

    /// Node count including the center.
    pub fn length(&self) -> usize {
        self.sequence.len() + 1
    }
}

/// Serializable form used by the paths.json debug dump.
#[derive(Clone, Debug, Serialize)]
pub struct PathRecord {
    pub target: usize,
    pub sequence: Vec<usize>,
    pub length: usize,
    pub cost: f64,
}

impl From<&Path> for PathRecord {
    fn from(p: &Path) -> Self {
        PathRecord {
            target: p.target,
            sequence: p.sequence.clone(),
            length: p.length(),
            cost: p.cost,
        }
    }
}

struct HeapEntry {
    dist: f64,
    node: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.node == other.node
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    // Reversed on dist so BinaryHeap pops the minimum; node id breaks ties.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Dijkstra tree from `center`: settled order, distances and predecessors.
/// Equal-distance predecessor candidates resolve to the smallest node id.
fn shortest_path_tree(
    graph: &SparseGraph,
    costs: &EdgeCosts,
    center: usize,
) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let n = graph.num_nodes();
    const NO_PRED: usize = usize::MAX;
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![NO_PRED; n];
    let mut settled = vec![false; n];
    let mut order = Vec::new();
    let mut heap = BinaryHeap::new();
    dist[center] = 0.0;
    heap.push(HeapEntry {
        dist: 0.0,
        node: center,
    });
    while let Some(HeapEntry { node: u, .. }) = heap.pop() {
        if settled[u] {
            continue;
        }
        settled[u] = true;
        order.push(u);
        let base = dist[u];
        for (pos, &v) in graph.neighbors(u).iter().enumerate() {
            if settled[v] {
                continue;
            }
            let edge_idx = graph.neighbor_edge_index(u, pos);
            let nd = base + costs.get(edge_idx);
            if nd < dist[v] {
                dist[v] = nd;
                pred[v] = u;
                heap.push(HeapEntry { dist: nd, node: v });
            } else if nd == dist[v] && u < pred[v] {
                pred[v] = u;
            }
        }
    }
    (order, dist, pred)
}

/// All shortest paths from `center` whose tree path has at most
/// `c_max - 1` edges, i.e. length (node count) at most `c_max`. Targets whose
/// shortest path is longer are simply absent.
pub fn dijkstra_paths(
    graph: &SparseGraph,
    costs: &EdgeCosts,
    center: usize,
    c_max: usize,
) -> Result<Vec<Path>> {
    if center >= graph.num_nodes() {
        return Err(Error::Index {
            index: center,
            len: graph.num_nodes(),
        });
    }
    if c_max < 2 {
        return Err(Error::Config(format!("max path length must be >= 2, got {c_max}")));
    }
    let (order, dist, pred) = shortest_path_tree(graph, costs, center);
    let n = graph.num_nodes();
    let max_hops = c_max - 1;
    // Predecessors settle strictly earlier, so depths resolve in settle order.
    let mut hops = vec![usize::MAX; n];
    hops[center] = 0;
    let mut paths = Vec::new();
    for &v in &order {
        if v == center {
            continue;
        }
        let p = pred[v];
        debug_assert!(p != usize::MAX && hops[p] != usize::MAX);
        hops[v] = hops[p] + 1;
        if hops[v] > max_hops {
            continue;
        }
        let mut sequence = Vec::with_capacity(hops[v]);
        let mut cur = v;
        while cur != center {
            sequence.push(cur);
            cur = pred[cur];
        }
        sequence.reverse();
        paths.push(Path {
            center,
            target: v,
            sequence,
            cost: dist[v],
        });
    }
    Ok(paths)
}

/// Number of paths kept per (center, length) bucket.
pub fn sample_size(degree: usize, ratio: f64) -> usize {
    ((degree as f64 * ratio).round() as usize).max(1)
}

/// Keeps the `max(1, round(degree * ratio))` lowest-cost paths; cost ties
/// break toward the smaller target id.
pub fn sample_paths(mut bucket: Vec<Path>, ratio: f64, degree: usize) -> Result<Vec<Path>> {
    if ratio <= 0.0 {
        return Err(Error::Config(format!("sample ratio must be positive, got {ratio}")));
    }
    bucket.sort_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.target.cmp(&b.target)));
    bucket.truncate(sample_size(degree, ratio));
    Ok(bucket)
}

/// Sampled shortest paths for one center: the mandatory self-path plus the
/// per-length buckets, each ordered by ascending cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterPaths {
    pub self_path: Path,
    by_length: Vec<Vec<Path>>,
}

impl CenterPaths {
    /// Sampled bucket for length `c` (node count including the center).
    pub fn bucket(&self, c: usize) -> &[Path] {
        &self.by_length[c - 2]
    }

    pub fn total_paths(&self) -> usize {
        1 + self.by_length.iter().map(Vec::len).sum::<usize>()
    }
}

/// Per-center sampled path sets for every length in 2..=c_max.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    pub c_max: usize,
    pub ratio: f64,
    centers: Vec<CenterPaths>,
}

impl PathSet {
    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn center(&self, i: usize) -> &CenterPaths {
        &self.centers[i]
    }

    pub fn centers(&self) -> &[CenterPaths] {
        &self.centers
    }

    /// Builds a path set from explicit per-center buckets; test and
    /// order-invariance helpers use this to bypass the sampling pipeline.
    pub fn from_parts(c_max: usize, ratio: f64, centers: Vec<CenterPaths>) -> Self {
        PathSet {
            c_max,
            ratio,
            centers,
        }
    }

    /// Debug-dump entries for one center: self-path first, then buckets by
    /// ascending length.
    pub fn records(&self, center: usize) -> Vec<PathRecord> {
        let cp = &self.centers[center];
        let mut out = vec![PathRecord::from(&cp.self_path)];
        for c in 2..=self.c_max {
            out.extend(cp.bucket(c).iter().map(PathRecord::from));
        }
        out
    }
}

/// Runs Dijkstra from every center, buckets paths by length, samples each
/// bucket and appends the self-path. Centers are independent, so the work is
/// parallel; output order is by center id and fully deterministic.
pub fn build_pathset(
    graph: &SparseGraph,
    costs: &EdgeCosts,
    c_max: usize,
    ratio: f64,
) -> Result<PathSet> {
    if ratio <= 0.0 {
        return Err(Error::Config(format!("sample ratio must be positive, got {ratio}")));
    }
    if c_max < 2 {
        return Err(Error::Config(format!("max path length must be >= 2, got {c_max}")));
    }
    let centers: Result<Vec<CenterPaths>> = (0..graph.num_nodes())
        .into_par_iter()
        .map(|center| {
            let all = dijkstra_paths(graph, costs, center, c_max)?;
            let mut buckets: Vec<Vec<Path>> = vec![Vec::new(); c_max - 1];
            for p in all {
                buckets[p.length() - 2].push(p);
            }
            let degree = graph.degree(center)?;
            let by_length = buckets
                .into_iter()
                .map(|b| sample_paths(b, ratio, degree))
                .collect::<Result<Vec<_>>>()?;
            Ok(CenterPaths {
                self_path: Path::self_path(center),
                by_length,
            })
        })
        .collect();
    Ok(PathSet {
        c_max,
        ratio,
        centers: centers?,
    })
}
