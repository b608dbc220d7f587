//! Sparse graph representation, dataset ingestion and split handling.
//!
//! Graphs are undirected: every input edge is stored in both directions in
//! CSR form. Self-connections are never stored; the node's own contribution
//! enters through the explicit self-path in the path engine.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, SegmentIndex};

/// CSR-form directed view of an undirected graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    num_nodes: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl SparseGraph {
    /// Builds a graph from undirected raw pairs. Pairs are symmetrized,
    /// duplicates collapsed and self-loops dropped, both with a logged
    /// warning.
    pub fn from_undirected_edges(num_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut dup = 0usize;
        let mut self_loops = 0usize;
        for &(a, b) in pairs {
            for &(u, v) in &[(a, b), (b, a)] {
                if u >= num_nodes || v >= num_nodes {
                    return Err(Error::load(
                        "edges",
                        format!("edge ({a},{b}) out of range for {num_nodes} nodes"),
                    ));
                }
                if u == v {
                    self_loops += 1;
                    continue;
                }
                if !seen.insert((u, v)) {
                    dup += 1;
                }
            }
        }
        if dup > 0 {
            log::warn!("collapsed {} duplicate directed edge entries", dup);
        }
        if self_loops > 0 {
            log::warn!("dropped {} self-loop entries", self_loops);
        }
        let mut sorted: Vec<(usize, usize)> = seen.into_iter().collect();
        sorted.sort_unstable();
        let mut offsets = vec![0usize; num_nodes + 1];
        for &(u, _) in &sorted {
            offsets[u + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        let targets = sorted.into_iter().map(|(_, v)| v).collect();
        Ok(SparseGraph {
            num_nodes,
            offsets,
            targets,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of stored directed edges (twice the undirected count).
    pub fn num_directed_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Out-degree in the symmetrized graph; self-loops are never stored.
    pub fn degree(&self, i: usize) -> Result<usize> {
        if i >= self.num_nodes {
            return Err(Error::Index {
                index: i,
                len: self.num_nodes,
            });
        }
        Ok(self.offsets[i + 1] - self.offsets[i])
    }

    /// Directed edges in CSR order: sorted by source, then target. Edge
    /// costs and attention columns are aligned to this ordering.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.targets.len());
        for i in 0..self.num_nodes {
            for &j in self.neighbors(i) {
                edges.push((i, j));
            }
        }
        edges
    }

    /// Position of directed edge (i, j) in the CSR ordering.
    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.targets[self.offsets[i]..self.offsets[i + 1]];
        row.binary_search(&j).ok().map(|p| self.offsets[i] + p)
    }

    /// Edge index of the `pos`-th neighbor of `i`.
    #[inline]
    pub fn neighbor_edge_index(&self, i: usize, pos: usize) -> usize {
        self.offsets[i] + pos
    }

    /// Deterministic (center, endpoint) pairs sorted by center then endpoint,
    /// with one (i, i) pair per node when `include_self` is set, plus the
    /// grouping of those pairs by center.
    pub fn neighbor_segments(&self, include_self: bool) -> (Vec<(usize, usize)>, SegmentIndex) {
        let mut pairs = Vec::with_capacity(self.targets.len() + self.num_nodes);
        for i in 0..self.num_nodes {
            let mut pushed_self = !include_self;
            for &j in self.neighbors(i) {
                if !pushed_self && i < j {
                    pairs.push((i, i));
                    pushed_self = true;
                }
                pairs.push((i, j));
            }
            if !pushed_self {
                pairs.push((i, i));
            }
        }
        let groups: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
        let seg = SegmentIndex::new(groups, self.num_nodes)
            .expect("group ids are node ids by construction");
        (pairs, seg)
    }
}

/// Explicit node-id lists for the train/val/test protocol.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
    feature_file: String,
    feature_dtype: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
}

/// A loaded semi-supervised node-classification dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: SparseGraph,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: SplitSpec,
    /// Dataset name, from meta.json if present, else the directory name.
    pub name: String,
    /// Number of lines in edges.csv before symmetrization and dedup.
    pub raw_edge_pairs: usize,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }
}

fn validate_split(name: &str, ids: &[usize], num_nodes: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for &id in ids {
        if id >= num_nodes {
            return Err(Error::load(
                format!("splits.{name}"),
                format!("node id {id} out of range for {num_nodes} nodes"),
            ));
        }
        if !seen.insert(id) {
            return Err(Error::load(
                format!("splits.{name}"),
                format!("duplicate node id {id}"),
            ));
        }
    }
    Ok(())
}

/// Loads a dataset directory: meta.json, edges.csv, features.bin (row-major
/// little-endian f32), labels.csv and splits.json.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::load("meta.json", format!("{}: {e}", meta_path.display())))?;
    let meta: Meta =
        serde_json::from_str(&meta_text).map_err(|e| Error::load("meta.json", e.to_string()))?;
    if meta.feature_dtype != "f32" {
        return Err(Error::load(
            "meta.feature_dtype",
            format!("unsupported dtype `{}`", meta.feature_dtype),
        ));
    }
    if meta.num_classes == 0 {
        return Err(Error::load("meta.num_classes", "must be positive"));
    }

    // edges.csv: one undirected "src,dst" pair per line.
    let edges_path = dir.join("edges.csv");
    let edges_text = fs::read_to_string(&edges_path)
        .map_err(|e| Error::load("edges.csv", format!("{}: {e}", edges_path.display())))?;
    let mut pairs = Vec::new();
    for (ln, line) in edges_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (a, b) = line.split_once(',').ok_or_else(|| {
            Error::load("edges.csv", format!("line {}: expected `src,dst`", ln + 1))
        })?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::load("edges.csv", format!("line {}: {e}", ln + 1)))
        };
        pairs.push((parse(a)?, parse(b)?));
    }
    let raw_edge_pairs = pairs.len();
    let graph = SparseGraph::from_undirected_edges(meta.num_nodes, &pairs)?;
    log::info!(
        "loaded graph: {} nodes, {} raw pairs, {} undirected edges after symmetrization",
        meta.num_nodes,
        raw_edge_pairs,
        graph.num_undirected_edges()
    );

    // features.bin: row-major N x F f32.
    let feat_path = dir.join(&meta.feature_file);
    let mut feat_file = fs::File::open(&feat_path)
        .map_err(|e| Error::load("features", format!("{}: {e}", feat_path.display())))?;
    let mut bytes = Vec::new();
    feat_file
        .read_to_end(&mut bytes)
        .map_err(|e| Error::load("features", e.to_string()))?;
    let expected = meta
        .num_nodes
        .checked_mul(meta.num_features)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::load("features", "size overflow"))?;
    if bytes.len() != expected {
        return Err(Error::load(
            "features",
            format!(
                "expected {} bytes for {}x{} f32, found {}",
                expected,
                meta.num_nodes,
                meta.num_features,
                bytes.len()
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let features = DenseMatrix::from_vec(meta.num_nodes, meta.num_features, values)
        .map_err(|e| Error::load("features", e.to_string()))?;
    if !features.is_finite() {
        return Err(Error::load("features", "non-finite feature value"));
    }

    // labels.csv: one class id per line.
    let labels_path = dir.join("labels.csv");
    let labels_text = fs::read_to_string(&labels_path)
        .map_err(|e| Error::load("labels.csv", format!("{}: {e}", labels_path.display())))?;
    let mut labels = Vec::with_capacity(meta.num_nodes);
    for (ln, line) in labels_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let y: usize = line
            .parse()
            .map_err(|e| Error::load("labels.csv", format!("line {}: {e}", ln + 1)))?;
        if y >= meta.num_classes {
            return Err(Error::load(
                "labels.csv",
                format!("line {}: label {} >= {} classes", ln + 1, y, meta.num_classes),
            ));
        }
        labels.push(y);
    }
    if labels.len() != meta.num_nodes {
        return Err(Error::load(
            "labels.csv",
            format!("{} labels for {} nodes", labels.len(), meta.num_nodes),
        ));
    }

    // splits.json: disjoint train/val/test node ids.
    let splits_path = dir.join("splits.json");
    let splits_text = fs::read_to_string(&splits_path)
        .map_err(|e| Error::load("splits.json", format!("{}: {e}", splits_path.display())))?;
    let splits: SplitSpec = serde_json::from_str(&splits_text)
        .map_err(|e| Error::load("splits.json", e.to_string()))?;
    validate_split("train", &splits.train, meta.num_nodes)?;
    validate_split("val", &splits.val, meta.num_nodes)?;
    validate_split("test", &splits.test, meta.num_nodes)?;
    let train_set: HashSet<_> = splits.train.iter().collect();
    let val_set: HashSet<_> = splits.val.iter().collect();
    for id in &splits.val {
        if train_set.contains(id) {
            return Err(Error::load("splits.val", format!("node {id} also in train")));
        }
    }
    for id in &splits.test {
        if train_set.contains(id) || val_set.contains(id) {
            return Err(Error::load(
                "splits.test",
                format!("node {id} also in train or val"),
            ));
        }
    }

    let name = meta.name.clone().unwrap_or_else(|| {
        dir.file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "dataset".to_string())
    });

    Ok(Dataset {
        graph,
        features,
        labels,
        num_classes: meta.num_classes,
        splits,
        name,
        raw_edge_pairs,
    })
}

/// Writes a dataset to the on-disk directory format, the inverse of
/// [`load_dataset`]. Each undirected edge is written once as `min,max`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        num_nodes: ds.num_nodes(),
        num_features: ds.num_features(),
        num_classes: ds.num_classes,
        feature_file: "features.bin".to_string(),
        feature_dtype: "f32".to_string(),
        name: Some(ds.name.clone()),
    };
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;

    let mut edge_lines = String::new();
    for (i, j) in ds.graph.edge_list() {
        if i < j {
            edge_lines.push_str(&format!("{i},{j}\n"));
        }
    }
    fs::write(dir.join("edges.csv"), edge_lines)?;

    let mut feat_file = fs::File::create(dir.join("features.bin"))?;
    let mut buf = Vec::with_capacity(ds.features.len() * 4);
    for &v in ds.features.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    feat_file.write_all(&buf)?;

    let mut label_lines = String::new();
    for &y in &ds.labels {
        label_lines.push_str(&format!("{y}\n"));
    }
    fs::write(dir.join("labels.csv"), label_lines)?;

    fs::write(
        dir.join("splits.json"),
        serde_json::to_string(&ds.splits)?,
    )?;
    Ok(())
}
