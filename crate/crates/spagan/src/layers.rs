//! First-order graph attention (the baseline and degenerate case) and the
//! two-level shortest-path attention layer.
//!
//! Heads are the outer loop: within one head, paths of each length are
//! aggregated first (attention over paths of one length per center), then a
//! second attention over the per-length aggregates produces the head output.
//! Head outputs merge by concatenation (middle layers) or mean (final
//! layer). With a maximum path length of 2 and full sampling the path layer
//! reproduces first-order attention exactly, self-paths playing the role of
//! self-loops.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::paths::PathSet;
use crate::tensor::{CsrMatrix, DenseMatrix, SegmentIndex, Tape, TensorId};

/// How the outputs of the attention heads combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMode {
    Concat,
    Mean,
}

/// Nonlinearity applied to the merged layer output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Identity,
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// Flat storage for every learnable tensor of a model. Layers hold ids into
/// the store; the optimizer, snapshotting and gradient checks all iterate
/// the same list.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseMatrix>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the store's parameter list (and in any leaf list built
    /// from it).
    pub fn index(&self) -> usize {
        self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseMatrix {
        &self.values[id.0]
    }

    pub fn values(&self) -> &[DenseMatrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.values
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.values.iter().map(|v| v.shape()).collect()
    }

    pub fn snapshot(&self) -> Vec<DenseMatrix> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &[DenseMatrix]) {
        assert_eq!(snapshot.len(), self.values.len());
        self.values.clone_from_slice(snapshot);
    }

    /// Registers every parameter as a differentiable leaf on a fresh tape.
    pub fn register_leaves(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.values
            .iter()
            .map(|v| tape.leaf(v.clone(), true))
            .collect()
    }
}

/// Glorot-uniform sample of the given shape.
pub fn glorot_uniform(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    fan_out: usize,
    rows: usize,
    cols: usize,
) -> DenseMatrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    DenseMatrix::from_vec(rows, cols, data).expect("shape matches data length")
}

/// Attention vector over concatenated query/key pairs, stored as its two
/// halves so logits decompose into `<a_src, q> + <a_dst, k>`.
fn init_attention_vector(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    width: usize,
) -> (ParamId, ParamId) {
    let full = glorot_uniform(rng, 2 * width, 1, 2 * width, 1);
    let src = DenseMatrix::from_vec(width, 1, full.values()[..width].to_vec()).unwrap();
    let dst = DenseMatrix::from_vec(width, 1, full.values()[width..].to_vec()).unwrap();
    (
        store.add(format!("{name}.src"), src),
        store.add(format!("{name}.dst"), dst),
    )
}

/// Layer input: either a dense tensor already on the tape or a constant
/// sparse feature matrix (input dropout applied to its values upstream).
#[derive(Clone)]
pub enum FeatureInput {
    Dense(TensorId),
    Sparse(Rc<CsrMatrix>),
}

impl FeatureInput {
    fn project(&self, tape: &mut Tape, w: TensorId) -> Result<TensorId> {
        match self {
            FeatureInput::Dense(x) => tape.matmul(*x, w),
            FeatureInput::Sparse(csr) => tape.csr_matmul(Rc::clone(csr), w),
        }
    }
}

/// Per-step forward context: dropout configuration and the RNG stream.
pub struct ForwardCtx<'r> {
    pub training: bool,
    pub keep_prob: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn merge_heads(
    tape: &mut Tape,
    heads: Vec<TensorId>,
    merge: MergeMode,
    activation: Activation,
) -> Result<TensorId> {
    let merged = match merge {
        MergeMode::Concat => tape.concat_cols(&heads)?,
        MergeMode::Mean => {
            let mut acc = heads[0];
            for &h in &heads[1..] {
                acc = tape.add(acc, h)?;
            }
            tape.scale(acc, 1.0 / heads.len() as f64)
        }
    };
    Ok(match activation {
        Activation::Elu => tape.elu(merged),
        Activation::Identity => merged,
    })
}

// ---------------------------------------------------------------------------
// First-order attention (GAT)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GatHeadParams {
    pub w: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
}

#[derive(Clone, Debug)]
pub struct GatLayerParams {
    pub heads: Vec<GatHeadParams>,
    pub merge: MergeMode,
    pub activation: Activation,
    pub in_features: usize,
    pub out_features: usize,
}

impl GatLayerParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        num_heads: usize,
        merge: MergeMode,
        activation: Activation,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 || num_heads == 0 {
            return Err(Error::Config(format!(
                "layer {name}: widths and head count must be positive"
            )));
        }
        let heads = (0..num_heads)
            .map(|k| {
                let w = store.add(
                    format!("{name}.h{k}.w"),
                    glorot_uniform(rng, in_features, out_features, in_features, out_features),
                );
                let (a_src, a_dst) =
                    init_attention_vector(store, rng, &format!("{name}.h{k}.a"), out_features);
                GatHeadParams { w, a_src, a_dst }
            })
            .collect();
        Ok(GatLayerParams {
            heads,
            merge,
            activation,
            in_features,
            out_features,
        })
    }

    pub fn output_width(&self) -> usize {
        match self.merge {
            MergeMode::Concat => self.heads.len() * self.out_features,
            MergeMode::Mean => self.out_features,
        }
    }
}

/// Static index structure for first-order attention over edges plus one
/// self-pair per node, sorted by (center, endpoint).
#[derive(Clone, Debug)]
pub struct GatPlan {
    pub pairs: Vec<(usize, usize)>,
    src_idx: Rc<Vec<usize>>,
    dst_idx: Rc<Vec<usize>>,
    seg: Rc<SegmentIndex>,
}

impl GatPlan {
    pub fn new(graph: &SparseGraph) -> Self {
        let (pairs, seg) = graph.neighbor_segments(true);
        let src_idx = Rc::new(pairs.iter().map(|&(i, _)| i).collect());
        let dst_idx = Rc::new(pairs.iter().map(|&(_, j)| j).collect());
        GatPlan {
            pairs,
            src_idx,
            dst_idx,
            seg: Rc::new(seg),
        }
    }
}

pub struct GatLayerOutput {
    pub output: TensorId,
    /// Per head: normalized attention per plan pair, before coefficient
    /// dropout.
    pub attention: Vec<TensorId>,
}

pub fn gat_layer_forward(
    tape: &mut Tape,
    leaves: &[TensorId],
    params: &GatLayerParams,
    input: &FeatureInput,
    plan: &GatPlan,
    ctx: &mut ForwardCtx,
) -> Result<GatLayerOutput> {
    let mut outputs = Vec::with_capacity(params.heads.len());
    let mut attention = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let h = input.project(tape, leaves[head.w.0])?;
        let q_col = tape.matmul(h, leaves[head.a_src.0])?;
        let k_col = tape.matmul(h, leaves[head.a_dst.0])?;
        let s_src = tape.row_gather(q_col, Rc::clone(&plan.src_idx))?;
        let s_dst = tape.row_gather(k_col, Rc::clone(&plan.dst_idx))?;
        let logits = tape.add(s_src, s_dst)?;
        let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
        let alpha = tape.segment_softmax(logits, Rc::clone(&plan.seg))?;
        attention.push(alpha);
        let alpha_d = tape.dropout(alpha, ctx.keep_prob, ctx.training, ctx.rng)?;
        let messages = tape.row_gather(h, Rc::clone(&plan.dst_idx))?;
        let weighted = tape.mul(messages, alpha_d)?;
        outputs.push(tape.segment_sum(weighted, Rc::clone(&plan.seg))?);
    }
    let output = merge_heads(tape, outputs, params.merge, params.activation)?;
    Ok(GatLayerOutput { output, attention })
}

// ---------------------------------------------------------------------------
// Shortest-path attention (SPAGAN)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SpaganHeadParams {
    pub w: ParamId,
    /// One (src, dst) attention pair per path length c in 2..=c_max.
    pub a_alpha: Vec<(ParamId, ParamId)>,
    pub a_beta: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct SpaganLayerParams {
    pub heads: Vec<SpaganHeadParams>,
    pub merge: MergeMode,
    pub activation: Activation,
    pub c_max: usize,
    /// Replace the learned second-level attention with a plain average over
    /// the available path lengths (the SPAGAN_Fix ablation).
    pub fix_beta: bool,
    pub in_features: usize,
    pub out_features: usize,
}

impl SpaganLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        num_heads: usize,
        c_max: usize,
        merge: MergeMode,
        activation: Activation,
        fix_beta: bool,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 || num_heads == 0 {
            return Err(Error::Config(format!(
                "layer {name}: widths and head count must be positive"
            )));
        }
        if c_max < 2 {
            return Err(Error::Config(format!(
                "layer {name}: max path length must be >= 2, got {c_max}"
            )));
        }
        let heads = (0..num_heads)
            .map(|k| {
                let w = store.add(
                    format!("{name}.h{k}.w"),
                    glorot_uniform(rng, in_features, out_features, in_features, out_features),
                );
                let a_alpha = (2..=c_max)
                    .map(|c| {
                        init_attention_vector(
                            store,
                            rng,
                            &format!("{name}.h{k}.a_alpha{c}"),
                            out_features,
                        )
                    })
                    .collect();
                let a_beta =
                    init_attention_vector(store, rng, &format!("{name}.h{k}.a_beta"), out_features);
                SpaganHeadParams { w, a_alpha, a_beta }
            })
            .collect();
        Ok(SpaganLayerParams {
            heads,
            merge,
            activation,
            c_max,
            fix_beta,
            in_features,
            out_features,
        })
    }

    pub fn output_width(&self) -> usize {
        match self.merge {
            MergeMode::Concat => self.heads.len() * self.out_features,
            MergeMode::Mean => self.out_features,
        }
    }
}

/// Static index structure derived from a [`PathSet`]: flattened feature
/// incidences, path-to-bucket grouping and bucket-to-center grouping. Built
/// once per training phase and shared across heads and epochs.
#[derive(Clone, Debug)]
pub struct PathPlan {
    pub n_nodes: usize,
    pub c_max: usize,
    pub n_paths: usize,
    pub n_pairs: usize,
    /// Flattened node ids whose projected features average into each path
    /// feature; the self-path contributes its center.
    phi_nodes: Rc<Vec<usize>>,
    phi_seg: Rc<SegmentIndex>,
    path_centers: Rc<Vec<usize>>,
    /// Per path: index of its length bucket (c - 2; the self-path counts as
    /// c = 2).
    path_c_idx: Vec<usize>,
    pair_seg: Rc<SegmentIndex>,
    pair_centers: Rc<Vec<usize>>,
    pair_node_seg: Rc<SegmentIndex>,
    /// One-hot length selector per path, `n_paths x (c_max - 1)`; `None`
    /// when c_max == 2.
    c_selector: Option<DenseMatrix>,
    /// Positions (in path order) and (center, target) pairs of the c = 2
    /// bucket, self-paths included.
    c2_positions: Vec<usize>,
    c2_pairs: Vec<(usize, usize)>,
}

impl PathPlan {
    pub fn new(pathset: &PathSet) -> Result<Self> {
        let n_nodes = pathset.num_centers();
        let c_max = pathset.c_max;
        let mut phi_nodes = Vec::new();
        let mut phi_groups = Vec::new();
        let mut path_centers = Vec::new();
        let mut path_c_idx = Vec::new();
        let mut path_pair = Vec::new();
        let mut pair_centers = Vec::new();
        let mut c2_positions = Vec::new();
        let mut c2_pairs = Vec::new();

        for center in 0..n_nodes {
            let cp = pathset.center(center);
            for c in 2..=c_max {
                let self_here = c == 2;
                let bucket = cp.bucket(c);
                if bucket.is_empty() && !self_here {
                    continue;
                }
                let pair_id = pair_centers.len();
                pair_centers.push(center);
                if self_here {
                    let path_id = path_centers.len();
                    phi_nodes.push(center);
                    phi_groups.push(path_id);
                    path_centers.push(center);
                    path_c_idx.push(0);
                    path_pair.push(pair_id);
                    c2_positions.push(path_id);
                    c2_pairs.push((center, center));
                }
                for p in bucket {
                    let path_id = path_centers.len();
                    debug_assert_eq!(p.length(), c);
                    for &v in &p.sequence {
                        phi_nodes.push(v);
                        phi_groups.push(path_id);
                    }
                    path_centers.push(center);
                    path_c_idx.push(c - 2);
                    path_pair.push(pair_id);
                    if self_here {
                        c2_positions.push(path_id);
                        c2_pairs.push((center, p.target));
                    }
                }
            }
        }

        let n_paths = path_centers.len();
        let n_pairs = pair_centers.len();
        let phi_seg = SegmentIndex::new(phi_groups, n_paths)?;
        let pair_seg = SegmentIndex::new(path_pair, n_pairs)?;
        let pair_node_seg = SegmentIndex::new(pair_centers.clone(), n_nodes)?;
        let c_selector = if c_max > 2 {
            let mut m = DenseMatrix::zeros(n_paths, c_max - 1);
            for (p, &ci) in path_c_idx.iter().enumerate() {
                m.set(p, ci, 1.0);
            }
            Some(m)
        } else {
            None
        };
        Ok(PathPlan {
            n_nodes,
            c_max,
            n_paths,
            n_pairs,
            phi_nodes: Rc::new(phi_nodes),
            phi_seg: Rc::new(phi_seg),
            path_centers: Rc::new(path_centers),
            path_c_idx,
            pair_seg: Rc::new(pair_seg),
            pair_centers: Rc::new(pair_centers),
            pair_node_seg: Rc::new(pair_node_seg),
            c_selector,
            c2_positions,
            c2_pairs,
        })
    }

    /// (center, target) pairs of the c = 2 bucket, self-pairs included.
    pub fn c2_pairs(&self) -> &[(usize, usize)] {
        &self.c2_pairs
    }
}

pub struct SpaganLayerOutput {
    pub output: TensorId,
    /// Per head: normalized first-level attention for every path, before
    /// coefficient dropout.
    pub path_attention: Vec<TensorId>,
}

impl SpaganLayerOutput {
    /// The c = 2 attention coefficients of one head, aligned with
    /// [`PathPlan::c2_pairs`]. These are node-pair coefficients and drive
    /// the edge-cost regeneration.
    pub fn c2_attention(&self, tape: &Tape, plan: &PathPlan, head: usize) -> Vec<f64> {
        let col = tape.value(self.path_attention[head]);
        plan.c2_positions.iter().map(|&p| col.get(p, 0)).collect()
    }
}

/// Per-length scores folded into one column: `values[p] = <vecs[c(p)], x_p>`.
/// With a single length this is a plain mat-vec; otherwise scores for every
/// length are masked by the one-hot selector and summed row-wise.
fn per_length_score(
    tape: &mut Tape,
    x: TensorId,
    vec_ids: Vec<TensorId>,
    plan: &PathPlan,
) -> Result<TensorId> {
    if vec_ids.len() == 1 {
        return tape.matmul(x, vec_ids[0]);
    }
    let cat = tape.concat_cols(&vec_ids)?;
    let scores = tape.matmul(x, cat)?;
    let selector = tape.constant(plan.c_selector.clone().expect("selector exists for c_max > 2"));
    let masked = tape.mul(scores, selector)?;
    let ones = tape.constant(DenseMatrix::from_vec(
        vec_ids.len(),
        1,
        vec![1.0; vec_ids.len()],
    )?);
    tape.matmul(masked, ones)
}

pub fn spagan_layer_forward(
    tape: &mut Tape,
    leaves: &[TensorId],
    params: &SpaganLayerParams,
    input: &FeatureInput,
    plan: &PathPlan,
    ctx: &mut ForwardCtx,
) -> Result<SpaganLayerOutput> {
    if plan.c_max > params.c_max {
        return Err(Error::Config(format!(
            "path plan carries lengths up to {} but the layer has attention vectors up to {}",
            plan.c_max, params.c_max
        )));
    }
    let n_lengths = plan.c_max - 1;
    let mut outputs = Vec::with_capacity(params.heads.len());
    let mut path_attention = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let h = input.project(tape, leaves[head.w.0])?;

        // Path features: mean of projected features over the stored
        // sequence; the self-path maps to its center's projected feature.
        let phi_in = tape.row_gather(h, Rc::clone(&plan.phi_nodes))?;
        let phi = tape.segment_mean(phi_in, Rc::clone(&plan.phi_seg))?;

        // First level: attention of each path against its center, grouped
        // by (center, length) bucket.
        let src_vecs: Vec<TensorId> = head.a_alpha[..n_lengths]
            .iter()
            .map(|&(s, _)| leaves[s.0])
            .collect();
        let dst_vecs: Vec<TensorId> = head.a_alpha[..n_lengths]
            .iter()
            .map(|&(_, d)| leaves[d.0])
            .collect();
        let q_scores = per_length_score(tape, h, src_vecs, plan)?;
        let s_src = tape.row_gather(q_scores, Rc::clone(&plan.path_centers))?;
        let s_dst = per_length_score(tape, phi, dst_vecs, plan)?;
        let logits = tape.add(s_src, s_dst)?;
        let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
        let alpha = tape.segment_softmax(logits, Rc::clone(&plan.pair_seg))?;
        path_attention.push(alpha);
        let alpha_d = tape.dropout(alpha, ctx.keep_prob, ctx.training, ctx.rng)?;
        let weighted = tape.mul(phi, alpha_d)?;
        let level1 = tape.segment_sum(weighted, Rc::clone(&plan.pair_seg))?;

        // Second level: attention across the per-length aggregates of each
        // center. Lengths with no paths are simply absent from the softmax.
        let head_out = if params.fix_beta {
            tape.segment_mean(level1, Rc::clone(&plan.pair_node_seg))?
        } else {
            let q_col = tape.matmul(h, leaves[head.a_beta.0 .0])?;
            let q = tape.row_gather(q_col, Rc::clone(&plan.pair_centers))?;
            let k = tape.matmul(level1, leaves[head.a_beta.1 .0])?;
            let blogits = tape.add(q, k)?;
            let blogits = tape.leaky_relu(blogits, LEAKY_SLOPE);
            let beta = tape.segment_softmax(blogits, Rc::clone(&plan.pair_node_seg))?;
            let beta_d = tape.dropout(beta, ctx.keep_prob, ctx.training, ctx.rng)?;
            let weighted2 = tape.mul(level1, beta_d)?;
            tape.segment_sum(weighted2, Rc::clone(&plan.pair_node_seg))?
        };
        outputs.push(head_out);
    }
    let output = merge_heads(tape, outputs, params.merge, params.activation)?;
    Ok(SpaganLayerOutput {
        output,
        path_attention,
    })
}

/// Node-pair attention of a path layer's c = 2 vectors evaluated over every
/// stored edge (self-pairs included), in evaluation mode. With full sampling
/// this equals the coefficients the layer produced in its forward pass; it
/// additionally covers edges that sampling or cost detours dropped from the
/// c = 2 bucket. Returns one column per head aligned with the graph's edge
/// ordering.
pub fn node_pair_attention(
    params: &SpaganLayerParams,
    store: &ParamStore,
    input: &FeatureInput,
    graph: &SparseGraph,
    tape: &mut Tape,
) -> Result<Vec<Vec<f64>>> {
    let plan = GatPlan::new(graph);
    let mut per_head = Vec::with_capacity(params.heads.len());
    let leaves: Vec<TensorId> = store
        .values()
        .iter()
        .map(|v| tape.leaf(v.clone(), false))
        .collect();
    for head in &params.heads {
        let h = input.project(tape, leaves[head.w.0])?;
        let (a_src, a_dst) = head.a_alpha[0];
        let q_col = tape.matmul(h, leaves[a_src.0])?;
        let k_col = tape.matmul(h, leaves[a_dst.0])?;
        let s_src = tape.row_gather(q_col, Rc::clone(&plan.src_idx))?;
        let s_dst = tape.row_gather(k_col, Rc::clone(&plan.dst_idx))?;
        let logits = tape.add(s_src, s_dst)?;
        let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
        let alpha = tape.segment_softmax(logits, Rc::clone(&plan.seg))?;
        let values = tape.value(alpha);
        let mut per_edge = Vec::with_capacity(graph.num_directed_edges());
        for (pos, &(i, j)) in plan.pairs.iter().enumerate() {
            if i != j {
                per_edge.push(values.get(pos, 0));
            }
        }
        debug_assert_eq!(per_edge.len(), graph.num_directed_edges());
        per_head.push(per_edge);
    }
    Ok(per_head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{build_pathset, uniform_costs, CenterPaths, Path};
    use crate::selftest::{random_costs, random_graph};
    use crate::tensor::gradcheck::{central_differences, max_relative_error};
    use rand::SeedableRng;

    fn random_features(rng: &mut ChaCha8Rng, n: usize, f: usize) -> DenseMatrix {
        DenseMatrix::from_vec(n, f, (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn eval_ctx(rng: &mut ChaCha8Rng) -> ForwardCtx<'_> {
        ForwardCtx {
            training: false,
            keep_prob: 1.0,
            rng,
        }
    }

    struct Fixture {
        graph: SparseGraph,
        features: DenseMatrix,
        store: ParamStore,
        layer: SpaganLayerParams,
    }

    fn spagan_fixture(
        rng: &mut ChaCha8Rng,
        max_nodes: usize,
        in_f: usize,
        out_f: usize,
        heads: usize,
        c_max: usize,
        merge: MergeMode,
    ) -> Fixture {
        let graph = random_graph(rng, max_nodes);
        let features = random_features(rng, graph.num_nodes(), in_f);
        let mut store = ParamStore::new();
        let layer = SpaganLayerParams::init(
            &mut store,
            rng,
            "l",
            in_f,
            out_f,
            heads,
            c_max,
            merge,
            Activation::Elu,
            false,
        )
        .unwrap();
        Fixture {
            graph,
            features,
            store,
            layer,
        }
    }

    /// Dense reference for one head of the path-attention layer, computed
    /// with per-center loops and explicit softmaxes.
    fn dense_spagan_head(
        h: &DenseMatrix,
        pathset: &crate::paths::PathSet,
        a_alpha: &[(Vec<f64>, Vec<f64>)],
        a_beta: (&[f64], &[f64]),
    ) -> DenseMatrix {
        let n = h.rows();
        let f = h.cols();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let leaky = |x: f64| if x > 0.0 { x } else { LEAKY_SLOPE * x };
        let mut out = DenseMatrix::zeros(n, f);
        for i in 0..n {
            let cp = pathset.center(i);
            let mut aggregates: Vec<(usize, Vec<f64>)> = Vec::new();
            for c in 2..=pathset.c_max {
                let mut phis: Vec<Vec<f64>> = Vec::new();
                if c == 2 {
                    phis.push(h.row(i).to_vec());
                }
                for p in cp.bucket(c) {
                    let mut phi = vec![0.0; f];
                    for &v in &p.sequence {
                        for (acc, &hv) in phi.iter_mut().zip(h.row(v)) {
                            *acc += hv;
                        }
                    }
                    for acc in &mut phi {
                        *acc /= p.sequence.len() as f64;
                    }
                    phis.push(phi);
                }
                if phis.is_empty() {
                    continue;
                }
                let (src, dst) = &a_alpha[c - 2];
                let logits: Vec<f64> = phis
                    .iter()
                    .map(|phi| leaky(dot(src, h.row(i)) + dot(dst, phi)))
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut ell = vec![0.0; f];
                for (phi, e) in phis.iter().zip(&exps) {
                    for (acc, &p) in ell.iter_mut().zip(phi) {
                        *acc += (e / z) * p;
                    }
                }
                aggregates.push((c, ell));
            }
            let blogits: Vec<f64> = aggregates
                .iter()
                .map(|(_, ell)| leaky(dot(a_beta.0, h.row(i)) + dot(a_beta.1, ell)))
                .collect();
            let max = blogits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = blogits.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for ((_, ell), e) in aggregates.iter().zip(&exps) {
                for (o, &v) in out.row_mut(i).iter_mut().zip(ell) {
                    *o += (e / z) * v;
                }
            }
        }
        out
    }

    #[test]
    fn gat_single_node_is_projected_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let graph = SparseGraph::from_undirected_edges(1, &[]).unwrap();
        let features = random_features(&mut rng, 1, 4);
        let mut store = ParamStore::new();
        let params = GatLayerParams::init(
            &mut store,
            &mut rng,
            "g",
            4,
            3,
            1,
            MergeMode::Mean,
            Activation::Elu,
        )
        .unwrap();
        let plan = GatPlan::new(&graph);
        let mut tape = Tape::new();
        let leaves = store.register_leaves(&mut tape);
        let x = tape.leaf(features.clone(), false);
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
        let out = gat_layer_forward(
            &mut tape,
            &leaves,
            &params,
            &FeatureInput::Dense(x),
            &plan,
            &mut eval_ctx(&mut ctx_rng),
        )
        .unwrap();
        assert_eq!(tape.value(out.attention[0]).values(), &[1.0]);
        let w = store.value(params.heads[0].w);
        let want = crate::tensor::dense::matmul(&features, w)
            .unwrap()
            .map(|v| if v > 0.0 { v } else { v.exp_m1() });
        assert!(tape.value(out.output).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn gat_attention_sums_to_one_per_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let graph = random_graph(&mut rng, 8);
        let features = random_features(&mut rng, graph.num_nodes(), 5);
        let mut store = ParamStore::new();
        let params = GatLayerParams::init(
            &mut store,
            &mut rng,
            "g",
            5,
            4,
            2,
            MergeMode::Concat,
            Activation::Elu,
        )
        .unwrap();
        let plan = GatPlan::new(&graph);
        let mut tape = Tape::new();
        let leaves = store.register_leaves(&mut tape);
        let x = tape.leaf(features, false);
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
        let out = gat_layer_forward(
            &mut tape,
            &leaves,
            &params,
            &FeatureInput::Dense(x),
            &plan,
            &mut eval_ctx(&mut ctx_rng),
        )
        .unwrap();
        for alpha in &out.attention {
            let vals = tape.value(*alpha);
            let mut sums = vec![0.0; graph.num_nodes()];
            for (pos, &(i, _)) in plan.pairs.iter().enumerate() {
                sums[i] += vals.get(pos, 0);
            }
            for s in sums {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gat_matches_dense_masked_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let graph = random_graph(&mut rng, 5);
            let n = graph.num_nodes();
            let features = random_features(&mut rng, n, 4);
            let mut store = ParamStore::new();
            let params = GatLayerParams::init(
                &mut store,
                &mut rng,
                "g",
                4,
                3,
                1,
                MergeMode::Mean,
                Activation::Elu,
            )
            .unwrap();
            let plan = GatPlan::new(&graph);
            let mut tape = Tape::new();
            let leaves = store.register_leaves(&mut tape);
            let x = tape.leaf(features.clone(), false);
            let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
            let got = gat_layer_forward(
                &mut tape,
                &leaves,
                &params,
                &FeatureInput::Dense(x),
                &plan,
                &mut eval_ctx(&mut ctx_rng),
            )
            .unwrap();

            // dense oracle: full N x N logit matrix masked to adjacency+self
            let head = &params.heads[0];
            let h = crate::tensor::dense::matmul(&features, store.value(head.w)).unwrap();
            let a_src = store.value(head.a_src).values().to_vec();
            let a_dst = store.value(head.a_dst).values().to_vec();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mut want = DenseMatrix::zeros(n, h.cols());
            for i in 0..n {
                let mut allowed: Vec<usize> = graph.neighbors(i).to_vec();
                allowed.push(i);
                let logits: Vec<f64> = allowed
                    .iter()
                    .map(|&j| {
                        let l = dot(&a_src, h.row(i)) + dot(&a_dst, h.row(j));
                        if l > 0.0 {
                            l
                        } else {
                            LEAKY_SLOPE * l
                        }
                    })
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (&j, e) in allowed.iter().zip(&exps) {
                    for (o, &hv) in want.row_mut(i).iter_mut().zip(h.row(j)) {
                        *o += (e / z) * hv;
                    }
                }
            }
            let want = want.map(|v| if v > 0.0 { v } else { v.exp_m1() });
            assert!(tape.value(got.output).max_abs_diff(&want) < 1e-9);
        }
    }

    #[test]
    fn path_feature_examples() {
        // two paths: the self-path of node 0 and a two-node sequence
        let graph = SparseGraph::from_undirected_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let ps = build_pathset(&graph, &uniform_costs(&graph), 3, 1.0).unwrap();
        let plan = PathPlan::new(&ps).unwrap();
        let features = DenseMatrix::from_vec(3, 2, vec![9.0, 8.0, 1.0, 3.0, 3.0, 5.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(features, false);
        let phi_in = tape.row_gather(x, Rc::clone(&plan.phi_nodes)).unwrap();
        let phi = tape.segment_mean(phi_in, Rc::clone(&plan.phi_seg)).unwrap();
        // center 0: self-path first -> phi = feature of node 0
        assert_eq!(&tape.value(phi).row(0), &[9.0, 8.0]);
        // center 0, c=3 bucket holds path [1, 2]: mean of rows 1 and 2
        let c3_pos = plan
            .path_centers
            .iter()
            .enumerate()
            .find(|&(p, &c)| c == 0 && plan.path_c_idx[p] == 1)
            .unwrap()
            .0;
        assert_eq!(&tape.value(phi).row(c3_pos), &[2.0, 4.0]);
    }

    #[test]
    fn first_level_trivial_aggregations() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // star graph: node 0 has three neighbors, so its c=2 bucket has the
        // self-path plus three paths
        let graph =
            SparseGraph::from_undirected_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let ps = build_pathset(&graph, &uniform_costs(&graph), 2, 1.0).unwrap();
        let plan = PathPlan::new(&ps).unwrap();
        // identical features make every phi equal, so attention convexity
        // returns the shared value
        let features = DenseMatrix::from_vec(4, 2, vec![0.7, -0.3; 4].concat()).unwrap();
        let mut store = ParamStore::new();
        let layer = SpaganLayerParams::init(
            &mut store,
            &mut rng,
            "l",
            2,
            3,
            1,
            2,
            MergeMode::Mean,
            Activation::Identity,
            false,
        )
        .unwrap();
        let mut tape = Tape::new();
        let leaves = store.register_leaves(&mut tape);
        let x = tape.leaf(features.clone(), false);
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
        let out = spagan_layer_forward(
            &mut tape,
            &leaves,
            &layer,
            &FeatureInput::Dense(x),
            &plan,
            &mut eval_ctx(&mut ctx_rng),
        )
        .unwrap();
        let w = store.value(layer.heads[0].w);
        let want = crate::tensor::dense::matmul(&features, w).unwrap();
        assert!(tape.value(out.output).max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn second_level_singleton_equals_first_level() {
        // isolated node: only the self-path exists, so output = W h
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let graph = SparseGraph::from_undirected_edges(2, &[]).unwrap();
        let features = random_features(&mut rng, 2, 3);
        let ps = build_pathset(&graph, &uniform_costs(&graph), 3, 1.0).unwrap();
        let plan = PathPlan::new(&ps).unwrap();
        let mut store = ParamStore::new();
        let layer = SpaganLayerParams::init(
            &mut store,
            &mut rng,
            "l",
            3,
            4,
            1,
            3,
            MergeMode::Mean,
            Activation::Elu,
            false,
        )
        .unwrap();
        let mut tape = Tape::new();
        let leaves = store.register_leaves(&mut tape);
        let x = tape.leaf(features.clone(), false);
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
        let out = spagan_layer_forward(
            &mut tape,
            &leaves,
            &layer,
            &FeatureInput::Dense(x),
            &plan,
            &mut eval_ctx(&mut ctx_rng),
        )
        .unwrap();
        let want = crate::tensor::dense::matmul(&features, store.value(layer.heads[0].w))
            .unwrap()
            .map(|v| if v > 0.0 { v } else { v.exp_m1() });
        assert!(tape.value(out.output).max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn spagan_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            let fx = spagan_fixture(&mut rng, 8, 4, 3, 2, 3, MergeMode::Concat);
            let costs = random_costs(&mut rng, &fx.graph);
            let ps = build_pathset(&fx.graph, &costs, 3, 1.0).unwrap();
            let plan = PathPlan::new(&ps).unwrap();
            let mut tape = Tape::new();
            let leaves = fx.store.register_leaves(&mut tape);
            let x = tape.leaf(fx.features.clone(), false);
            let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
            let got = spagan_layer_forward(
                &mut tape,
                &leaves,
                &fx.layer,
                &FeatureInput::Dense(x),
                &plan,
                &mut eval_ctx(&mut ctx_rng),
            )
            .unwrap();

            let mut head_outs = Vec::new();
            for head in &fx.layer.heads {
                let h =
                    crate::tensor::dense::matmul(&fx.features, fx.store.value(head.w)).unwrap();
                let a_alpha: Vec<(Vec<f64>, Vec<f64>)> = head
                    .a_alpha
                    .iter()
                    .map(|&(s, d)| {
                        (
                            fx.store.value(s).values().to_vec(),
                            fx.store.value(d).values().to_vec(),
                        )
                    })
                    .collect();
                let beta_src = fx.store.value(head.a_beta.0).values().to_vec();
                let beta_dst = fx.store.value(head.a_beta.1).values().to_vec();
                head_outs.push(dense_spagan_head(
                    &h,
                    &ps,
                    &a_alpha,
                    (&beta_src, &beta_dst),
                ));
            }
            let n = fx.graph.num_nodes();
            let f = 3;
            let mut want = DenseMatrix::zeros(n, f * head_outs.len());
            for (k, ho) in head_outs.iter().enumerate() {
                for r in 0..n {
                    for c in 0..f {
                        want.set(r, k * f + c, ho.get(r, c));
                    }
                }
            }
            let want = want.map(|v| if v > 0.0 { v } else { v.exp_m1() });
            assert!(
                tape.value(got.output).max_abs_diff(&want) < 1e-9,
                "dense oracle disagrees"
            );
        }
    }

    #[test]
    fn degenerates_to_gat_with_shared_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..5 {
            let graph = random_graph(&mut rng, 8);
            let features = random_features(&mut rng, graph.num_nodes(), 4);
            let mut store = ParamStore::new();
            let gat = GatLayerParams::init(
                &mut store,
                &mut rng,
                "g",
                4,
                3,
                2,
                MergeMode::Concat,
                Activation::Elu,
            )
            .unwrap();
            // share W and the attention vector; beta gets its own params
            let heads = gat
                .heads
                .iter()
                .map(|h| {
                    let a_beta =
                        init_attention_vector(&mut store, &mut rng, "beta", 3);
                    SpaganHeadParams {
                        w: h.w,
                        a_alpha: vec![(h.a_src, h.a_dst)],
                        a_beta,
                    }
                })
                .collect();
            let spagan = SpaganLayerParams {
                heads,
                merge: MergeMode::Concat,
                activation: Activation::Elu,
                c_max: 2,
                fix_beta: false,
                in_features: 4,
                out_features: 3,
            };
            let ps = build_pathset(&graph, &uniform_costs(&graph), 2, 1.0).unwrap();
            let plan = PathPlan::new(&ps).unwrap();
            let gat_plan = GatPlan::new(&graph);

            let mut tape = Tape::new();
            let leaves = store.register_leaves(&mut tape);
            let x = tape.leaf(features.clone(), false);
            let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
            let got_gat = gat_layer_forward(
                &mut tape,
                &leaves,
                &gat,
                &FeatureInput::Dense(x),
                &gat_plan,
                &mut eval_ctx(&mut ctx_rng),
            )
            .unwrap();
            let got_spagan = spagan_layer_forward(
                &mut tape,
                &leaves,
                &spagan,
                &FeatureInput::Dense(x),
                &plan,
                &mut eval_ctx(&mut ctx_rng),
            )
            .unwrap();
            let diff = tape
                .value(got_gat.output)
                .max_abs_diff(tape.value(got_spagan.output));
            assert!(diff < 1e-6, "degeneration diff {diff}");
        }
    }

    #[test]
    fn output_is_invariant_to_path_and_sequence_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let fx = spagan_fixture(&mut rng, 8, 4, 3, 2, 3, MergeMode::Concat);
        let costs = random_costs(&mut rng, &fx.graph);
        let ps = build_pathset(&fx.graph, &costs, 3, 1.0).unwrap();

        let forward = |pathset: &crate::paths::PathSet| {
            let plan = PathPlan::new(pathset).unwrap();
            let mut tape = Tape::new();
            let leaves = fx.store.register_leaves(&mut tape);
            let x = tape.leaf(fx.features.clone(), false);
            let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
            let out = spagan_layer_forward(
                &mut tape,
                &leaves,
                &fx.layer,
                &FeatureInput::Dense(x),
                &plan,
                &mut eval_ctx(&mut ctx_rng),
            )
            .unwrap();
            tape.value(out.output).clone()
        };
        let base = forward(&ps);

        // permute bucket order and each stored sequence
        let shuffled: Vec<CenterPaths> = (0..ps.num_centers())
            .map(|i| {
                let cp = ps.center(i);
                let by_length = (2..=ps.c_max)
                    .map(|c| {
                        let mut bucket: Vec<Path> = cp.bucket(c).to_vec();
                        bucket.reverse();
                        for p in &mut bucket {
                            p.sequence.reverse();
                        }
                        bucket
                    })
                    .collect();
                CenterPaths {
                    self_path: cp.self_path.clone(),
                    by_length,
                }
            })
            .collect();
        let shuffled = crate::paths::PathSet::from_parts(ps.c_max, ps.ratio, shuffled);
        let permuted = forward(&shuffled);
        let diff = base.max_abs_diff(&permuted);
        assert!(diff < 1e-6, "order sensitivity {diff}");
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let fx = spagan_fixture(&mut rng, 6, 3, 3, 2, 3, MergeMode::Concat);
        let costs = random_costs(&mut rng, &fx.graph);
        let ps = build_pathset(&fx.graph, &costs, 3, 1.0).unwrap();
        let plan = PathPlan::new(&ps).unwrap();

        let run = |values: &[DenseMatrix]| {
            let mut tape = Tape::new();
            let leaves: Vec<TensorId> =
                values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
            let x = tape.leaf(fx.features.clone(), false);
            let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
            let out = spagan_layer_forward(
                &mut tape,
                &leaves,
                &fx.layer,
                &FeatureInput::Dense(x),
                &plan,
                &mut eval_ctx(&mut ctx_rng),
            )
            .unwrap();
            let s = tape.sum_squares(out.output);
            (tape, leaves, s)
        };

        let values = fx.store.snapshot();
        let (mut tape, leaves, loss) = run(&values);
        tape.backward(loss).unwrap();
        let analytic: Vec<DenseMatrix> = leaves.iter().map(|&l| tape.grad(l)).collect();
        let numeric = central_differences(
            |v| {
                let (tape, _, loss) = run(v);
                tape.value(loss).scalar_value().unwrap()
            },
            &values,
        );
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn fix_beta_averages_available_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let mut fx = spagan_fixture(&mut rng, 7, 3, 3, 1, 3, MergeMode::Mean);
        fx.layer.fix_beta = true;
        fx.layer.activation = Activation::Identity;
        let costs = random_costs(&mut rng, &fx.graph);
        let ps = build_pathset(&fx.graph, &costs, 3, 1.0).unwrap();
        let plan = PathPlan::new(&ps).unwrap();
        let mut tape = Tape::new();
        let leaves = fx.store.register_leaves(&mut tape);
        let x = tape.leaf(fx.features.clone(), false);
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
        let out = spagan_layer_forward(
            &mut tape,
            &leaves,
            &fx.layer,
            &FeatureInput::Dense(x),
            &plan,
            &mut eval_ctx(&mut ctx_rng),
        )
        .unwrap();
        // β is gone: per-center output is the plain mean of the first-level
        // aggregates, which for a center with only the self-path is W h
        let head = &fx.layer.heads[0];
        let h = crate::tensor::dense::matmul(&fx.features, fx.store.value(head.w)).unwrap();
        for i in 0..fx.graph.num_nodes() {
            if fx.graph.degree(i).unwrap() == 0 {
                let got = tape.value(out.output).row(i).to_vec();
                assert_eq!(got, h.row(i).to_vec());
            }
        }
    }

    #[test]
    fn node_pair_attention_covers_all_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let fx = spagan_fixture(&mut rng, 8, 4, 3, 2, 2, MergeMode::Mean);
        let mut tape = Tape::new();
        let per_head = node_pair_attention(
            &fx.layer,
            &fx.store,
            &FeatureInput::Dense({
                let x = fx.features.clone();
                let mut t2 = Tape::new();
                std::mem::swap(&mut tape, &mut t2);
                let id = tape.leaf(x, false);
                id
            }),
            &fx.graph,
            &mut tape,
        )
        .unwrap();
        assert_eq!(per_head.len(), 2);
        for col in &per_head {
            assert_eq!(col.len(), fx.graph.num_directed_edges());
            assert!(col.iter().all(|&a| a > 0.0 && a <= 1.0));
        }
    }
}
