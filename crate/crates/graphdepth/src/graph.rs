//! Pixel-grid graphs and graph convolution.
//!
//! Decoder feature maps are treated as graphs whose nodes are grid cells
//! (row-major order) and whose edges live on the 8-neighbourhood. Adjacency
//! is sparse throughout: a dense matrix at the finest decoder level would
//! need billions of entries, while the 8-neighbourhood support stays at
//! O(8N) edges.

use crate::autodiff::{Arr, Var};
use crate::{Error, Result};
use ndarray::{Array2, IxDyn};

/// How an edge obtains its weight inside [`gcn_forward_var`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EdgeWeight {
    /// Weight fixed at graph-construction time (similarity values,
    /// self-loops, upsampled weights).
    Fixed(f64),
    /// Weight read from the learnable weight vector at this index.
    Indexed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Sparse weighted adjacency over the 8-neighbourhood of a `height x width`
/// grid, plus optional self-loops.
#[derive(Clone, Debug)]
pub struct SparseGraph {
    pub height: usize,
    pub width: usize,
    /// Directed edges `(src, dst, weight)`; no duplicate `(src, dst)` pairs.
    pub edges: Vec<Edge>,
    /// Parallel to `edges`: where each edge's weight comes from during a
    /// differentiable forward pass. `Fixed` entries use `Edge::weight`.
    pub sources: Vec<EdgeWeight>,
}

impl SparseGraph {
    pub fn node_count(&self) -> usize {
        self.height * self.width
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Dense `N x N` adjacency; intended for small graphs and test oracles.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.node_count();
        let mut a = Array2::zeros((n, n));
        for e in &self.edges {
            a[[e.src, e.dst]] = e.weight;
        }
        a
    }
}

/// Node feature matrix: row `i` holds the feature vector of grid node `i`
/// (row-major over the grid).
#[derive(Clone, Debug)]
pub struct NodeFeatures {
    pub values: Array2<f64>,
}

impl NodeFeatures {
    pub fn node_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// Trainable weight matrix of a graph convolution, `C_in x C_out`.
#[derive(Clone, Debug)]
pub struct GraphConvWeights {
    pub w: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LogSoftmax,
    Identity,
}

/// Offsets of the 8-neighbourhood, in the fixed enumeration order used for
/// edge and support indexing.
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// All directed 8-neighbour pairs of the grid, in deterministic row-major /
/// offset order. The position of a pair in this enumeration is its *support
/// index*, which learnable edge-weight vectors are indexed by.
pub fn grid_support(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for r in 0..height {
        for c in 0..width {
            for (dr, dc) in NEIGHBOR_OFFSETS {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr >= 0 && nr < height as isize && nc >= 0 && nc < width as isize {
                    pairs.push((r * width + c, nr as usize * width + nc as usize));
                }
            }
        }
    }
    pairs
}

/// Number of entries a learnable edge-weight vector needs for this grid.
pub fn support_size(height: usize, width: usize) -> usize {
    if height == 0 || width == 0 {
        return 0;
    }
    let corner_like = |n: usize| if n >= 2 { 2 } else { n };
    // Count via per-node neighbour counts: interior 8, edge 5, corner 3.
    let (h_in, w_in) = (height.saturating_sub(2), width.saturating_sub(2));
    let corners = corner_like(height) * corner_like(width);
    if height == 1 && width == 1 {
        return 0;
    }
    if height == 1 || width == 1 {
        let n = height.max(width);
        return 2 * (n - 1); // path graph, both directions
    }
    8 * h_in * w_in + 5 * 2 * (h_in + w_in) + 3 * corners
}

fn cosine_similarity(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    const EPS: f64 = 1e-12;
    // Zero-norm convention: identical zero rows count as similarity 1,
    // a zero row against anything else counts as 0.
    if na < EPS && nb < EPS {
        return 1.0;
    }
    if na < EPS || nb < EPS {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Build the thresholded adjacency over the 8-neighbourhood: edge `(i, j)`
/// exists iff `j` neighbours `i` on the grid and the cosine similarity of
/// their feature rows is at least `p`.
///
/// When `init_weights` is given (one entry per *support* pair, see
/// [`grid_support`]), surviving edges take their weight from it and are
/// marked [`EdgeWeight::Indexed`] so that a differentiable forward pass can
/// route gradients back to the weight vector. Otherwise the similarity value
/// itself becomes the (fixed) weight.
pub fn build_adjacency(
    features: &NodeFeatures,
    grid: (usize, usize),
    p: f64,
    init_weights: Option<&[f64]>,
) -> Result<SparseGraph> {
    let (height, width) = grid;
    if features.node_count() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "build_adjacency: {} feature rows for a {}x{} grid ({} nodes)",
            features.node_count(),
            height,
            width,
            height * width
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "build_adjacency: similarity threshold P={p} outside [0, 1]"
        )));
    }
    let support = grid_support(height, width);
    if let Some(w) = init_weights {
        if w.len() != support.len() {
            return Err(Error::ShapeMismatch(format!(
                "build_adjacency: {} init weights for a support of {} pairs",
                w.len(),
                support.len()
            )));
        }
    }
    let mut edges = Vec::new();
    let mut sources = Vec::new();
    for (support_idx, &(i, j)) in support.iter().enumerate() {
        let sim = cosine_similarity(features.values.row(i), features.values.row(j));
        if sim >= p {
            match init_weights {
                Some(w) => {
                    edges.push(Edge { src: i, dst: j, weight: w[support_idx] });
                    sources.push(EdgeWeight::Indexed(support_idx));
                }
                None => {
                    edges.push(Edge { src: i, dst: j, weight: sim });
                    sources.push(EdgeWeight::Fixed(sim));
                }
            }
        }
    }
    Ok(SparseGraph { height, width, edges, sources })
}

/// `A + I`: give every node a self-loop of weight 1. Existing self-loops are
/// replaced, not accumulated, so the operation is idempotent.
pub fn add_self_loops(graph: &SparseGraph) -> SparseGraph {
    let mut out = graph.clone();
    let mut keep = vec![true; out.edges.len()];
    for (k, e) in out.edges.iter().enumerate() {
        if e.src == e.dst {
            keep[k] = false;
        }
    }
    let mut edges = Vec::with_capacity(out.edges.len() + out.node_count());
    let mut sources = Vec::with_capacity(edges.capacity());
    for (k, e) in out.edges.iter().enumerate() {
        if keep[k] {
            edges.push(*e);
            sources.push(out.sources[k]);
        }
    }
    for i in 0..graph.node_count() {
        edges.push(Edge { src: i, dst: i, weight: 1.0 });
        sources.push(EdgeWeight::Fixed(1.0));
    }
    out.edges = edges;
    out.sources = sources;
    out
}

/// Double the grid resolution. Each coarse node expands to a 2x2 block of
/// fine nodes; a coarse edge induces fine edges of the same weight between
/// block members that are 8-neighbours on the fine grid, and within-block
/// neighbour pairs get weight 1. The 8-neighbourhood support mask is
/// re-applied, so the result is again a valid [`SparseGraph`].
///
/// Upsampled weights are plain values: gradients to learnable coarse weights
/// flow only through the coarse level's own convolution.
pub fn upsample_adjacency(graph: &SparseGraph) -> SparseGraph {
    let (h, w) = (graph.height, graph.width);
    let (fh, fw) = (2 * h, 2 * w);
    let fine_id = |r: usize, c: usize| r * fw + c;
    let block = |node: usize| {
        let (r, c) = (node / w, node % w);
        [
            (2 * r, 2 * c),
            (2 * r, 2 * c + 1),
            (2 * r + 1, 2 * c),
            (2 * r + 1, 2 * c + 1),
        ]
    };
    let neighbors = |a: (usize, usize), b: (usize, usize)| {
        let dr = (a.0 as isize - b.0 as isize).abs();
        let dc = (a.1 as isize - b.1 as isize).abs();
        dr <= 1 && dc <= 1 && (dr, dc) != (0, 0)
    };
    let mut edges = Vec::new();
    // Within-block pairs first.
    for node in 0..graph.node_count() {
        let cells = block(node);
        for &a in &cells {
            for &b in &cells {
                if neighbors(a, b) {
                    edges.push(Edge { src: fine_id(a.0, a.1), dst: fine_id(b.0, b.1), weight: 1.0 });
                }
            }
        }
    }
    // Cross-block edges from coarse edges; coarse self-loops are already
    // covered by the within-block pairs above.
    for e in &graph.edges {
        if e.src == e.dst {
            continue;
        }
        for &a in &block(e.src) {
            for &b in &block(e.dst) {
                if neighbors(a, b) {
                    edges.push(Edge { src: fine_id(a.0, a.1), dst: fine_id(b.0, b.1), weight: e.weight });
                }
            }
        }
    }
    let sources = edges.iter().map(|e| EdgeWeight::Fixed(e.weight)).collect();
    SparseGraph { height: fh, width: fw, edges, sources }
}

/// Merge an upsampled coarser graph with a freshly thresholded adjacency on
/// the fine grid: the similarity mask decides which support pairs survive,
/// and surviving pairs keep the upsampled weight when one exists (falling
/// back to the similarity value).
pub fn merge_adjacency(upsampled: &SparseGraph, rebuilt: &SparseGraph) -> SparseGraph {
    assert_eq!(
        (upsampled.height, upsampled.width),
        (rebuilt.height, rebuilt.width),
        "merge_adjacency: grid mismatch"
    );
    use std::collections::HashMap;
    let mut up: HashMap<(usize, usize), f64> = HashMap::with_capacity(upsampled.edges.len());
    for e in &upsampled.edges {
        up.insert((e.src, e.dst), e.weight);
    }
    let mut out = rebuilt.clone();
    for (k, e) in out.edges.iter_mut().enumerate() {
        if let Some(&w) = up.get(&(e.src, e.dst)) {
            e.weight = w;
            out.sources[k] = EdgeWeight::Fixed(w);
        }
    }
    out
}

/// Sparse graph convolution `Z = sigma(A X W)` on plain values.
///
/// Callers pass a graph that already contains self-loops (`A` here is the
/// self-loop-augmented adjacency). With `row_normalize` each row of the
/// adjacency is divided by its weight sum before aggregation; the default
/// follows the unnormalized definition.
pub fn gcn_forward(
    graph: &SparseGraph,
    features: &NodeFeatures,
    weights: &GraphConvWeights,
    activation: Activation,
    row_normalize: bool,
) -> Result<NodeFeatures> {
    let x = Var::constant(features.values.clone().into_dyn());
    let w = Var::constant(weights.w.clone().into_dyn());
    let out = gcn_forward_var(graph, &x, None, &w, activation, row_normalize)?;
    let values = out
        .value()
        .clone()
        .into_dimensionality()
        .expect("gcn output is 2-D");
    Ok(NodeFeatures { values })
}

/// Differentiable graph convolution. `edge_weights`, when given, supplies the
/// learnable weight vector that [`EdgeWeight::Indexed`] edges read from (and
/// receive gradients through); `Fixed` edges keep their stored weight.
pub fn gcn_forward_var(
    graph: &SparseGraph,
    features: &Var,
    edge_weights: Option<&Var>,
    weights: &Var,
    activation: Activation,
    row_normalize: bool,
) -> Result<Var> {
    let fshape = features.shape().to_vec();
    let wshape = weights.shape().to_vec();
    if fshape.len() != 2 || wshape.len() != 2 {
        return Err(Error::ShapeMismatch(
            "gcn_forward: features and weights must be 2-D".into(),
        ));
    }
    let (n, c_in) = (fshape[0], fshape[1]);
    let c_out = wshape[1];
    if n != graph.node_count() {
        return Err(Error::ShapeMismatch(format!(
            "gcn_forward: {} feature rows for a graph of {} nodes",
            n,
            graph.node_count()
        )));
    }
    if wshape[0] != c_in {
        return Err(Error::ShapeMismatch(format!(
            "gcn_forward: weight rows {} != feature channels {}",
            wshape[0], c_in
        )));
    }
    if c_out == 0 {
        return Err(Error::InvalidArgument(
            "gcn_forward: zero output channels".into(),
        ));
    }
    let aggregated = crate::graph::aggregate_var(graph, features, edge_weights, row_normalize);
    let projected = aggregated.matmul(weights);
    let out = match activation {
        Activation::Relu => projected.relu(),
        Activation::LogSoftmax => projected.log_softmax_rows(),
        Activation::Identity => projected,
    };
    if out.value().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gcn_forward output".into()));
    }
    Ok(out)
}

/// Sparse aggregation `(A X)` as a custom tape op: `z_i = sum_j w_ij x_j`
/// over the edge list, with optional per-row weight normalization.
pub(crate) fn aggregate_var(
    graph: &SparseGraph,
    x: &Var,
    edge_weights: Option<&Var>,
    row_normalize: bool,
) -> Var {
    let n = graph.node_count();
    let c = x.shape()[1];
    let edges: Vec<(usize, usize, EdgeWeight, f64)> = graph
        .edges
        .iter()
        .zip(&graph.sources)
        .map(|(e, s)| (e.src, e.dst, *s, e.weight))
        .collect();

    let weight_of = |src: EdgeWeight, fixed: f64, wv: Option<&Arr>| -> f64 {
        match (src, wv) {
            (EdgeWeight::Indexed(k), Some(w)) => w[[k]],
            _ => fixed,
        }
    };

    let wv_arr = edge_weights.map(|w| w.value().clone());
    let mut row_sum = vec![0.0f64; n];
    if row_normalize {
        for &(src, _, s, fixed) in &edges {
            row_sum[src] += weight_of(s, fixed, wv_arr.as_ref());
        }
    }
    let mut z = Arr::zeros(IxDyn(&[n, c]));
    for &(src, dst, s, fixed) in &edges {
        let mut w = weight_of(s, fixed, wv_arr.as_ref());
        if row_normalize {
            let rs = row_sum[src];
            if rs.abs() > 0.0 {
                w /= rs;
            }
        }
        for ch in 0..c {
            z[[src, ch]] += w * x.value()[[dst, ch]];
        }
    }

    crate::autodiff::custom_op2(
        x,
        edge_weights,
        z.clone(),
        move |g, xv, wv| {
            // Gradients of z_i = sum_e (w_e / s_i) x_j with s_i = sum of
            // row i's weights when normalizing (else s_i = 1).
            let mut gx = Arr::zeros(IxDyn(&[n, c]));
            let mut gw = wv.map(|w| Arr::zeros(w.raw_dim()));
            let mut row_sum = vec![0.0f64; n];
            if row_normalize {
                for &(src, _, s, fixed) in &edges {
                    row_sum[src] += weight_of(s, fixed, wv);
                }
            }
            for &(src, dst, s, fixed) in &edges {
                let raw_w = weight_of(s, fixed, wv);
                let (w, rs) = if row_normalize {
                    let rs = row_sum[src];
                    (if rs.abs() > 0.0 { raw_w / rs } else { 0.0 }, rs)
                } else {
                    (raw_w, 1.0)
                };
                for ch in 0..c {
                    gx[[dst, ch]] += w * g[[src, ch]];
                }
                if let (EdgeWeight::Indexed(k), Some(gw)) = (s, gw.as_mut()) {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        let dzdw = if row_normalize {
                            if rs.abs() > 0.0 {
                                (xv[[dst, ch]] - z[[src, ch]]) / rs
                            } else {
                                0.0
                            }
                        } else {
                            xv[[dst, ch]]
                        };
                        dot += g[[src, ch]] * dzdw;
                    }
                    gw[[k]] += dot;
                }
            }
            (gx, gw)
        },
    )
}
