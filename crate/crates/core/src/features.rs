//! Per-point descriptors: a static-graph EdgeConv stack followed by a
//! residual cross-attention refinement, and the scaled dot-product
//! similarity between the two descriptor sets.
//!
//! The neighbor graph is built once per forward pass on the (centered)
//! input coordinates and shared by every EdgeConv layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{nearest_neighbors, PointCloud};
use crate::error::{config, Error, Result};
use crate::gradcore::{NodeId, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    /// Neighbors per point in the EdgeConv graph.
    pub k: usize,
    /// Output width of each EdgeConv layer.
    pub widths: Vec<usize>,
    /// Descriptor dimension `d`.
    pub dim: usize,
    pub heads: usize,
    /// Negative-side slope of the leaky rectifier.
    pub slope: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { k: 16, widths: vec![32, 64], dim: 64, heads: 1, slope: 0.2 }
    }
}

impl FeatureConfig {
    /// Full-size network: four EdgeConv layers, K = 24, d = 512.
    pub fn large() -> Self {
        Self { k: 24, widths: vec![64, 64, 128, 256], dim: 512, heads: 1, slope: 0.2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(config("knn k must be at least 1"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(config("edgeconv widths must be a nonempty list of positive sizes"));
        }
        if self.dim == 0 {
            return Err(config("feature dim must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(config(format!(
                "attention heads ({}) must divide the feature dim ({})",
                self.heads, self.dim
            )));
        }
        Ok(())
    }

    pub fn validate_for(&self, n_points: usize) -> Result<()> {
        self.validate()?;
        if self.k >= n_points {
            return Err(config(format!("knn k = {} needs more than {} points", self.k, n_points)));
        }
        Ok(())
    }
}

/// Neighbor table: row `i` holds the `k` nearest other points of point `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    k: usize,
    flat: Vec<usize>,
}

impl NeighborGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.flat.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.flat[i * self.k..(i + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.flat
    }
}

/// Euclidean K-nearest-neighbor graph excluding self, ties to lower index.
pub fn knn_graph(points: &PointCloud, k: usize) -> Result<NeighborGraph> {
    if k == 0 || k >= points.len() {
        return Err(config(format!("knn k = {k} out of range for {} points", points.len())));
    }
    let flat = nearest_neighbors(points, k).concat();
    Ok(NeighborGraph { k, flat })
}

/// Learned parameters, ordered and named; the order is fixed by the config.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-b..=b))
}

fn layout(cfg: &FeatureConfig) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut c_in = 3;
    for (l, &w) in cfg.widths.iter().enumerate() {
        out.push((format!("edge{l}.weight"), 2 * c_in, w));
        out.push((format!("edge{l}.bias"), 1, w));
        c_in = w;
    }
    let cat: usize = cfg.widths.iter().sum();
    out.push(("proj.weight".into(), cat, cfg.dim));
    out.push(("proj.bias".into(), 1, cfg.dim));
    let dh = cfg.dim / cfg.heads;
    for h in 0..cfg.heads {
        for part in ["query", "key", "value"] {
            out.push((format!("attn{h}.{part}"), cfg.dim, dh));
        }
    }
    out.push(("attn.out.weight".into(), cfg.dim, cfg.dim));
    out.push(("attn.out.bias".into(), 1, cfg.dim));
    out
}

impl FeatureParams {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization from `seed`.
    pub fn init(cfg: &FeatureConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut fan_in = 0;
        for (name, r, c) in layout(cfg) {
            // biases share the fan-in of the weight right before them
            if !name.ends_with(".bias") {
                fan_in = r;
            }
            tensors.push(uniform(&mut rng, r, c, fan_in));
            names.push(name);
        }
        Ok(Self { names, tensors })
    }

    /// Rebuilds from named tensors, checking them against `cfg`'s layout.
    pub fn from_named(cfg: &FeatureConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(cfg);
        if expected.len() != named.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, r, c), (got, t)) in expected.iter().zip(&named) {
            if name != got || t.rows() != *r || t.cols() != *c {
                return Err(Error::Input(format!(
                    "parameter {got} {:?} does not match expected {name} [{r}, {c}]",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, cfg: &FeatureConfig) -> BoundParams {
        let ids: Vec<NodeId> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        BoundParams::from_ids(ids, cfg)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Linear {
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let h = tape.matmul(x, self.weight)?;
        Ok(tape.add_row(h, self.bias)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionHead {
    pub query: NodeId,
    pub key: NodeId,
    pub value: NodeId,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: Vec<AttentionHead>,
    pub out: Linear,
}

/// Parameter tensors as tape nodes, grouped by role.
#[derive(Debug, Clone)]
pub struct BoundParams {
    /// Same order as [`FeatureParams::tensors`].
    pub ids: Vec<NodeId>,
    pub edge: Vec<Linear>,
    pub proj: Linear,
    pub attention: AttentionParams,
}

impl BoundParams {
    /// Groups already-registered leaves, given in layout order.
    pub fn from_ids(ids: Vec<NodeId>, cfg: &FeatureConfig) -> Self {
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("layout matches config");
        let edge = cfg.widths.iter().map(|_| Linear { weight: next(), bias: next() }).collect();
        let proj = Linear { weight: next(), bias: next() };
        let heads = (0..cfg.heads)
            .map(|_| AttentionHead { query: next(), key: next(), value: next() })
            .collect();
        let out = Linear { weight: next(), bias: next() };
        Self { ids, edge, proj, attention: AttentionParams { heads, out } }
    }
}

/// One EdgeConv layer: `out_i = max_j leaky(W·[f_i ; f_j − f_i] + b)` over
/// the graph neighbors `j` of `i`.
pub fn edgeconv(
    tape: &mut Tape,
    features: NodeId,
    graph: &NeighborGraph,
    layer: &Linear,
    slope: f64,
) -> Result<NodeId> {
    let n = tape.value(features).rows();
    if graph.len() != n {
        return Err(Error::Input(format!("graph has {} rows, features have {n}", graph.len())));
    }
    let k = graph.k();
    let c_in = tape.value(features).cols();
    let w_rows = tape.value(layer.weight).rows();
    if w_rows != 2 * c_in {
        return Err(crate::GradError::Shape {
            op: "edgeconv",
            detail: format!("weight has {w_rows} rows, edge features have {}", 2 * c_in),
        }
        .into());
    }
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let fi = tape.gather_rows(features, &centers)?;
    let fj = tape.gather_rows(features, graph.flat())?;
    let diff = tape.sub(fj, fi)?;
    let edge = tape.concat_cols(&[fi, diff])?;
    let h = layer.apply(tape, edge)?;
    let h = tape.leaky_relu(h, slope)?;
    Ok(tape.max_pool_groups(h, k)?)
}

/// EdgeConv stack on centered coordinates, outputs concatenated and
/// projected to `d` columns.
pub fn point_features(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &FeatureConfig,
    cloud: &PointCloud,
) -> Result<NodeId> {
    cfg.validate_for(cloud.len())?;
    let centered = cloud.centered();
    let graph = knn_graph(&centered, cfg.k)?;
    let mut f = tape.constant(centered.to_tensor());
    let mut outs = Vec::with_capacity(params.edge.len());
    for layer in &params.edge {
        f = edgeconv(tape, f, &graph, layer, cfg.slope)?;
        outs.push(f);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    params.proj.apply(tape, cat)
}

/// Result of [`cross_attention`], with the attention weight matrices of
/// each head for inspection.
#[derive(Debug, Clone)]
pub struct Attended {
    pub phi_x: NodeId,
    pub phi_y: NodeId,
    pub weights_xy: Vec<NodeId>,
    pub weights_yx: Vec<NodeId>,
}

// η(A, B): queries from A, keys and values from B, then a linear map.
fn eta(tape: &mut Tape, a: NodeId, b: NodeId, p: &AttentionParams) -> Result<(NodeId, Vec<NodeId>)> {
    let mut heads = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let q = tape.matmul(a, h.query)?;
        let k = tape.matmul(b, h.key)?;
        let v = tape.matmul(b, h.value)?;
        let dh = tape.value(q).cols() as f64;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, 1.0 / dh.sqrt())?;
        let w = tape.softmax_rows(logits)?;
        heads.push(tape.matmul(w, v)?);
        weights.push(w);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    Ok((p.out.apply(tape, cat)?, weights))
}

/// `Φ_X = F_X + η(F_X, F_Y)` and `Φ_Y = F_Y + η(F_Y, F_X)`.
pub fn cross_attention(
    tape: &mut Tape,
    fx: NodeId,
    fy: NodeId,
    params: &AttentionParams,
) -> Result<Attended> {
    let (a, b) = (tape.value(fx), tape.value(fy));
    if a.cols() != b.cols() {
        return Err(crate::GradError::Shape {
            op: "cross_attention",
            detail: format!("feature dims {} and {}", a.cols(), b.cols()),
        }
        .into());
    }
    let (ex, weights_xy) = eta(tape, fx, fy, params)?;
    let (ey, weights_yx) = eta(tape, fy, fx, params)?;
    let phi_x = tape.add(fx, ex)?;
    let phi_y = tape.add(fy, ey)?;
    Ok(Attended { phi_x, phi_y, weights_xy, weights_yx })
}

/// `S = Φ_X Φ_Yᵀ / √d`.
pub fn similarity(tape: &mut Tape, phi_x: NodeId, phi_y: NodeId) -> Result<NodeId> {
    let d = tape.value(phi_x).cols();
    if tape.value(phi_y).cols() != d {
        return Err(crate::GradError::Shape {
            op: "similarity",
            detail: format!("{:?} vs {:?}", tape.value(phi_x).shape(), tape.value(phi_y).shape()),
        }
        .into());
    }
    let yt = tape.transpose(phi_y)?;
    let s = tape.matmul(phi_x, yt)?;
    Ok(tape.scale(s, 1.0 / (d as f64).sqrt())?)
}

/// Descriptors of both clouds plus their similarity matrix.
#[derive(Debug, Clone)]
pub struct Descriptors {
    pub phi_x: NodeId,
    pub phi_y: NodeId,
    pub similarity: NodeId,
}

/// Full extractor: EdgeConv features of both clouds (shared weights),
/// cross-attention, similarity.
pub fn describe(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &FeatureConfig,
    x: &PointCloud,
    y: &PointCloud,
) -> Result<Descriptors> {
    let fx = point_features(tape, params, cfg, x)?;
    let fy = point_features(tape, params, cfg, y)?;
    let att = cross_attention(tape, fx, fy, &params.attention)?;
    let s = similarity(tape, att.phi_x, att.phi_y)?;
    Ok(Descriptors { phi_x: att.phi_x, phi_y: att.phi_y, similarity: s })
}
