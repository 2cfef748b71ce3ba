//! Coarse-to-fine hand mesh machinery: the submesh hierarchy, graph
//! convolutions over it, level-to-level upsampling and the final linear head
//! to the full mesh.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const OPERATORS: &[&str] = &["gcn_block", "upsample_level", "upsample_to_full"];

pub const LEVEL_VERTEX_COUNTS: [usize; 3] = [63, 126, 252];
pub const FULL_MESH_VERTICES: usize = 778;

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("expected {expected} levels, found {found}")]
    LevelCount { expected: usize, found: usize },
    #[error("level {level}: vertex count mismatch, expected {expected}, found {found}")]
    VertexCount { level: usize, expected: usize, found: usize },
    #[error("full mesh vertex count mismatch, expected {expected}, found {found}")]
    FullCount { expected: usize, found: usize },
    #[error("level {level}: self-loop at vertex {vertex}")]
    SelfLoop { level: usize, vertex: usize },
    #[error("level {level}: edge ({i}, {j}) must be listed with i < j")]
    EdgeOrder { level: usize, i: usize, j: usize },
    #[error("level {level}: duplicate edge ({i}, {j})")]
    DuplicateEdge { level: usize, i: usize, j: usize },
    #[error("level {level}: edge ({i}, {j}) references a vertex outside 0..{n}")]
    EdgeOutOfRange { level: usize, i: usize, j: usize, n: usize },
    #[error("level {level}: asymmetric adjacency at ({i}, {j})")]
    Asymmetric { level: usize, i: usize, j: usize },
    #[error("level {level}: vertex {vertex} has no neighbours")]
    IsolatedVertex { level: usize, vertex: usize },
    #[error("level {level}: upsample map has shape {found:?}, expected {expected:?}")]
    UpsampleShape { level: usize, expected: Vec<usize>, found: Vec<usize> },
    #[error("level {level}: upsample row {row} sums to {sum}, not normalized to 1")]
    UpsampleRowSum { level: usize, row: usize, sum: f64 },
    #[error("level {level}: upsample map contains a non-finite value")]
    UpsampleNonFinite { level: usize },
    #[error("full mesh edges: {0}")]
    FullEdges(Box<TopologyError>),
    #[error("full mesh edges are required but missing")]
    MissingFullEdges,
}

/// Symmetric normalized adjacency `D^{-1/2}(A + I)D^{-1/2}` in row-list form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    rows: Vec<Vec<(usize, f64)>>,
}

impl NormalizedAdjacency {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut nbrs: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(i, j) in edges {
            nbrs[i].push(j);
            nbrs[j].push(i);
        }
        let inv_sqrt: Vec<f64> = nbrs.iter().map(|v| 1.0 / (v.len() as f64).sqrt()).collect();
        let rows = nbrs
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut r: Vec<(usize, f64)> = v.iter().map(|&j| (j, inv_sqrt[i] * inv_sqrt[j])).collect();
                r.sort_by_key(|e| e.0);
                r
            })
            .collect();
        Self { rows }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Stored entries including the self loops.
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `Â · x` for an `n × d` matrix.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if n != self.n() {
            return Err(Error::shape("normalized_adjacency", &[self.n(), self.n()], x.shape()));
        }
        let mut out = Tensor::zeros(&[n, d]);
        for (i, row) in self.rows.iter().enumerate() {
            let dst = out.row_mut(i);
            for &(j, w) in row {
                for (o, v) in dst.iter_mut().zip(x.row(j)) {
                    *o += w * v;
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Tensor {
        let n = self.n();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                t.set(i, j, w);
            }
        }
        t
    }
}

/// Converts a dense 0/1 adjacency matrix to an `i < j` edge list, rejecting
/// self loops and asymmetry.
pub fn edges_from_dense(level: usize, adj: &Tensor) -> std::result::Result<Vec<(usize, usize)>, TopologyError> {
    let (n, m) = adj.dims2().map_err(|_| TopologyError::VertexCount {
        level,
        expected: adj.shape()[0],
        found: adj.len(),
    })?;
    if n != m {
        return Err(TopologyError::VertexCount { level, expected: n, found: m });
    }
    let mut edges = Vec::new();
    for i in 0..n {
        if adj.at(i, i) != 0.0 {
            return Err(TopologyError::SelfLoop { level, vertex: i });
        }
        for j in i + 1..n {
            if adj.at(i, j) != adj.at(j, i) {
                return Err(TopologyError::Asymmetric { level, i, j });
            }
            if adj.at(i, j) != 0.0 {
                edges.push((i, j));
            }
        }
    }
    Ok(edges)
}

fn validate_edges(level: usize, n: usize, edges: &[(usize, usize)]) -> std::result::Result<(), TopologyError> {
    let mut seen = BTreeSet::new();
    let mut degree = vec![0usize; n];
    for &(i, j) in edges {
        if i == j {
            return Err(TopologyError::SelfLoop { level, vertex: i });
        }
        if i >= n || j >= n {
            return Err(TopologyError::EdgeOutOfRange { level, i, j, n });
        }
        if i > j {
            return Err(TopologyError::EdgeOrder { level, i, j });
        }
        if !seen.insert((i, j)) {
            return Err(TopologyError::DuplicateEdge { level, i, j });
        }
        degree[i] += 1;
        degree[j] += 1;
    }
    if let Some(vertex) = degree.iter().position(|&d| d == 0) {
        return Err(TopologyError::IsolatedVertex { level, vertex });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshLevel {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    /// Row-stochastic map to the next level (or to the full mesh for the
    /// last level), `n_next × n`.
    pub upsample: Tensor,
    pub adjacency: NormalizedAdjacency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmeshHierarchy {
    pub levels: Vec<MeshLevel>,
    pub full_n: usize,
    pub full_edges: Vec<(usize, usize)>,
}

impl SubmeshHierarchy {
    /// Builds and validates a hierarchy from raw parts.
    pub fn new(
        raw_levels: Vec<(usize, Vec<(usize, usize)>, Tensor)>,
        full_n: usize,
        full_edges: Vec<(usize, usize)>,
    ) -> std::result::Result<Self, TopologyError> {
        let counts: Vec<usize> = raw_levels.iter().map(|l| l.0).collect();
        let mut levels = Vec::with_capacity(raw_levels.len());
        for (t, (n, edges, upsample)) in raw_levels.into_iter().enumerate() {
            validate_edges(t, n, &edges)?;
            let next = counts.get(t + 1).copied().unwrap_or(full_n);
            if upsample.shape() != [next, n] {
                return Err(TopologyError::UpsampleShape {
                    level: t,
                    expected: vec![next, n],
                    found: upsample.shape().to_vec(),
                });
            }
            if !upsample.is_finite() {
                return Err(TopologyError::UpsampleNonFinite { level: t });
            }
            for row in 0..next {
                let sum: f64 = upsample.row(row).iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(TopologyError::UpsampleRowSum { level: t, row, sum });
                }
            }
            let adjacency = NormalizedAdjacency::from_edges(n, &edges);
            levels.push(MeshLevel {
                n,
                edges,
                upsample,
                adjacency,
            });
        }
        if !full_edges.is_empty() {
            validate_edges(levels.len(), full_n, &full_edges)
                .map_err(|e| TopologyError::FullEdges(Box::new(e)))?;
        }
        Ok(Self {
            levels,
            full_n,
            full_edges,
        })
    }

    /// Checks the level and full-mesh vertex counts.
    pub fn check_counts(&self, levels: &[usize], full_n: usize) -> std::result::Result<(), TopologyError> {
        if self.levels.len() != levels.len() {
            return Err(TopologyError::LevelCount {
                expected: levels.len(),
                found: self.levels.len(),
            });
        }
        for (t, (l, &n)) in self.levels.iter().zip(levels).enumerate() {
            if l.n != n {
                return Err(TopologyError::VertexCount {
                    level: t,
                    expected: n,
                    found: l.n,
                });
            }
        }
        if self.full_n != full_n {
            return Err(TopologyError::FullCount {
                expected: full_n,
                found: self.full_n,
            });
        }
        Ok(())
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.n).collect()
    }

    pub fn level(&self, t: usize) -> Result<&MeshLevel> {
        self.levels
            .get(t)
            .ok_or_else(|| Error::Config(format!("hierarchy has no level {t}")))
    }

    pub fn full_edges(&self) -> Result<&[(usize, usize)]> {
        if self.full_edges.is_empty() {
            return Err(TopologyError::MissingFullEdges.into());
        }
        Ok(&self.full_edges)
    }

    pub fn to_file(&self) -> TopologyFile {
        TopologyFile {
            levels: self
                .levels
                .iter()
                .map(|l| LevelFile {
                    n: l.n,
                    edges: l.edges.iter().map(|&(i, j)| [i, j]).collect(),
                    upsample: DenseFile {
                        shape: l.upsample.shape().to_vec(),
                        data: l.upsample.data().to_vec(),
                    },
                })
                .collect(),
            full_n: self.full_n,
            full_edges: self.full_edges.iter().map(|&(i, j)| [i, j]).collect(),
        }
    }

    pub fn from_file(file: TopologyFile) -> Result<Self> {
        let mut raw = Vec::with_capacity(file.levels.len());
        for (t, l) in file.levels.into_iter().enumerate() {
            let up = Tensor::new(l.upsample.shape.clone(), l.upsample.data).map_err(|_| {
                TopologyError::UpsampleShape {
                    level: t,
                    expected: l.upsample.shape.clone(),
                    found: vec![],
                }
            })?;
            raw.push((l.n, l.edges.into_iter().map(|[i, j]| (i, j)).collect(), up));
        }
        let full_edges = file.full_edges.into_iter().map(|[i, j]| (i, j)).collect();
        Ok(Self::new(raw, file.full_n, full_edges)?)
    }
}

/// JSON layout of a topology file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    pub levels: Vec<LevelFile>,
    pub full_n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub full_edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelFile {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    pub upsample: DenseFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseFile {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Loads a topology file and checks it against the default
/// 63/126/252 → 778 hierarchy.
pub fn load_topology(path: &Path) -> Result<SubmeshHierarchy> {
    let text = std::fs::read_to_string(path)?;
    let file: TopologyFile = serde_json::from_str(&text)?;
    let h = SubmeshHierarchy::from_file(file)?;
    h.check_counts(&LEVEL_VERTEX_COUNTS, FULL_MESH_VERTICES)?;
    Ok(h)
}

pub fn save_topology(path: &Path, h: &SubmeshHierarchy) -> Result<()> {
    let text = serde_json::to_string(&h.to_file())?;
    std::fs::write(path, text)?;
    Ok(())
}

fn ring_edges(n: usize, reach: usize) -> BTreeSet<(usize, usize)> {
    let mut set = BTreeSet::new();
    for i in 0..n {
        for s in 1..=reach {
            let j = (i + s) % n;
            if i != j {
                set.insert((i.min(j), i.max(j)));
            }
        }
    }
    set
}

/// Deterministic stand-in for a real hand topology with the default counts.
///
/// Level 0 is a ring lattice (neighbours at ring distance 1 and 2) plus a few
/// seeded chords. Each refinement keeps the coarse vertices at even indices
/// and inserts edge midpoints at odd indices, so the upsample rows are either
/// one-hot or `(½, ½)`. The last level maps onto the 778-vertex ring by
/// linear interpolation at seeded sample positions.
pub fn synthesize_topology(seed: u64) -> SubmeshHierarchy {
    let mut rng = SeededRng::new(seed);
    let n0 = LEVEL_VERTEX_COUNTS[0];
    let mut edges = ring_edges(n0, 2);
    for _ in 0..n0 / 8 {
        let i = rng.below(n0);
        let j = (i + 3 + rng.below(n0 - 6)) % n0;
        edges.insert((i.min(j), i.max(j)));
    }
    let mut raw = Vec::new();
    let mut n = n0;
    for t in 0..LEVEL_VERTEX_COUNTS.len() {
        let next = LEVEL_VERTEX_COUNTS.get(t + 1).copied();
        let upsample = match next {
            Some(m) => {
                debug_assert_eq!(m, 2 * n);
                let mut u = Tensor::zeros(&[m, n]);
                for i in 0..n {
                    u.set(2 * i, i, 1.0);
                    u.set(2 * i + 1, i, 0.5);
                    u.set(2 * i + 1, (i + 1) % n, 0.5);
                }
                u
            }
            None => {
                let full = FULL_MESH_VERTICES;
                let mut u = Tensor::zeros(&[full, n]);
                let offset = rng.uniform(0.0, 0.5);
                for f in 0..full {
                    let pos = (f as f64 + offset) * n as f64 / full as f64;
                    let i0 = pos.floor() as usize % n;
                    let frac = pos - pos.floor();
                    u.set(f, i0, 1.0 - frac);
                    let i1 = (i0 + 1) % n;
                    u.set(f, i1, u.at(f, i1) + frac);
                }
                u
            }
        };
        raw.push((n, edges.iter().copied().collect::<Vec<_>>(), upsample));
        if let Some(m) = next {
            let mut fine = ring_edges(m, 2);
            for &(i, j) in &edges {
                fine.insert((2 * i, 2 * j));
            }
            edges = fine;
            n = m;
        }
    }
    let full_edges = ring_edges(FULL_MESH_VERTICES, 2).into_iter().collect();
    SubmeshHierarchy::new(raw, FULL_MESH_VERTICES, full_edges).expect("synthetic topology is valid")
}

/// Number of vertices reachable from vertex 0.
pub fn connected_size(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut nbrs = vec![Vec::new(); n];
    for &(i, j) in edges {
        nbrs[i].push(j);
        nbrs[j].push(i);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = queue.pop_front() {
        for &u in &nbrs[v] {
            if !seen[u] {
                seen[u] = true;
                count += 1;
                queue.push_back(u);
            }
        }
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub fn name(self) -> &'static str {
        match self {
            Hand::Left => "left",
            Hand::Right => "right",
        }
    }
}

/// Per-hand vertex features at one hierarchy level.
#[derive(Debug, Clone, PartialEq)]
pub struct HandVertexFeatures {
    pub hand: Hand,
    pub level: usize,
    pub features: Tensor,
}

impl HandVertexFeatures {
    pub fn new(hand: Hand, level: usize, features: Tensor) -> Self {
        Self { hand, level, features }
    }

    fn check_level<'h>(&self, h: &'h SubmeshHierarchy) -> Result<&'h MeshLevel> {
        let lvl = h.level(self.level)?;
        let (n, _) = self.features.dims2()?;
        if n != lvl.n {
            return Err(TopologyError::VertexCount {
                level: self.level,
                expected: lvl.n,
                found: n,
            }
            .into());
        }
        Ok(lvl)
    }
}

/// Root-relative vertex positions of one hand, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct HandMesh {
    pub hand: Hand,
    pub vertices: Tensor,
}

impl HandMesh {
    pub fn new(hand: Hand, vertices: Tensor) -> Result<Self> {
        let (_, c) = vertices.dims2()?;
        if c != 3 {
            return Err(Error::shape("hand_mesh", vertices.shape(), &[vertices.shape()[0], 3]));
        }
        Ok(Self { hand, vertices })
    }

    /// Finite and within one meter of the root.
    pub fn check_bounds(&self) -> Result<()> {
        if !self.vertices.is_finite() {
            return Err(Error::NonFinite(format!("{} hand mesh", self.hand.name())));
        }
        let m = self.vertices.max_abs();
        if m >= 1.0 {
            return Err(Error::Degenerate(format!(
                "{} hand mesh coordinate {m} m exceeds the 1 m sanity bound",
                self.hand.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GcnTrace {
    aggregated: Tensor,
    pre: Tensor,
}

/// `act(Â · X · W)` with a normalized adjacency.
pub fn gcn_block_traced(
    features: &HandVertexFeatures,
    adjacency: &NormalizedAdjacency,
    weight: &Tensor,
    act: Activation,
) -> Result<(HandVertexFeatures, GcnTrace)> {
    let aggregated = adjacency.apply(&features.features)?;
    let pre = aggregated.matmul(weight)?;
    let out = act.forward(&pre);
    Ok((
        HandVertexFeatures::new(features.hand, features.level, out),
        GcnTrace { aggregated, pre },
    ))
}

pub fn gcn_block(
    features: &HandVertexFeatures,
    adjacency: &NormalizedAdjacency,
    weight: &Tensor,
    act: Activation,
) -> Result<HandVertexFeatures> {
    Ok(gcn_block_traced(features, adjacency, weight, act)?.0)
}

/// Returns `(d_features, d_weight)`.
pub fn gcn_block_backward(
    trace: &GcnTrace,
    adjacency: &NormalizedAdjacency,
    weight: &Tensor,
    act: Activation,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d_pre = act.backward(&trace.pre, d_out)?;
    let d_weight = trace.aggregated.t_matmul(&d_pre)?;
    // Â is symmetric
    let d_features = adjacency.apply(&d_pre.matmul_t(weight)?)?;
    Ok((d_features, d_weight))
}

/// `U_t · X`, moving features from level `t` to `t + 1`.
pub fn upsample_level(features: &HandVertexFeatures, hierarchy: &SubmeshHierarchy) -> Result<HandVertexFeatures> {
    let lvl = features.check_level(hierarchy)?;
    if features.level + 1 >= hierarchy.levels.len() {
        return Err(Error::Config(format!(
            "level {} is the top of the hierarchy; use the full-mesh head",
            features.level
        )));
    }
    Ok(HandVertexFeatures::new(
        features.hand,
        features.level + 1,
        lvl.upsample.matmul(&features.features)?,
    ))
}

pub fn upsample_level_backward(level: &MeshLevel, d_out: &Tensor) -> Result<Tensor> {
    level.upsample.t_matmul(d_out)
}

/// Linear head from level-2 features to full-mesh coordinates:
/// `upsample · (X · feat) + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullMeshHead {
    /// `d × 3`
    pub feat: Tensor,
    /// `full_n × N_2`
    pub upsample: Tensor,
    /// `full_n × 3`
    pub bias: Tensor,
}

impl FullMeshHead {
    pub fn zeros_like(&self) -> Self {
        Self {
            feat: Tensor::zeros(self.feat.shape()),
            upsample: Tensor::zeros(self.upsample.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    projected: Tensor,
}

pub fn upsample_to_full_traced(
    features: &HandVertexFeatures,
    hierarchy: &SubmeshHierarchy,
    head: &FullMeshHead,
) -> Result<(HandMesh, HeadTrace)> {
    features.check_level(hierarchy)?;
    if features.level + 1 != hierarchy.levels.len() {
        return Err(Error::Config(format!(
            "full-mesh head expects the top level {}, got level {}",
            hierarchy.levels.len() - 1,
            features.level
        )));
    }
    let projected = features.features.matmul(&head.feat)?;
    let coords = head.upsample.matmul(&projected)?.add(&head.bias)?;
    Ok((HandMesh::new(features.hand, coords)?, HeadTrace { projected }))
}

pub fn upsample_to_full(
    features: &HandVertexFeatures,
    hierarchy: &SubmeshHierarchy,
    head: &FullMeshHead,
) -> Result<HandMesh> {
    Ok(upsample_to_full_traced(features, hierarchy, head)?.0)
}

/// Returns `(d_features, head grads)`.
pub fn upsample_to_full_backward(
    trace: &HeadTrace,
    features: &Tensor,
    head: &FullMeshHead,
    d_mesh: &Tensor,
) -> Result<(Tensor, FullMeshHead)> {
    let d_projected = head.upsample.t_matmul(d_mesh)?;
    let grads = FullMeshHead {
        feat: features.t_matmul(&d_projected)?,
        upsample: d_mesh.matmul_t(&trace.projected)?,
        bias: d_mesh.clone(),
    };
    Ok((d_projected.matmul_t(&head.feat)?, grads))
}
