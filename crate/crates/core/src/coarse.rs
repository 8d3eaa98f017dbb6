//! Coarse alignment with an embedded deformation graph.
//!
//! A sparse set of nodes carries affine transforms `(Aⱼ, tⱼ)`; every source
//! point is deformed by a blend of the transforms of nearby nodes. The
//! transforms are optimized against a subsampled alignment term plus ARAP,
//! smoothness and rotation regularizers, then the dense result seeds the
//! fine stage.

use std::time::Instant;

use crate::energy::{
    alignment_error, arap_energy, compute_sigma, default_landmark_weight, landmark_energy, CorrespondenceSet,
    DeformationState, Landmark,
};
use crate::fine::{update_rotation, IterationRecord, RotationTerms, Weighting, DEFAULT_DAMPING};
use crate::geometry::dijkstra;
use crate::kdtree::SpatialIndex;
use crate::sparse::{CachedLdl, SparseSymmetric};
use crate::variants::{pair_weight, point_rows, MetricKind, WeightScheme};
use crate::{Error, Mat3, Result, Surface, Vec3};

pub use crate::rotation::project_rotation;

/// Unknowns per node: the columns of `A` followed by `t`.
pub const NODE_DOF: usize = 12;

/// Proximal diagonal added to every coarse system.
pub const COARSE_REGULARIZER: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseConfig {
    pub w_arap: f64,
    pub w_smo: f64,
    pub w_rot: f64,
    pub sample_count: usize,
    /// Node radius in units of the mean source edge length.
    pub radius_multiplier: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub metric: MetricKind,
    pub weights: WeightScheme,
    pub sigma: Option<f64>,
    pub loss_scale: Option<f64>,
    pub w_landmark: Option<f64>,
    /// Weight `μ` of the step penalty `(μ/|V|)‖V̂ − V̂ₖ‖²` on dense positions.
    pub damping: f64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        CoarseConfig {
            w_arap: 500.0,
            w_smo: 0.01,
            w_rot: 1e-4,
            sample_count: 3000,
            radius_multiplier: 10.0,
            max_iters: 30,
            tol: 1e-3,
            metric: MetricKind::Sp2p,
            weights: WeightScheme::RobustGaussian,
            sigma: None,
            loss_scale: None,
            w_landmark: None,
            damping: DEFAULT_DAMPING,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeTransform {
    pub a: Mat3,
    pub t: Vec3,
}

impl NodeTransform {
    pub fn identity() -> Self {
        NodeTransform { a: Mat3::identity(), t: Vec3::zeros() }
    }

    fn to_x(self) -> [f64; NODE_DOF] {
        let mut x = [0.0; NODE_DOF];
        for k in 0..3 {
            for d in 0..3 {
                x[3 * k + d] = self.a[(d, k)];
            }
            x[9 + k] = self.t[k];
        }
        x
    }

    fn from_x(x: &[f64]) -> Self {
        NodeTransform {
            a: Mat3::from_fn(|d, k| x[3 * k + d]),
            t: Vec3::new(x[9], x[10], x[11]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeformationGraph {
    /// Source index of every node.
    pub nodes: Vec<usize>,
    pub positions: Vec<Vec3>,
    /// Undirected node pairs `(a, b)`, `a < b`.
    pub edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    pub transforms: Vec<NodeTransform>,
    /// Per source point: `(node, weight)` for every node within the radius.
    pub influence: Vec<Vec<(usize, f64)>>,
    pub radius: f64,
}

/// Unnormalized influence `(1 − D²/R²)³`.
pub fn influence_kernel(d: f64, radius: f64) -> f64 {
    let x = 1.0 - d * d / (radius * radius);
    x * x * x
}

impl DeformationGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn reset(&mut self) {
        self.transforms.iter_mut().for_each(|t| *t = NodeTransform::identity());
    }

    /// `Σⱼ wᵢⱼ pⱼ`.
    pub fn blended_center(&self, i: usize) -> Vec3 {
        self.influence[i].iter().map(|&(j, w)| self.positions[j] * w).sum()
    }

    pub fn deform_point(&self, i: usize, v: &Vec3) -> Vec3 {
        self.influence[i]
            .iter()
            .map(|&(j, w)| {
                let tr = &self.transforms[j];
                let p = self.positions[j];
                (tr.a * (v - p) + p + tr.t) * w
            })
            .sum()
    }

    pub fn x_vector(&self) -> Vec<f64> {
        self.transforms.iter().flat_map(|t| t.to_x()).collect()
    }

    pub fn set_x_vector(&mut self, x: &[f64]) {
        for (j, chunk) in x.chunks_exact(NODE_DOF).enumerate() {
            self.transforms[j] = NodeTransform::from_x(chunk);
        }
    }

    /// Smoothness weights `r_ab` for every directed node edge, as
    /// `(a, b, r_ab)`.
    pub fn smoothness_weights(&self) -> Vec<(usize, usize, f64)> {
        let mut inv_sum = 0.0;
        for (a, nb) in self.neighbors.iter().enumerate() {
            for &b in nb {
                inv_sum += 1.0 / (self.positions[a] - self.positions[b]).norm();
            }
        }
        let scale = 2.0 * self.edges.len() as f64 / inv_sum;
        let mut out = Vec::new();
        for (a, nb) in self.neighbors.iter().enumerate() {
            for &b in nb {
                out.push((a, b, scale / (self.positions[a] - self.positions[b]).norm()));
            }
        }
        out
    }
}

/// Farthest-point sampling over geodesic distances: starting at point 0,
/// nodes are added until every point lies within `radius / 2` of one.
/// Returns the node indices and their truncated Dijkstra maps.
fn geodesic_fps(surface: &Surface, radius: f64) -> (Vec<usize>, Vec<Vec<(usize, f64)>>) {
    let n = surface.len();
    let mut mindist = vec![f64::INFINITY; n];
    let mut nodes = Vec::new();
    let mut reach = Vec::new();
    let mut c = 0;
    loop {
        let d = dijkstra(surface, c, radius);
        for &(i, di) in &d {
            if di < mindist[i] {
                mindist[i] = di;
            }
        }
        nodes.push(c);
        reach.push(d);
        let (far, dist) = mindist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        if dist <= radius / 2.0 {
            break;
        }
        c = far;
    }
    (nodes, reach)
}

fn graph_from_reach(
    surface: &Surface,
    nodes: Vec<usize>,
    reach: Vec<Vec<(usize, f64)>>,
    radius: f64,
) -> Result<DeformationGraph> {
    let n = surface.len();
    let mut node_of = vec![usize::MAX; n];
    for (j, &s) in nodes.iter().enumerate() {
        node_of[s] = j;
    }
    let mut influence: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut edges = Vec::new();
    for (j, d) in reach.iter().enumerate() {
        for &(i, di) in d {
            influence[i].push((j, influence_kernel(di, radius)));
            let other = node_of[i];
            if other != usize::MAX && other > j {
                edges.push((j, other));
            }
        }
    }
    for (i, inf) in influence.iter_mut().enumerate() {
        let total: f64 = inf.iter().map(|e| e.1).sum();
        if inf.is_empty() || !(total > 0.0) {
            return Err(Error::UncoveredPoint(i));
        }
        inf.iter_mut().for_each(|e| e.1 /= total);
    }
    edges.sort_unstable();
    edges.dedup();
    let mut neighbors = vec![Vec::new(); nodes.len()];
    for &(a, b) in &edges {
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    neighbors.iter_mut().for_each(|nb| nb.sort_unstable());
    Ok(DeformationGraph {
        positions: nodes.iter().map(|&s| surface.point(s)).collect(),
        transforms: vec![NodeTransform::identity(); nodes.len()],
        nodes,
        edges,
        neighbors,
        influence,
        radius,
    })
}

/// Graph over explicitly chosen nodes. Fails if a point has no node within
/// `radius`.
pub fn build_graph_with_nodes(surface: &Surface, nodes: &[usize], radius: f64) -> Result<DeformationGraph> {
    for &s in nodes {
        if s >= surface.len() {
            return Err(Error::IndexOutOfRange { index: s, len: surface.len() });
        }
    }
    let reach = nodes.iter().map(|&s| dijkstra(surface, s, radius)).collect();
    graph_from_reach(surface, nodes.to_vec(), reach, radius)
}

/// Node radius `R = radius_multiplier · l̄_s`.
pub fn graph_radius(surface: &Surface, config: &CoarseConfig) -> Result<f64> {
    let r = config.radius_multiplier * surface.mean_edge_length();
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidSurface("zero mean edge length; cannot size the deformation graph".into()));
    }
    Ok(r)
}

pub fn build_graph(surface: &Surface, config: &CoarseConfig) -> Result<DeformationGraph> {
    if surface.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let radius = graph_radius(surface, config)?;
    let (nodes, reach) = geodesic_fps(surface, radius);
    graph_from_reach(surface, nodes, reach, radius)
}

/// `v̂ᵢ = Σⱼ wᵢⱼ (Aⱼ(vᵢ − pⱼ) + pⱼ + tⱼ)` for every source point.
pub fn deform_points(graph: &DeformationGraph, surface: &Surface) -> Vec<Vec3> {
    surface.points().iter().enumerate().map(|(i, v)| graph.deform_point(i, v)).collect()
}

pub fn smoothness_energy(graph: &DeformationGraph) -> f64 {
    if graph.edges.is_empty() {
        return 0.0;
    }
    let sum: f64 = graph
        .smoothness_weights()
        .iter()
        .map(|&(a, b, r)| {
            let (pa, pb) = (graph.positions[a], graph.positions[b]);
            let (ta, tb) = (&graph.transforms[a], &graph.transforms[b]);
            ((tb.a * (pa - pb) + pb + tb.t - (pa + ta.t)) * r).norm_squared()
        })
        .sum();
    sum / (2 * graph.edges.len()) as f64
}

pub fn rotation_energy(graph: &DeformationGraph) -> f64 {
    if graph.transforms.is_empty() {
        return 0.0;
    }
    let sum: f64 = graph.transforms.iter().map(|t| (t.a - project_rotation(&t.a)).norm_squared()).sum();
    sum / graph.transforms.len() as f64
}

/// Euclidean farthest-point sample of `min(count, |V|)` indices seeded at 0.
pub fn sample_alignment_subset(surface: &Surface, count: usize) -> Vec<usize> {
    let n = surface.len();
    if count >= n {
        return (0..n).collect();
    }
    let pts = surface.points();
    let mut mindist = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(count);
    let mut c = 0;
    while out.len() < count {
        out.push(c);
        let p = pts[c];
        let mut best = (0, f64::NEG_INFINITY);
        for (i, q) in pts.iter().enumerate() {
            let d = (q - p).norm_squared();
            if d < mindist[i] {
                mindist[i] = d;
            }
            if mindist[i] > best.1 {
                best = (i, mindist[i]);
            }
        }
        c = best.0;
    }
    out
}

/// Normal equations `K X = b` of the transform subproblem.
#[derive(Debug, Clone)]
pub struct CoarseSystem {
    pub matrix: SparseSymmetric,
    pub rhs: Vec<f64>,
}

/// Scalar blend coefficients `wᵢⱼ [vᵢ − pⱼ; 1]`; the position map is
/// `v̂ᵢ = Σⱼ (fᵢⱼ ⊗ I₃) Xⱼ + Σⱼ wᵢⱼ pⱼ`.
fn blend_coeffs(graph: &DeformationGraph, i: usize, v: &Vec3) -> Vec<(usize, [f64; 4])> {
    graph.influence[i]
        .iter()
        .map(|&(j, w)| {
            let x = v - graph.positions[j];
            (j, [w * x[0], w * x[1], w * x[2], w])
        })
        .collect()
}

fn scalar_diff(a: &[(usize, [f64; 4])], b: &[(usize, [f64; 4])]) -> Vec<(usize, [f64; 4])> {
    let mut out: Vec<(usize, [f64; 4])> = a.to_vec();
    for &(j, f) in b {
        match out.iter_mut().find(|e| e.0 == j) {
            Some(e) => (0..4).for_each(|k| e.1[k] -= f[k]),
            None => out.push((j, [-f[0], -f[1], -f[2], -f[3]])),
        }
    }
    out
}

/// Adds `scale · (g gᵀ ⊗ I₃)` and `scale · (g ⊗ I₃) y` for a scalar row `g`.
fn add_scalar_row(
    matrix: Option<&mut SparseSymmetric>,
    rhs: &mut [f64],
    g: &[(usize, [f64; 4])],
    y: &Vec3,
    scale: f64,
) {
    if let Some(matrix) = matrix {
        for (a, &(j1, f1)) in g.iter().enumerate() {
            for &(j2, f2) in &g[a..] {
                for k1 in 0..4 {
                    for k2 in 0..4 {
                        let v = scale * f1[k1] * f2[k2];
                        if v == 0.0 {
                            continue;
                        }
                        let (p0, q0) = (NODE_DOF * j1 + 3 * k1, NODE_DOF * j2 + 3 * k2);
                        // the same block visited twice on the diagonal
                        if j1 == j2 && k2 < k1 {
                            continue;
                        }
                        for d in 0..3 {
                            matrix.add(p0 + d, q0 + d, v);
                        }
                    }
                }
            }
        }
    }
    for &(j, f) in g {
        for k in 0..4 {
            for d in 0..3 {
                rhs[NODE_DOF * j + 3 * k + d] += scale * f[k] * y[d];
            }
        }
    }
}

/// Block pattern of the coarse system: nodes sharing a point or a source
/// edge, plus graph edges.
pub fn coarse_pattern(graph: &DeformationGraph, surface: &Surface) -> SparseSymmetric {
    let mut pairs = Vec::new();
    for i in 0..surface.len() {
        let inf = &graph.influence[i];
        for (a, &(j1, _)) in inf.iter().enumerate() {
            for &(j2, _) in &inf[a + 1..] {
                pairs.push((j1.min(j2), j1.max(j2)));
            }
        }
    }
    for &(i, j) in surface.edges() {
        for &(a, _) in &graph.influence[i] {
            for &(b, _) in &graph.influence[j] {
                if a != b {
                    pairs.push((a.min(b), a.max(b)));
                }
            }
        }
    }
    pairs.extend(graph.edges.iter().copied());
    pairs.sort_unstable();
    pairs.dedup();
    SparseSymmetric::from_block_pattern(graph.node_count(), NODE_DOF, pairs)
}

/// Terms of the transform subproblem that do not change between
/// iterations: `w_ARAP BᵀB/2|E| + w_smo HᵀH/2|E_G| + w_rot JᵀJ/|V_G|`, the
/// landmark rows, and the smoothness/landmark right-hand side.
fn constant_terms(
    graph: &DeformationGraph,
    surface: &Surface,
    config: &CoarseConfig,
    landmarks: &[(Landmark, f64)],
) -> (SparseSymmetric, Vec<f64>) {
    let mut matrix = coarse_pattern(graph, surface);
    let mut rhs = vec![0.0; matrix.dim()];
    let edge_count = surface.edges().len();
    if edge_count > 0 && config.w_arap > 0.0 {
        let base = config.w_arap / (2 * edge_count) as f64;
        for i in 0..surface.len() {
            let nbrs = surface.neighbors(i);
            if nbrs.is_empty() {
                continue;
            }
            let c = base / nbrs.len() as f64;
            let fi = blend_coeffs(graph, i, &surface.point(i));
            for &j in nbrs {
                let g = scalar_diff(&fi, &blend_coeffs(graph, j, &surface.point(j)));
                add_scalar_row(Some(&mut matrix), &mut rhs, &g, &Vec3::zeros(), c);
            }
        }
    }
    if !graph.edges.is_empty() && config.w_smo > 0.0 {
        let scale = config.w_smo / (2 * graph.edges.len()) as f64;
        for (a, b, r) in graph.smoothness_weights() {
            let e = graph.positions[a] - graph.positions[b];
            let g = [(b, [r * e[0], r * e[1], r * e[2], r]), (a, [0.0, 0.0, 0.0, -r])];
            add_scalar_row(Some(&mut matrix), &mut rhs, &g, &(e * r), scale);
        }
    }
    if config.w_rot > 0.0 && graph.node_count() > 0 {
        let s = config.w_rot / graph.node_count() as f64;
        for j in 0..graph.node_count() {
            for q in 0..9 {
                matrix.add(NODE_DOF * j + q, NODE_DOF * j + q, s);
            }
        }
    }
    for (l, w) in landmarks {
        let f = blend_coeffs(graph, l.source, &surface.point(l.source));
        let y = l.target - graph.blended_center(l.source);
        add_scalar_row(Some(&mut matrix), &mut rhs, &f, &y, *w);
    }
    if config.damping > 0.0 {
        let s = config.damping / surface.len() as f64;
        for i in 0..surface.len() {
            let f = blend_coeffs(graph, i, &surface.point(i));
            add_scalar_row(Some(&mut matrix), &mut rhs, &f, &Vec3::zeros(), s);
        }
    }
    (matrix, rhs)
}

/// Terms that depend on correspondences, rotations and the current affine
/// parts. `corr` covers every source point; points outside the alignment
/// subset carry weight zero.
#[allow(clippy::too_many_arguments)]
fn variable_terms(
    matrix: &mut SparseSymmetric,
    rhs: &mut [f64],
    graph: &DeformationGraph,
    surface: &Surface,
    target: &Surface,
    corr: &CorrespondenceSet,
    state: &DeformationState,
    config: &CoarseConfig,
    subset_size: usize,
) {
    let inv_s = 1.0 / subset_size.max(1) as f64;
    for i in 0..surface.len() {
        if corr.alpha[i] == 0.0 {
            continue;
        }
        let j = corr.rho[i];
        let rows = point_rows(config.metric, corr.alpha[i], &state.normals[i], &target.point(j), &target.normal(j));
        if rows.is_empty() {
            continue;
        }
        let f = blend_coeffs(graph, i, &surface.point(i));
        let center = graph.blended_center(i);
        // Σ over rows of (f ⊗ c)(f ⊗ c)ᵀ is (f fᵀ) ⊗ M with M = Σ c cᵀ
        let m = rows.normal_matrix() * inv_s;
        let y = rows.normal_rhs() * inv_s - m * center;
        for (a, &(j1, f1)) in f.iter().enumerate() {
            for &(j2, f2) in &f[a..] {
                let ((lo, fl), (hi, fh)) = if j1 <= j2 { ((j1, f1), (j2, f2)) } else { ((j2, f2), (j1, f1)) };
                matrix.add_block(NODE_DOF * lo, NODE_DOF * hi, NODE_DOF, |r, c| fl[r / 3] * fh[c / 3] * m[(r % 3, c % 3)]);
            }
            for k in 0..4 {
                for d in 0..3 {
                    rhs[NODE_DOF * j1 + 3 * k + d] += f1[k] * y[d];
                }
            }
        }
    }
    let edge_count = surface.edges().len();
    if edge_count > 0 && config.w_arap > 0.0 {
        let base = config.w_arap / (2 * edge_count) as f64;
        for i in 0..surface.len() {
            let nbrs = surface.neighbors(i);
            if nbrs.is_empty() {
                continue;
            }
            let c = base / nbrs.len() as f64;
            let vi = surface.point(i);
            let fi = blend_coeffs(graph, i, &vi);
            let ci = graph.blended_center(i);
            for &j in nbrs {
                let vj = surface.point(j);
                let g = scalar_diff(&fi, &blend_coeffs(graph, j, &vj));
                let l = state.rotations[i] * (vi - vj) - (ci - graph.blended_center(j));
                add_scalar_row(None, rhs, &g, &l, c);
            }
        }
    }
    if config.damping > 0.0 {
        let s = config.damping / surface.len() as f64;
        for (i, v) in surface.points().iter().enumerate() {
            let f = blend_coeffs(graph, i, v);
            let y = graph.deform_point(i, v) - graph.blended_center(i);
            add_scalar_row(None, rhs, &f, &y, s);
        }
    }
    if config.w_rot > 0.0 && graph.node_count() > 0 {
        let s = config.w_rot / graph.node_count() as f64;
        for (j, t) in graph.transforms.iter().enumerate() {
            let z = project_rotation(&t.a);
            for k in 0..3 {
                for d in 0..3 {
                    rhs[NODE_DOF * j + 3 * k + d] += s * z[(d, k)];
                }
            }
        }
    }
}

fn add_proximal(matrix: &mut SparseSymmetric, rhs: &mut [f64], x: &[f64]) {
    matrix.add_diagonal(COARSE_REGULARIZER);
    for (r, xi) in rhs.iter_mut().zip(x) {
        *r += COARSE_REGULARIZER * xi;
    }
}

/// Assembles `K X = b` for the current correspondences, per-point rotations
/// (through `state.rotations` and `state.normals`) and node transforms.
#[allow(clippy::too_many_arguments)]
pub fn assemble_coarse_system(
    graph: &DeformationGraph,
    surface: &Surface,
    target: &Surface,
    corr: &CorrespondenceSet,
    state: &DeformationState,
    config: &CoarseConfig,
    subset_size: usize,
    landmarks: &[Landmark],
) -> CoarseSystem {
    let w = config.w_landmark.unwrap_or_else(|| default_landmark_weight(landmarks.len()));
    let lw: Vec<(Landmark, f64)> = landmarks.iter().map(|l| (*l, w)).collect();
    let (mut matrix, mut rhs) = constant_terms(graph, surface, config, &lw);
    variable_terms(&mut matrix, &mut rhs, graph, surface, target, corr, state, config, subset_size);
    add_proximal(&mut matrix, &mut rhs, &graph.x_vector());
    CoarseSystem { matrix, rhs }
}

/// Coarse objective with correspondences fixed. With `frozen` the rotation
/// term measures the distance to the given matrices instead of to the
/// projection of each `Aⱼ`.
#[allow(clippy::too_many_arguments)]
pub fn coarse_objective(
    graph: &DeformationGraph,
    surface: &Surface,
    target: &Surface,
    corr: &CorrespondenceSet,
    state: &DeformationState,
    config: &CoarseConfig,
    subset_size: usize,
    landmarks: &[(Landmark, f64)],
    frozen: Option<&[Mat3]>,
) -> f64 {
    let align: f64 = (0..surface.len())
        .filter(|&i| corr.alpha[i] != 0.0)
        .map(|i| {
            let j = corr.rho[i];
            corr.alpha[i]
                * alignment_error(config.metric, &state.positions[i], &state.normals[i], &target.point(j), &target.normal(j))
        })
        .sum::<f64>()
        / subset_size.max(1) as f64;
    let rot = match frozen {
        Some(z) if !graph.transforms.is_empty() => {
            graph.transforms.iter().zip(z).map(|(t, z)| (t.a - z).norm_squared()).sum::<f64>()
                / graph.transforms.len() as f64
        }
        _ => rotation_energy(graph),
    };
    let mut e = align + config.w_arap * arap_energy(state, surface) + config.w_smo * smoothness_energy(graph) + config.w_rot * rot;
    for (l, w) in landmarks {
        e += w * landmark_energy(state, std::slice::from_ref(l));
    }
    e
}

#[derive(Debug, Clone)]
pub struct CoarseResult {
    pub state: DeformationState,
    pub graph: DeformationGraph,
    pub subset: Vec<usize>,
    pub log: Vec<IterationRecord>,
    pub sigma: f64,
}

/// Coarse-stage solver bound to one source/target pair.
pub struct CoarseSolver<'a> {
    source: &'a Surface,
    target: &'a Surface,
    index: SpatialIndex,
    config: CoarseConfig,
    graph: DeformationGraph,
    subset: Vec<usize>,
    landmarks: Vec<(Landmark, f64)>,
    base_matrix: SparseSymmetric,
    base_rhs: Vec<f64>,
    ldl: CachedLdl,
}

impl<'a> CoarseSolver<'a> {
    pub fn new(source: &'a Surface, target: &'a Surface, config: CoarseConfig, landmarks: &[Landmark]) -> Result<Self> {
        let graph = build_graph(source, &config)?;
        Self::with_graph(source, target, config, graph, landmarks)
    }

    pub fn with_graph(
        source: &'a Surface,
        target: &'a Surface,
        config: CoarseConfig,
        graph: DeformationGraph,
        landmarks: &[Landmark],
    ) -> Result<Self> {
        if config.sample_count == 0 {
            return Err(Error::config("coarse.sample_count", "must be at least 1"));
        }
        for l in landmarks {
            if l.source >= source.len() {
                return Err(Error::IndexOutOfRange { index: l.source, len: source.len() });
            }
        }
        let index = target.spatial_index()?;
        let w = config.w_landmark.unwrap_or_else(|| default_landmark_weight(landmarks.len()));
        let landmarks: Vec<(Landmark, f64)> = landmarks.iter().map(|l| (*l, w)).collect();
        let subset = sample_alignment_subset(source, config.sample_count);
        let (base_matrix, base_rhs) = constant_terms(&graph, source, &config, &landmarks);
        Ok(CoarseSolver {
            source,
            target,
            index,
            graph,
            subset,
            landmarks,
            base_matrix,
            base_rhs,
            ldl: CachedLdl::new(NODE_DOF),
            config,
        })
    }

    pub fn graph(&self) -> &DeformationGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut DeformationGraph {
        &mut self.graph
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    pub fn landmarks(&self) -> &[(Landmark, f64)] {
        &self.landmarks
    }

    pub fn sigma_for(&self, state: &DeformationState) -> f64 {
        self.config.sigma.unwrap_or_else(|| {
            let pts: Vec<Vec3> = self.subset.iter().map(|&i| state.positions[i]).collect();
            compute_sigma(&pts, &self.index)
        })
    }

    /// Closest points and weights for the subset; every other point gets
    /// weight zero.
    pub fn correspondences(&self, state: &DeformationState, weighting: &Weighting) -> CorrespondenceSet {
        let n = self.source.len();
        let mut corr = CorrespondenceSet { rho: vec![0; n], alpha: vec![0.0; n] };
        for &i in &self.subset {
            let v = &state.positions[i];
            let j = self.index.nearest(v);
            corr.rho[i] = j;
            corr.alpha[i] = pair_weight(
                weighting.scheme,
                weighting.metric,
                v,
                &state.normals[i],
                &self.target.point(j),
                &self.target.normal(j),
                weighting.sigma,
                weighting.loss_scale,
            );
        }
        corr
    }

    pub fn system(&self, corr: &CorrespondenceSet, state: &DeformationState) -> CoarseSystem {
        let mut matrix = self.base_matrix.clone();
        let mut rhs = self.base_rhs.clone();
        variable_terms(
            &mut matrix,
            &mut rhs,
            &self.graph,
            self.source,
            self.target,
            corr,
            state,
            &self.config,
            self.subset.len(),
        );
        add_proximal(&mut matrix, &mut rhs, &self.graph.x_vector());
        CoarseSystem { matrix, rhs }
    }

    pub fn objective(&self, corr: &CorrespondenceSet, state: &DeformationState, frozen: Option<&[Mat3]>) -> f64 {
        coarse_objective(
            &self.graph,
            self.source,
            self.target,
            corr,
            state,
            &self.config,
            self.subset.len(),
            &self.landmarks,
            frozen,
        )
    }

    /// Transforms, then dense positions, then per-point rotations, with
    /// correspondences held fixed. Updates the graph in place.
    pub fn sweep(&mut self, state: &DeformationState, corr: &CorrespondenceSet) -> Result<DeformationState> {
        let system = self.system(corr, state);
        let x = self.ldl.solve_near(&system.matrix, &system.rhs, &self.graph.x_vector())?;
        self.graph.set_x_vector(&x);
        let mut next = DeformationState {
            positions: deform_points(&self.graph, self.source),
            rotations: state.rotations.clone(),
            normals: state.normals.clone(),
        };
        let terms = RotationTerms {
            metric: self.config.metric,
            w_arap: self.config.w_arap,
            align_count: self.subset.len(),
            edge_count: self.source.edges().len(),
        };
        let rotations: Vec<Mat3> = (0..self.source.len())
            .map(|i| {
                let j = corr.rho[i];
                update_rotation(i, &next, self.source, corr.alpha[i], &self.target.point(j), &self.target.normal(j), &terms)
            })
            .collect();
        next.rotations = rotations;
        next.refresh_normals(self.source);
        Ok(next)
    }

    pub fn run(mut self) -> Result<CoarseResult> {
        let mut state = DeformationState {
            positions: deform_points(&self.graph, self.source),
            rotations: vec![Mat3::identity(); self.source.len()],
            normals: self.source.normals().to_vec(),
        };
        let sigma = self.sigma_for(&state);
        let weighting = Weighting {
            scheme: self.config.weights,
            metric: self.config.metric,
            sigma,
            loss_scale: self.config.loss_scale.unwrap_or(sigma),
        };
        let scale = (self.source.len() as f64).sqrt();
        let mut log = Vec::new();
        for iter in 1..=self.config.max_iters.max(1) {
            let start = Instant::now();
            let corr = self.correspondences(&state, &weighting);
            let next = self.sweep(&state, &corr)?;
            let displacement = state
                .positions
                .iter()
                .zip(&next.positions)
                .map(|(a, b)| (a - b).norm_squared())
                .sum::<f64>()
                .sqrt()
                / scale;
            state = next;
            let subset_alpha = self.subset.iter().map(|&i| corr.alpha[i]).sum::<f64>() / self.subset.len() as f64;
            log.push(IterationRecord {
                iter,
                energy: self.objective(&corr, &state, None),
                displacement,
                alpha_mean: subset_alpha,
                seconds: start.elapsed().as_secs_f64(),
            });
            if displacement < self.config.tol {
                break;
            }
        }
        Ok(CoarseResult { state, graph: self.graph, subset: self.subset, log, sigma })
    }
}

pub fn run_coarse(source: &Surface, target: &Surface, config: &CoarseConfig, landmarks: &[Landmark]) -> Result<CoarseResult> {
    CoarseSolver::new(source, target, config.clone(), landmarks)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::is_rotation;
    use nalgebra::{DMatrix, DVector, Rotation3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    fn grid(n: usize, h: f64) -> Surface {
        let mut pts = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let (x, y) = (i as f64 * h, j as f64 * h);
                pts.push(Vec3::new(x, y, 0.3 * (2.0 * x).sin() * (1.5 * y).cos()));
            }
        }
        let mut faces = Vec::new();
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = j * n + i;
                faces.push([a, a + 1, a + n + 1]);
                faces.push([a, a + n + 1, a + n]);
            }
        }
        Surface::from_mesh(pts, faces).unwrap()
    }

    fn path(n: usize) -> Surface {
        let pts = (0..n).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        Surface::new(pts, vec![Z; n], (0..n - 1).map(|i| (i, i + 1)), None).unwrap()
    }

    #[test]
    fn influence_weights_small_cases() {
        let s = path(3);
        let g = build_graph_with_nodes(&s, &[0, 2], 10.0).unwrap();
        assert_eq!(g.influence[0].len(), 2);
        let w1 = &g.influence[1];
        assert!((w1[0].1 - 0.5).abs() < 1e-15 && (w1[1].1 - 0.5).abs() < 1e-15);
        let g = build_graph_with_nodes(&s, &[1], 1.5).unwrap();
        assert_eq!(g.influence[1], vec![(0, 1.0)]);
        assert!(matches!(build_graph_with_nodes(&s, &[0], 1.5), Err(Error::UncoveredPoint(2))));
    }

    #[test]
    fn grid_graph_weights_match_formula() {
        let s = grid(15, 0.1);
        let g = build_graph(&s, &CoarseConfig::default()).unwrap();
        assert!(g.node_count() < s.len() / 4);
        let r = g.radius;
        for (i, inf) in g.influence.iter().enumerate() {
            let total: f64 = inf.iter().map(|e| e.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let d: Vec<(usize, f64)> = inf
                .iter()
                .map(|&(j, _)| (j, crate::geometry::geodesic_distances(&s, g.nodes[j], r)[&i]))
                .collect();
            let raw: f64 = d.iter().map(|&(_, dd)| influence_kernel(dd, r)).sum();
            for (&(j, w), &(_, dd)) in inf.iter().zip(&d) {
                assert!(dd < r);
                assert!((w - influence_kernel(dd, r) / raw).abs() < 1e-12, "point {i} node {j}");
            }
        }
        // coverage: every point within R/2 of some node
        for i in 0..s.len() {
            let close = g.nodes.iter().any(|&nd| {
                crate::geometry::geodesic_distances(&s, nd, r).get(&i).is_some_and(|&d| d <= r / 2.0)
            });
            assert!(close);
        }
    }

    #[test]
    fn deform_points_cases() {
        let s = grid(8, 0.1);
        let cfg = CoarseConfig { radius_multiplier: 4.0, ..CoarseConfig::default() };
        let mut g = build_graph(&s, &cfg).unwrap();
        let out = deform_points(&g, &s);
        for (a, b) in out.iter().zip(s.points()) {
            assert!((a - b).norm() < 1e-15);
        }
        let r0 = *Rotation3::from_euler_angles(0.3, 0.1, -0.2).matrix();
        let t0 = Vec3::new(0.1, -0.2, 0.05);
        for (j, tr) in g.transforms.iter_mut().enumerate() {
            tr.a = r0;
            tr.t = r0 * g.positions[j] + t0 - g.positions[j];
        }
        let out = deform_points(&g, &s);
        for (a, b) in out.iter().zip(s.points()) {
            assert!((a - (r0 * b + t0)).norm() < 1e-12);
        }
        assert!(smoothness_energy(&g) < 1e-24);
        assert!(rotation_energy(&g) < 1e-24);

        let single = path(2);
        let mut g = build_graph_with_nodes(&single, &[0], 5.0).unwrap();
        g.transforms[0].a = Mat3::identity() * 2.0;
        assert_eq!(deform_points(&g, &single)[1], Vec3::new(2.0, 0.0, 0.0));
        assert!((rotation_energy(&g) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn smoothness_on_path_matches_hand_sum() {
        let s = path(3);
        let mut g = build_graph_with_nodes(&s, &[0, 1, 2], 1.5).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in &mut g.transforms {
            t.a = Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            t.t = Vec3::new(rng.gen(), rng.gen(), rng.gen());
        }
        // all edges have length 1, so r = 2|E_G| / 4 = 1
        let d = |i: usize, j: usize| {
            let (pi, pj) = (g.positions[i], g.positions[j]);
            (g.transforms[j].a * (pi - pj) + pj + g.transforms[j].t - pi - g.transforms[i].t).norm_squared()
        };
        let expect = (d(0, 1) + d(1, 0) + d(1, 2) + d(2, 1)) / 4.0;
        assert!((smoothness_energy(&g) - expect).abs() < 1e-12);
    }

    #[test]
    fn rotation_energy_uses_polar_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = path(2);
        let mut g = build_graph_with_nodes(&s, &[0], 5.0).unwrap();
        for _ in 0..20 {
            let a = Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            g.transforms[0].a = a;
            let svd = a.svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let d = (u * vt).determinant().signum();
            let mut sv = svd.singular_values;
            let smallest = sv.imin();
            sv.iter_mut().for_each(|x| *x = 1.0);
            sv[smallest] = d;
            let polar = u * Mat3::from_diagonal(&sv) * vt;
            assert!((project_rotation(&a) - polar).norm() < 1e-9);
            assert!((rotation_energy(&g) - (a - polar).norm_squared()).abs() < 1e-9);
        }
    }

    #[test]
    fn alignment_subset() {
        let s = path(3);
        assert_eq!(sample_alignment_subset(&s, 5), vec![0, 1, 2]);
        assert_eq!(sample_alignment_subset(&s, 2), vec![0, 2]);

        let g = grid(20, 0.05);
        let sub = sample_alignment_subset(&g, 100);
        assert_eq!(sub.len(), 100);
        let pts = g.points();
        let covering = pts
            .iter()
            .map(|p| sub.iter().map(|&j| (pts[j] - p).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max);
        let mut min_pair = f64::INFINITY;
        for (a, &i) in sub.iter().enumerate() {
            for &j in &sub[a + 1..] {
                min_pair = min_pair.min((pts[i] - pts[j]).norm());
            }
        }
        // greedy FPS: sample separation is at least the final covering radius
        assert!(min_pair >= covering - 1e-12);
    }

    /// `c ⊗ g` expanded to a row over node unknowns: entry `12j + 3k + d` is
    /// `gⱼ[k]·c[d]`.
    fn kron_row(g: &[(usize, [f64; 4])], c: &Vec3) -> Vec<(usize, f64)> {
        let mut row = Vec::with_capacity(g.len() * NODE_DOF);
        for &(j, f) in g {
            for k in 0..4 {
                for d in 0..3 {
                    row.push((NODE_DOF * j + 3 * k + d, f[k] * c[d]));
                }
            }
        }
        row
    }

    fn kron_dense(f: &[(usize, [f64; 4])], c: &Vec3, n: usize) -> DVector<f64> {
        let mut row = DVector::zeros(n);
        for (p, v) in kron_row(f, c) {
            row[p] += v;
        }
        row
    }

    #[test]
    fn small_system_matches_dense_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = grid(7, 0.1);
        let cfg = CoarseConfig { radius_multiplier: 3.0, w_arap: 3.0, w_smo: 0.5, w_rot: 0.2, damping: 0.0, ..CoarseConfig::default() };
        let mut g = build_graph(&s, &cfg).unwrap();
        for t in &mut g.transforms {
            t.a = Mat3::identity() + Mat3::from_fn(|_, _| rng.gen_range(-0.2..0.2));
            t.t = Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 0.05;
        }
        let t = grid(7, 0.1);
        let n = s.len();
        let rots: Vec<Mat3> =
            (0..n).map(|_| *Rotation3::from_euler_angles(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.1).matrix()).collect();
        let st = DeformationState::new(&s, deform_points(&g, &s), rots.clone()).unwrap();
        let subset: Vec<usize> = (0..n).step_by(3).collect();
        let mut corr = CorrespondenceSet { rho: vec![0; n], alpha: vec![0.0; n] };
        for &i in &subset {
            corr.rho[i] = rng.gen_range(0..n);
            corr.alpha[i] = rng.gen();
        }
        let lm = [Landmark { source: 4, target: Vec3::new(0.3, 0.1, 0.0) }];
        let sys = assemble_coarse_system(&g, &s, &t, &corr, &st, &cfg, subset.len(), &lm);

        let dim = NODE_DOF * g.node_count();
        let mut k = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        let mut add = |row: DVector<f64>, y: f64, scale: f64| {
            k += &row * row.transpose() * scale;
            b += &row * (y * scale);
        };
        let axes = [Vec3::x(), Vec3::y(), Vec3::z()];
        for &i in &subset {
            let f = blend_coeffs(&g, i, &s.point(i));
            let c = st.normals[i] + t.normal(corr.rho[i]);
            let q = t.point(corr.rho[i]) - g.blended_center(i);
            add(kron_dense(&f, &c, dim) * corr.alpha[i].sqrt(), corr.alpha[i].sqrt() * c.dot(&q), 1.0 / subset.len() as f64);
        }
        let me = s.edges().len() as f64;
        for i in 0..n {
            let nb = s.neighbors(i);
            for &j in nb {
                let gdiff = scalar_diff(&blend_coeffs(&g, i, &s.point(i)), &blend_coeffs(&g, j, &s.point(j)));
                let l = rots[i] * (s.point(i) - s.point(j)) - (g.blended_center(i) - g.blended_center(j));
                for (d, e) in axes.iter().enumerate() {
                    add(kron_dense(&gdiff, e, dim), l[d], cfg.w_arap / (2.0 * me * nb.len() as f64));
                }
            }
        }
        let eg = g.edges.len() as f64;
        for (a, bb, r) in g.smoothness_weights() {
            let e = g.positions[a] - g.positions[bb];
            let h = [(bb, [r * e[0], r * e[1], r * e[2], r]), (a, [0.0, 0.0, 0.0, -r])];
            for (d, ax) in axes.iter().enumerate() {
                add(kron_dense(&h, ax, dim), r * e[d], cfg.w_smo / (2.0 * eg));
            }
        }
        for (j, tr) in g.transforms.iter().enumerate() {
            let zj = project_rotation(&tr.a);
            for q in 0..9 {
                let mut row = DVector::zeros(dim);
                row[NODE_DOF * j + q] = 1.0;
                add(row, zj[(q % 3, q / 3)], cfg.w_rot / g.node_count() as f64);
            }
        }
        let f = blend_coeffs(&g, 4, &s.point(4));
        let y = lm[0].target - g.blended_center(4);
        for (d, ax) in axes.iter().enumerate() {
            add(kron_dense(&f, ax, dim), y[d], 100.0);
        }
        let x = DVector::from_vec(g.x_vector());
        let dense_k = sys.matrix.to_dense() - DMatrix::identity(dim, dim) * COARSE_REGULARIZER;
        let dense_b = DVector::from_vec(sys.rhs.clone()) - x * COARSE_REGULARIZER;
        assert!((&dense_k - &k).norm() <= 1e-10 * k.norm(), "{}", (&dense_k - &k).norm());
        assert!((&dense_b - &b).norm() <= 1e-10 * b.norm().max(1.0));
    }

    #[test]
    fn single_node_alignment_only_is_min_norm_step() {
        let s = path(2);
        let g = build_graph_with_nodes(&s, &[0], 5.0).unwrap();
        let tn = Vec3::new(0.0, 0.6, 0.8);
        let t = Surface::new(vec![Vec3::new(0.2, 0.1, 0.3)], vec![tn], [], None).unwrap();
        let st = DeformationState::identity(&s);
        let corr = CorrespondenceSet { rho: vec![0, 0], alpha: vec![0.0, 1.0] };
        let cfg = CoarseConfig { w_arap: 0.0, w_smo: 0.0, w_rot: 0.0, damping: 0.0, ..CoarseConfig::default() };
        let sys = assemble_coarse_system(&g, &s, &t, &corr, &st, &cfg, 1, &[]);
        let mut ldl = CachedLdl::new(NODE_DOF);
        let x = DVector::from_vec(ldl.solve_near(&sys.matrix, &sys.rhs, &g.x_vector()).unwrap());
        let x0 = DVector::from_vec(g.x_vector());
        let k = sys.matrix.to_dense() - DMatrix::identity(12, 12) * COARSE_REGULARIZER;
        let b = DVector::from_vec(sys.rhs.clone()) - &x0 * COARSE_REGULARIZER;
        let pinv = k.clone().pseudo_inverse(1e-12).unwrap();
        let expect = &x0 + pinv * (b - &k * &x0);
        assert!((&x - &expect).norm() < 1e-6 * expect.norm());
        // the fitted point lies on the symmetric plane
        let mut g2 = g.clone();
        g2.set_x_vector(x.as_slice());
        let v = deform_points(&g2, &s)[1];
        assert!(((Z + tn).dot(&(v - t.point(0)))).abs() < 1e-6);
    }

    #[test]
    fn coincident_pair_is_fixed_point() {
        let s = grid(12, 0.08);
        let res = run_coarse(&s, &s, &CoarseConfig::default(), &[]).unwrap();
        assert!(res.log.len() <= 2);
        for t in &res.graph.transforms {
            assert!((t.a - Mat3::identity()).norm() < 1e-6 && t.t.norm() < 1e-6);
        }
        for (a, b) in res.state.positions.iter().zip(s.points()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn frozen_sweep_does_not_increase_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = grid(9, 0.1);
        let target = {
            let pts = s.points().iter().map(|p| p + Vec3::new(0.0, 0.0, 0.05 * p.x)).collect();
            Surface::from_mesh(pts, s.faces().unwrap().to_vec()).unwrap()
        };
        let cfg = CoarseConfig { radius_multiplier: 4.0, sample_count: 40, ..CoarseConfig::default() };
        for _ in 0..5 {
            let mut solver = CoarseSolver::new(&s, &target, cfg.clone(), &[]).unwrap();
            for t in &mut solver.graph_mut().transforms {
                t.a = Mat3::identity() + Mat3::from_fn(|_, _| rng.gen_range(-0.05..0.05));
                t.t = Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 0.02;
            }
            let rots: Vec<Mat3> = (0..s.len()).map(|_| *Rotation3::from_euler_angles(rng.gen_range(-0.1..0.1), 0.05, 0.0).matrix()).collect();
            let st = DeformationState::new(&s, deform_points(solver.graph(), &s), rots).unwrap();
            let corr = solver.correspondences(&st, &Weighting::robust(0.05));
            let frozen: Vec<Mat3> = solver.graph().transforms.iter().map(|t| project_rotation(&t.a)).collect();
            let e0 = solver.objective(&corr, &st, Some(&frozen));
            let next = solver.sweep(&st, &corr).unwrap();
            let e1 = solver.objective(&corr, &next, Some(&frozen));
            assert!(e1 <= e0 + 1e-12, "{e1} > {e0}");
            assert!(next.rotations.iter().all(|r| is_rotation(r, 1e-9)));
        }
    }

    #[test]
    fn shrinks_rigid_misalignment() {
        use crate::geometry::normalize_pair;
        use crate::scenario::{generate_scenario, ScenarioKind, SyntheticScenario};
        let spec = SyntheticScenario::new(ScenarioKind::RigidBlob, 16, 15.0, 0.0, 3);
        let (s, t, gt) = generate_scenario(&spec).unwrap();
        let (tr, ns, nt) = normalize_pair(&s, &t).unwrap();
        let truth: Vec<Vec3> = gt.positions.unwrap().iter().map(|p| tr.apply(p)).collect();
        let rmse = |p: &[Vec3]| {
            (p.iter().zip(&truth).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / p.len() as f64).sqrt()
        };
        let res = run_coarse(&ns, &nt, &CoarseConfig::default(), &[]).unwrap();
        let (before, after) = (rmse(ns.points()), rmse(&res.state.positions));
        assert!(after < 1e-2 && after < 0.2 * before, "{before} -> {after}");
    }
}
