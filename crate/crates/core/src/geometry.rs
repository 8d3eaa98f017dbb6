//! Surface representation and the neighborhood queries built on it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use nalgebra::SymmetricEigen;

use crate::kdtree::SpatialIndex;
use crate::{Error, Mat3, Result, Vec3};

/// Default neighbor count for point-cloud edge graphs.
pub const DEFAULT_KNN: usize = 6;

/// Sample points with unit normals and an undirected neighbor graph.
///
/// Meshes and point clouds share this view: for meshes the edges come from
/// the faces, for point clouds from a symmetrized k-nearest-neighbor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
    edges: Vec<(usize, usize)>,
    faces: Option<Vec<[usize; 3]>>,
    neighbors: Vec<Vec<usize>>,
}

impl Surface {
    /// Validates and assembles a surface. Edges are canonicalized to
    /// `(min, max)`, sorted and deduplicated; normals are renormalized.
    pub fn new(
        points: Vec<Vec3>,
        normals: Vec<Vec3>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        faces: Option<Vec<[usize; 3]>>,
    ) -> Result<Self> {
        let n = points.len();
        if normals.len() != n {
            return Err(Error::LengthMismatch(n, normals.len()));
        }
        let mut unit = Vec::with_capacity(n);
        for (i, nv) in normals.into_iter().enumerate() {
            let len = nv.norm();
            if !(len > 0.0) || !len.is_finite() {
                return Err(Error::InvalidSurface(format!("normal {i} has zero length")));
            }
            unit.push(nv / len);
        }
        let mut canon = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::IndexOutOfRange { index: a.max(b), len: n });
            }
            if a == b {
                return Err(Error::InvalidSurface(format!("self-loop at {a}")));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        canon.dedup();
        if let Some(fs) = &faces {
            for f in fs {
                for &v in f {
                    if v >= n {
                        return Err(Error::IndexOutOfRange { index: v, len: n });
                    }
                }
            }
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &canon {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Surface { points, normals: unit, edges: canon, faces, neighbors })
    }

    /// Triangle mesh with edges taken from the faces and area-weighted
    /// vertex normals.
    pub fn from_mesh(points: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let normals = face_normals_average(&points, &faces)?;
        let edges = edges_from_faces(&faces);
        Surface::new(points, normals, edges, Some(faces))
    }

    /// Point cloud with k-NN edges and PCA normals estimated over the same `k`.
    pub fn from_points(points: Vec<Vec3>, k: usize) -> Result<Self> {
        let edges = build_knn_edges(&points, k)?;
        let normals = estimate_normals(&points, k.max(3))?;
        Surface::new(points, normals, edges, None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn faces(&self) -> Option<&[[usize; 3]]> {
        self.faces.as_deref()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn point(&self, i: usize) -> Vec3 {
        self.points[i]
    }

    pub fn normal(&self, i: usize) -> Vec3 {
        self.normals[i]
    }

    /// Same topology and normals, new point positions.
    pub fn with_points(&self, points: Vec<Vec3>) -> Result<Self> {
        if points.len() != self.len() {
            return Err(Error::LengthMismatch(self.len(), points.len()));
        }
        Ok(Surface { points, ..self.clone() })
    }

    /// Same topology, new positions and normals.
    pub fn with_points_and_normals(&self, points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        if points.len() != self.len() {
            return Err(Error::LengthMismatch(self.len(), points.len()));
        }
        Surface::new(points, normals, self.edges.iter().copied(), self.faces.clone())
    }

    /// Mean Euclidean edge length; zero for a surface without edges.
    pub fn mean_edge_length(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .edges
            .iter()
            .map(|&(a, b)| (self.points[a] - self.points[b]).norm())
            .sum();
        total / self.edges.len() as f64
    }

    pub fn spatial_index(&self) -> Result<SpatialIndex> {
        SpatialIndex::new(&self.points)
    }
}

/// Undirected edges of a triangle list, canonical `(min, max)` and sorted.
pub fn edges_from_faces(faces: &[[usize; 3]]) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
        .filter(|(a, b)| a != b)
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Symmetrized k-nearest-neighbor graph: `(i, j)` is present if either point
/// is among the other's `k` nearest.
pub fn build_knn_edges(points: &[Vec3], k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 || points.len() < k + 1 {
        return Err(Error::InsufficientPoints { needed: k + 1, got: points.len() });
    }
    let index = SpatialIndex::new(points)?;
    let mut edges = Vec::with_capacity(points.len() * k);
    for (i, p) in points.iter().enumerate() {
        // the point itself is normally first, but coincident duplicates may
        // displace it, so filter by index rather than position
        for j in index.k_nearest(p, k + 1).into_iter().filter(|&j| j != i).take(k) {
            edges.push((i.min(j), i.max(j)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

/// PCA normals from `k`-neighborhoods, oriented consistently by propagation
/// along a minimum spanning tree of the k-NN graph.
///
/// Each connected component is seeded at its highest point (largest z) with
/// a normal pointing toward +z.
pub fn estimate_normals(points: &[Vec3], k: usize) -> Result<Vec<Vec3>> {
    if k < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: k });
    }
    if points.len() < k + 1 {
        return Err(Error::InsufficientPoints { needed: k + 1, got: points.len() });
    }
    let index = SpatialIndex::new(points)?;
    let mut normals = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let nbrs = index.k_nearest(p, k + 1);
        let centroid = nbrs.iter().fold(Vec3::zeros(), |acc, &j| acc + points[j]) / nbrs.len() as f64;
        let mut cov = Mat3::zeros();
        for &j in &nbrs {
            let d = points[j] - centroid;
            cov += d * d.transpose();
        }
        let scale = cov.abs().max();
        if !(scale > 0.0) {
            return Err(Error::DegenerateNeighborhood(i));
        }
        let eig = SymmetricEigen::new(cov / scale);
        let smallest = eig.eigenvalues.imin();
        normals.push(eig.eigenvectors.column(smallest).normalize());
    }
    orient_by_mst(points, &mut normals, &build_knn_edges(points, k)?);
    Ok(normals)
}

#[derive(PartialEq)]
struct HeapEntry {
    cost: f64,
    node: usize,
    parent: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then on node index for determinism
        other.cost.total_cmp(&self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn orient_by_mst(points: &[Vec3], normals: &mut [Vec3], edges: &[(usize, usize)]) {
    let n = points.len();
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut visited = vec![false; n];
    // seeds in order of decreasing height
    let mut seeds: Vec<usize> = (0..n).collect();
    seeds.sort_by(|&a, &b| points[b].z.total_cmp(&points[a].z).then(a.cmp(&b)));
    for seed in seeds {
        if visited[seed] {
            continue;
        }
        if normals[seed].z < 0.0 {
            normals[seed] = -normals[seed];
        }
        let mut heap = BinaryHeap::new();
        heap.push(HeapEntry { cost: 0.0, node: seed, parent: seed });
        while let Some(HeapEntry { node, parent, .. }) = heap.pop() {
            if visited[node] {
                continue;
            }
            visited[node] = true;
            if node != parent && normals[node].dot(&normals[parent]) < 0.0 {
                normals[node] = -normals[node];
            }
            for &m in &adj[node] {
                if !visited[m] {
                    let cost = 1.0 - normals[node].dot(&normals[m]).abs();
                    heap.push(HeapEntry { cost, node: m, parent: node });
                }
            }
        }
    }
}

/// Per-vertex normals as the normalized sum of incident face normals,
/// weighted by face area (the unnormalized cross product).
pub fn face_normals_average(points: &[Vec3], faces: &[[usize; 3]]) -> Result<Vec<Vec3>> {
    let mut acc = vec![Vec3::zeros(); points.len()];
    let mut touched = vec![false; points.len()];
    for f in faces {
        for &v in f {
            if v >= points.len() {
                return Err(Error::IndexOutOfRange { index: v, len: points.len() });
            }
        }
        let area_normal = (points[f[1]] - points[f[0]]).cross(&(points[f[2]] - points[f[0]]));
        for &v in f {
            acc[v] += area_normal;
            touched[v] = true;
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, a)| {
            if !touched[i] {
                return Err(Error::IsolatedVertex(i));
            }
            let len = a.norm();
            if !(len > 0.0) {
                return Err(Error::InvalidSurface(format!("zero-area fan at vertex {i}")));
            }
            Ok(a / len)
        })
        .collect()
}

/// Shortest-path distances from `source` over the edge graph with Euclidean
/// edge lengths. Only entries strictly below `radius` are returned.
pub fn geodesic_distances(surface: &Surface, source: usize, radius: f64) -> BTreeMap<usize, f64> {
    dijkstra(surface, source, radius).into_iter().collect()
}

/// Shortest-path distance between two points over the edge graph, or
/// `None` when they lie in different components.
pub fn geodesic_distance(surface: &Surface, a: usize, b: usize) -> Option<f64> {
    let n = surface.len();
    if a >= n || b >= n {
        return None;
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[a] = 0.0;
    heap.push(HeapEntry { cost: 0.0, node: a, parent: a });
    while let Some(HeapEntry { cost, node, .. }) = heap.pop() {
        if node == b {
            return Some(cost);
        }
        if cost > dist[node] {
            continue;
        }
        let p = surface.points[node];
        for &m in &surface.neighbors[node] {
            let nd = cost + (surface.points[m] - p).norm();
            if nd < dist[m] {
                dist[m] = nd;
                heap.push(HeapEntry { cost: nd, node: m, parent: node });
            }
        }
    }
    None
}

/// Same as [`geodesic_distances`] but as a list in settle order (nearest first).
pub(crate) fn dijkstra(surface: &Surface, source: usize, radius: f64) -> Vec<(usize, f64)> {
    let n = surface.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut out = Vec::new();
    if source >= n || !(radius > 0.0) {
        return out;
    }
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry { cost: 0.0, node: source, parent: source });
    while let Some(HeapEntry { cost, node, .. }) = heap.pop() {
        if done[node] || cost > dist[node] {
            continue;
        }
        done[node] = true;
        out.push((node, cost));
        let p = surface.points[node];
        for &m in &surface.neighbors[node] {
            if done[m] {
                continue;
            }
            let nd = cost + (surface.points[m] - p).norm();
            if nd < radius && nd < dist[m] {
                dist[m] = nd;
                heap.push(HeapEntry { cost: nd, node: m, parent: node });
            }
        }
    }
    out
}

/// Shared similarity normalization `x ↦ scale·x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub scale: f64,
    pub translation: Vec3,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        NormalizationTransform { scale: 1.0, translation: Vec3::zeros() }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.translation
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        (p - self.translation) / self.scale
    }

    /// Distances scale linearly; this converts a normalized length back.
    pub fn invert_length(&self, d: f64) -> f64 {
        d / self.scale
    }

    pub fn apply_surface(&self, s: &Surface) -> Surface {
        let pts = s.points.iter().map(|p| self.apply(p)).collect();
        Surface { points: pts, ..s.clone() }
    }

    pub fn invert_surface(&self, s: &Surface) -> Surface {
        let pts = s.points.iter().map(|p| self.invert(p)).collect();
        Surface { points: pts, ..s.clone() }
    }
}

/// Axis-aligned bounding box `(min, max)` of one or more point sets.
pub fn bounding_box<'a>(sets: impl IntoIterator<Item = &'a [Vec3]>) -> Option<(Vec3, Vec3)> {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for set in sets {
        for p in set {
            lo = lo.inf(p);
            hi = hi.sup(p);
            any = true;
        }
    }
    any.then_some((lo, hi))
}

/// Scales and centers both surfaces with one transform so that their joint
/// axis-aligned bounding box has unit diagonal and is centered at the origin.
pub fn normalize_pair(source: &Surface, target: &Surface) -> Result<(NormalizationTransform, Surface, Surface)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let (lo, hi) = bounding_box([source.points(), target.points()]).ok_or(Error::EmptyPointSet)?;
    let diag = (hi - lo).norm();
    if !(diag > 0.0) || !diag.is_finite() {
        return Err(Error::DegenerateExtent);
    }
    let scale = 1.0 / diag;
    let center = (lo + hi) * 0.5;
    let t = NormalizationTransform { scale, translation: -center * scale };
    Ok((t, t.apply_surface(source), t.apply_surface(target)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn grid(n: usize, spacing: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
        let mut pts = Vec::new();
        for j in 0..n {
            for i in 0..n {
                pts.push(v(i as f64 * spacing, j as f64 * spacing, 0.0));
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
        (pts, faces)
    }

    #[test]
    fn knn_edges_collinear() {
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(10.0, 0.0, 0.0)];
        assert_eq!(build_knn_edges(&pts, 1).unwrap(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn knn_edges_square_matches_brute_force() {
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(1.0, 1.0, 0.0), v(0.0, 1.0, 0.0)];
        let edges = build_knn_edges(&pts, 2).unwrap();
        // brute force: two nearest by distance (ties by index)
        let mut expect = Vec::new();
        for i in 0..4 {
            let mut d: Vec<(f64, usize)> = (0..4)
                .filter(|&j| j != i)
                .map(|j| ((pts[i] - pts[j]).norm_squared(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in d.iter().take(2) {
                expect.push((i.min(j), i.max(j)));
            }
        }
        expect.sort_unstable();
        expect.dedup();
        assert_eq!(edges, expect);
        assert_eq!(edges, vec![(0, 1), (0, 3), (1, 2), (2, 3)]);
    }

    #[test]
    fn knn_edges_insufficient() {
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        assert!(matches!(build_knn_edges(&pts, 3), Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn plane_normals_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..200).map(|_| v(rng.gen(), rng.gen(), 0.0)).collect();
        for k in [6, 8, 12] {
            let normals = estimate_normals(&pts, k).unwrap();
            let first = normals[0];
            for nrm in &normals {
                assert!((nrm.z.abs() - 1.0).abs() < 1e-9);
                assert!(nrm.dot(&first) > 0.0);
            }
        }
    }

    #[test]
    fn sphere_normals_point_outward() {
        // Fibonacci sphere
        let n = 1000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                v(r * th.cos(), y, r * th.sin())
            })
            .collect();
        for k in [6, 8, 12] {
            let normals = estimate_normals(&pts, k).unwrap();
            for (p, nrm) in pts.iter().zip(&normals) {
                let ang = nrm.dot(p).clamp(-1.0, 1.0).acos().to_degrees();
                assert!(ang < 5.0, "k={k} angle {ang}");
            }
        }
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let pts = vec![v(1.0, 1.0, 1.0); 5];
        assert!(matches!(estimate_normals(&pts, 3), Err(Error::DegenerateNeighborhood(_))));
    }

    #[test]
    fn single_triangle_normals() {
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0)];
        let n = face_normals_average(&pts, &[[0, 1, 2]]).unwrap();
        for nrm in n {
            assert!((nrm - v(0.0, 0.0, 1.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn tetrahedron_normals_sum_faces() {
        let pts = vec![v(1.0, 1.0, 1.0), v(1.0, -1.0, -1.0), v(-1.0, 1.0, -1.0), v(-1.0, -1.0, 1.0)];
        // outward-oriented faces
        let faces = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
        let normals = face_normals_average(&pts, &faces).unwrap();
        // regular tetrahedron centered at origin: vertex normal is the vertex direction
        for (p, nrm) in pts.iter().zip(&normals) {
            assert!((nrm - p.normalize()).norm() < 1e-12);
        }
        // hand sum for vertex 0: faces 0,1,2 unit normals
        let fnorm = |f: [usize; 3]| {
            (pts[f[1]] - pts[f[0]]).cross(&(pts[f[2]] - pts[f[0]])).normalize()
        };
        let s = (fnorm(faces[0]) + fnorm(faces[1]) + fnorm(faces[2])).normalize();
        assert!((normals[0] - s).norm() < 1e-12);
    }

    #[test]
    fn unreferenced_vertex_rejected() {
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0), v(5.0, 5.0, 5.0)];
        assert!(matches!(face_normals_average(&pts, &[[0, 1, 2]]), Err(Error::IsolatedVertex(3))));
    }

    fn path_surface() -> Surface {
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(2.0, 0.0, 0.0)];
        Surface::new(pts, vec![v(0.0, 0.0, 1.0); 3], [(0, 1), (1, 2)], None).unwrap()
    }

    #[test]
    fn geodesic_on_path() {
        let s = path_surface();
        let d = geodesic_distances(&s, 0, 10.0);
        assert_eq!(d.into_iter().collect::<Vec<_>>(), vec![(0, 0.0), (1, 1.0), (2, 2.0)]);
        let d = geodesic_distances(&s, 0, 1.5);
        assert_eq!(d.len(), 2);
    }

    fn dense_dijkstra(s: &Surface, src: usize) -> Vec<f64> {
        // O(n^2) textbook variant over an adjacency matrix
        let n = s.len();
        let mut w = vec![vec![f64::INFINITY; n]; n];
        for &(a, b) in s.edges() {
            let l = (s.point(a) - s.point(b)).norm();
            w[a][b] = l;
            w[b][a] = l;
        }
        let mut dist = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        dist[src] = 0.0;
        for _ in 0..n {
            let mut u = usize::MAX;
            for i in 0..n {
                if !done[i] && (u == usize::MAX || dist[i] < dist[u]) {
                    u = i;
                }
            }
            if dist[u].is_infinite() {
                break;
            }
            done[u] = true;
            for j in 0..n {
                if dist[u] + w[u][j] < dist[j] {
                    dist[j] = dist[u] + w[u][j];
                }
            }
        }
        dist
    }

    #[test]
    fn geodesic_on_grid_matches_dense_oracle() {
        let (mut pts, faces) = grid(7, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in &mut pts {
            p.z = rng.gen_range(-0.05..0.05);
        }
        let s = Surface::from_mesh(pts, faces).unwrap();
        for src in [0, 10, 24] {
            let oracle = dense_dijkstra(&s, src);
            let fast = geodesic_distances(&s, src, f64::INFINITY);
            assert_eq!(fast.len(), s.len());
            for (i, d) in fast {
                assert!((d - oracle[i]).abs() < 1e-12);
            }
            // symmetry and triangle inequality
            for j in [3, 17, 40] {
                let dij = geodesic_distances(&s, src, f64::INFINITY)[&j];
                let dji = geodesic_distances(&s, j, f64::INFINITY)[&src];
                assert!((dij - dji).abs() < 1e-12);
                let dj = dense_dijkstra(&s, j);
                for k in 0..s.len() {
                    assert!(oracle[k] <= oracle[j] + dj[k] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalize_two_offset_cubes() {
        let mut cube = Vec::new();
        for i in 0..8 {
            cube.push(v((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64));
        }
        let s = Surface::from_points(cube.clone(), 3).unwrap();
        let moved: Vec<Vec3> = cube.iter().map(|p| p + v(2.0, 0.0, 0.0)).collect();
        let t = Surface::from_points(moved, 3).unwrap();
        let (tf, ns, nt) = normalize_pair(&s, &t).unwrap();
        assert!((tf.scale - 1.0 / 11f64.sqrt()).abs() < 1e-15);
        let (lo, hi) = bounding_box([ns.points(), nt.points()]).unwrap();
        assert!(((hi - lo).norm() - 1.0).abs() < 1e-9);
        assert_eq!(ns.normals(), s.normals());
        for (a, b) in s.points().iter().zip(ns.points()) {
            assert!((tf.invert(b) - a).norm() <= 1e-12 * a.norm().max(1.0));
        }
    }

    #[test]
    fn normalize_unit_diagonal_is_fixed_scale() {
        let d = 1.0 / 3f64.sqrt();
        let pts = vec![v(0.0, 0.0, 0.0), v(d, d, d), v(d, 0.0, 0.0), v(0.0, d, 0.0)];
        let s = Surface::new(pts.clone(), vec![v(0.0, 0.0, 1.0); 4], [], None).unwrap();
        let (tf, _, _) = normalize_pair(&s, &s).unwrap();
        assert!((tf.scale - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_degenerate() {
        let s = Surface::new(vec![v(1.0, 2.0, 3.0); 2], vec![v(0.0, 0.0, 1.0); 2], [], None).unwrap();
        assert!(matches!(normalize_pair(&s, &s), Err(Error::DegenerateExtent)));
    }

    #[test]
    fn surface_rejects_bad_input() {
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        let n = vec![v(0.0, 0.0, 1.0); 2];
        assert!(Surface::new(pts.clone(), n.clone(), [(0, 0)], None).is_err());
        assert!(Surface::new(pts.clone(), n.clone(), [(0, 2)], None).is_err());
        assert!(Surface::new(pts.clone(), vec![v(0.0, 0.0, 1.0)], [], None).is_err());
        let s = Surface::new(pts, n, [(1, 0), (0, 1)], None).unwrap();
        assert_eq!(s.edges(), &[(0, 1)]);
        assert_eq!(s.neighbors(0), &[1]);
    }
}
