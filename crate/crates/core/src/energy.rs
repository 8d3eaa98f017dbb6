//! Alignment metrics, robust weights and the fine-stage objective.

use crate::kdtree::SpatialIndex;
use crate::rotation::is_rotation;
use crate::variants::MetricKind;
use crate::{Error, Mat3, Result, Surface, Vec3};

/// Floor for the Gaussian weight scale when source and target coincide.
pub const MIN_SIGMA: f64 = 1e-8;

/// Closest-point correspondences with their per-pair weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    /// Target index matched to each source point.
    pub rho: Vec<usize>,
    /// Weight of each pair, in `[0, 1]` for the Gaussian and threshold schemes.
    pub alpha: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn mean_alpha(&self) -> f64 {
        if self.alpha.is_empty() {
            0.0
        } else {
            self.alpha.iter().sum::<f64>() / self.alpha.len() as f64
        }
    }
}

/// Per-point unknowns of the fine stage: deformed positions, local rotations
/// and the deformed normals they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationState {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
    pub normals: Vec<Vec3>,
}

impl DeformationState {
    /// Undeformed state: source positions and identity rotations.
    pub fn identity(source: &Surface) -> Self {
        DeformationState {
            positions: source.points().to_vec(),
            rotations: vec![Mat3::identity(); source.len()],
            normals: source.normals().to_vec(),
        }
    }

    /// State from positions and rotations; normals are `Rᵢ nᵢ`.
    pub fn new(source: &Surface, positions: Vec<Vec3>, rotations: Vec<Mat3>) -> Result<Self> {
        if positions.len() != source.len() {
            return Err(Error::LengthMismatch(source.len(), positions.len()));
        }
        if rotations.len() != source.len() {
            return Err(Error::LengthMismatch(source.len(), rotations.len()));
        }
        let mut state = DeformationState { positions, rotations, normals: Vec::new() };
        state.refresh_normals(source);
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn refresh_normals(&mut self, source: &Surface) {
        self.normals = self.rotations.iter().zip(source.normals()).map(|(r, n)| r * n).collect();
    }

    /// Checks the rotation and normal invariants.
    pub fn is_consistent(&self, source: &Surface, tol: f64) -> bool {
        self.rotations.iter().all(|r| is_rotation(r, tol))
            && self
                .normals
                .iter()
                .zip(&self.rotations)
                .zip(source.normals())
                .all(|((nh, r), n)| (nh - r * n).norm() <= 1e-12)
    }
}

/// Scalar weights of the fine objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyWeights {
    pub w_arap: f64,
    pub sigma: f64,
    pub w_landmark: f64,
}

/// Known source-to-target constraint: source index and target position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub source: usize,
    pub target: Vec3,
}

/// Default landmark weight, `100 / |L|`.
pub fn default_landmark_weight(count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        100.0 / count as f64
    }
}

pub fn p2p_error(v: &Vec3, u: &Vec3) -> f64 {
    (v - u).norm_squared()
}

pub fn p2pl_error(v: &Vec3, u: &Vec3, target_normal: &Vec3) -> f64 {
    let r = target_normal.dot(&(v - u));
    r * r
}

/// Symmetrized point-to-plane error `[(n̂ + nᵗ)·(v̂ − u)]²`.
pub fn sp2p_error(v: &Vec3, source_normal: &Vec3, u: &Vec3, target_normal: &Vec3) -> f64 {
    let r = (source_normal + target_normal).dot(&(v - u));
    r * r
}

/// Gaussian weight gated by normal agreement: zero when the normals point
/// in opposite half-spaces, else `exp(−‖v − u‖² / 2σ²)`.
pub fn robust_weight(v: &Vec3, source_normal: &Vec3, u: &Vec3, target_normal: &Vec3, sigma: f64) -> f64 {
    if source_normal.dot(target_normal) < 0.0 {
        return 0.0;
    }
    (-(v - u).norm_squared() / (2.0 * sigma * sigma)).exp()
}

/// Lower median of closest-point distances from `points` to the indexed
/// target, floored at [`MIN_SIGMA`].
pub fn compute_sigma(points: &[Vec3], target: &SpatialIndex) -> f64 {
    if points.is_empty() {
        return MIN_SIGMA;
    }
    let mut d: Vec<f64> = points.iter().map(|p| target.nearest_with_dist2(p).1.sqrt()).collect();
    let mid = (d.len() - 1) / 2;
    let (_, median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    median.max(MIN_SIGMA)
}

/// Local rigidity error of point `i`:
/// `(1/|N(i)|) Σⱼ ‖(v̂ᵢ − v̂ⱼ) − Rᵢ(vᵢ − vⱼ)‖²`.
pub fn arap_point_energy(state: &DeformationState, source: &Surface, i: usize) -> Result<f64> {
    let nbrs = source.neighbors(i);
    if nbrs.is_empty() {
        return Err(Error::EmptyNeighborhood(i));
    }
    let r = &state.rotations[i];
    let vi = source.point(i);
    let sum: f64 = nbrs
        .iter()
        .map(|&j| {
            let deformed = state.positions[i] - state.positions[j];
            (deformed - r * (vi - source.point(j))).norm_squared()
        })
        .sum();
    Ok(sum / nbrs.len() as f64)
}

/// `(1 / 2|E|) Σᵢ E_ARAP^i`, skipping isolated points.
pub fn arap_energy(state: &DeformationState, source: &Surface) -> f64 {
    if source.edges().is_empty() {
        return 0.0;
    }
    let total: f64 = (0..source.len())
        .filter_map(|i| arap_point_energy(state, source, i).ok())
        .sum();
    total / (2 * source.edges().len()) as f64
}

pub fn landmark_energy(state: &DeformationState, landmarks: &[Landmark]) -> f64 {
    landmarks
        .iter()
        .map(|l| (state.positions[l.source] - l.target).norm_squared())
        .sum()
}

/// Per-pair alignment error under the chosen metric.
pub fn alignment_error(
    kind: MetricKind,
    v: &Vec3,
    source_normal: &Vec3,
    u: &Vec3,
    target_normal: &Vec3,
) -> f64 {
    match kind {
        MetricKind::Sp2p => sp2p_error(v, source_normal, u, target_normal),
        MetricKind::P2p => p2p_error(v, u),
        MetricKind::P2pl => p2pl_error(v, u, target_normal),
    }
}

/// Weighted mean alignment error `(1/|V|) Σ αᵢ E(v̂ᵢ, uρᵢ)`.
pub fn alignment_energy(
    kind: MetricKind,
    state: &DeformationState,
    target: &Surface,
    corr: &CorrespondenceSet,
) -> f64 {
    if state.is_empty() {
        return 0.0;
    }
    let sum: f64 = (0..state.len())
        .map(|i| {
            let j = corr.rho[i];
            corr.alpha[i]
                * alignment_error(kind, &state.positions[i], &state.normals[i], &target.point(j), &target.normal(j))
        })
        .sum();
    sum / state.len() as f64
}

/// Fine-stage objective with a general alignment metric.
pub fn fine_objective(
    kind: MetricKind,
    state: &DeformationState,
    source: &Surface,
    target: &Surface,
    corr: &CorrespondenceSet,
    weights: &EnergyWeights,
    landmarks: &[Landmark],
) -> f64 {
    let mut e = alignment_energy(kind, state, target, corr) + weights.w_arap * arap_energy(state, source);
    if !landmarks.is_empty() {
        e += weights.w_landmark * landmark_energy(state, landmarks);
    }
    e
}

/// `E_align + w_ARAP·E_ARAP (+ w_landmark·E_landmark)` with the symmetrized
/// point-to-plane alignment term.
pub fn total_fine_energy(
    state: &DeformationState,
    source: &Surface,
    target: &Surface,
    corr: &CorrespondenceSet,
    weights: &EnergyWeights,
    landmarks: &[Landmark],
) -> f64 {
    fine_objective(MetricKind::Sp2p, state, source, target, corr, weights, landmarks)
}
