//! Per-point registration by alternating minimization.
//!
//! Each iteration
//! 1. matches every deformed source point to its closest target point and
//!    weights the pair from the previous iterate,
//! 2. solves a sparse linear least-squares problem for all positions with
//!    rotations fixed,
//! 3. updates every rotation in closed form by minimizing a majorizer of the
//!    per-point objective, and
//! 4. rotates the source normals accordingly.
//!
//! The majorizer replaces the symmetrized point-to-plane term
//! `f(R) = [(R n + nᵗ)·d]²` with `‖d‖²·‖R n − h*‖²`, where `h*` is the
//! projection of the current `R n` onto the plane `{h : (h + nᵗ)·d = 0}`.
//! It touches `f` at the current rotation and bounds it everywhere else, so
//! the update never increases the objective.

use std::time::Instant;

use crate::energy::{
    compute_sigma, default_landmark_weight, fine_objective, CorrespondenceSet, DeformationState, EnergyWeights,
    Landmark,
};
use crate::kdtree::SpatialIndex;
use crate::rotation::fit_rotation;
use crate::sparse::{relative_residual, CachedLdl, SparseSymmetric};
use crate::variants::{pair_weight, point_rows, MetricKind, WeightScheme};
use crate::{Mat3, Result, Surface, Vec3};

/// Proximal diagonal added to every position system.
pub const POSITION_REGULARIZER: f64 = 1e-10;

/// Default step penalty shared by both stages.
pub const DEFAULT_DAMPING: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FineConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub w_arap: f64,
    pub metric: MetricKind,
    pub weights: WeightScheme,
    /// Overrides the median closest-point distance.
    pub sigma: Option<f64>,
    /// IRLS loss scale; defaults to σ.
    pub loss_scale: Option<f64>,
    /// Defaults to `100 / |L|`.
    pub w_landmark: Option<f64>,
    /// Weight `μ` of the step penalty `(μ/|V|)‖V̂ − V̂ₖ‖²`.
    pub damping: f64,
}

impl Default for FineConfig {
    fn default() -> Self {
        FineConfig {
            max_iters: 30,
            tol: 1e-4,
            w_arap: 200.0,
            metric: MetricKind::Sp2p,
            weights: WeightScheme::RobustGaussian,
            sigma: None,
            loss_scale: None,
            w_landmark: None,
            damping: DEFAULT_DAMPING,
        }
    }
}

/// How correspondence weights are computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weighting {
    pub scheme: WeightScheme,
    pub metric: MetricKind,
    pub sigma: f64,
    pub loss_scale: f64,
}

impl Weighting {
    pub fn robust(sigma: f64) -> Self {
        Weighting { scheme: WeightScheme::RobustGaussian, metric: MetricKind::Sp2p, sigma, loss_scale: sigma }
    }
}

/// One row of the iteration log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub energy: f64,
    pub displacement: f64,
    pub alpha_mean: f64,
    pub seconds: f64,
}

pub const ITERATION_CSV_HEADER: &str = "iter,energy,displacement,alpha_mean,seconds";

/// Wall time as a CSV field. Left empty unless `timed`, so untimed output is
/// reproducible byte for byte while the column layout stays fixed.
pub fn seconds_field(seconds: f64, timed: bool) -> String {
    if timed {
        format!("{seconds:.6}")
    } else {
        String::new()
    }
}

impl IterationRecord {
    pub fn csv_row(&self, timed: bool) -> String {
        format!(
            "{},{:e},{:e},{:e},{}",
            self.iter,
            self.energy,
            self.displacement,
            self.alpha_mean,
            seconds_field(self.seconds, timed)
        )
    }
}

/// Closest target points for the current positions, weighted with the
/// current positions and normals.
pub fn update_correspondences(
    state: &DeformationState,
    target: &Surface,
    index: &SpatialIndex,
    weighting: &Weighting,
) -> CorrespondenceSet {
    let mut rho = Vec::with_capacity(state.len());
    let mut alpha = Vec::with_capacity(state.len());
    for (v, n) in state.positions.iter().zip(&state.normals) {
        let j = index.nearest(v);
        let w = pair_weight(
            weighting.scheme,
            weighting.metric,
            v,
            n,
            &target.point(j),
            &target.normal(j),
            weighting.sigma,
            weighting.loss_scale,
        );
        rho.push(j);
        alpha.push(w);
    }
    CorrespondenceSet { rho, alpha }
}

/// Normal equations of the position subproblem.
#[derive(Debug, Clone)]
pub struct PositionSystem {
    pub matrix: SparseSymmetric,
    pub rhs: Vec<f64>,
    /// Positions the system was linearized at, flattened.
    pub current: Vec<f64>,
}

fn flatten(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

/// Block pattern of the position system: diagonal blocks plus one block per
/// source edge.
pub fn position_pattern(source: &Surface) -> SparseSymmetric {
    SparseSymmetric::from_block_pattern(source.len(), 3, source.edges().iter().copied())
}

#[allow(clippy::too_many_arguments)]
fn fill_position_system(
    matrix: &mut SparseSymmetric,
    rhs: &mut [f64],
    source: &Surface,
    target: &Surface,
    corr: &CorrespondenceSet,
    state: &DeformationState,
    metric: MetricKind,
    w_arap: f64,
    damping: f64,
    landmarks: &[(Landmark, f64)],
) {
    let n = source.len();
    matrix.clear_values();
    rhs.iter_mut().for_each(|x| *x = 0.0);
    let inv_v = 1.0 / n as f64;
    for i in 0..n {
        let j = corr.rho[i];
        let rows = point_rows(metric, corr.alpha[i], &state.normals[i], &target.point(j), &target.normal(j));
        if rows.is_empty() {
            continue;
        }
        matrix.add_block3(i, i, &(rows.normal_matrix() * inv_v));
        let b = rows.normal_rhs() * inv_v;
        for k in 0..3 {
            rhs[3 * i + k] += b[k];
        }
    }
    let edge_count = source.edges().len();
    if edge_count > 0 && w_arap > 0.0 {
        let base = w_arap / (2 * edge_count) as f64;
        for i in 0..n {
            let nbrs = source.neighbors(i);
            if nbrs.is_empty() {
                continue;
            }
            let c = base / nbrs.len() as f64;
            let ci = Mat3::identity() * c;
            let vi = source.point(i);
            let r = &state.rotations[i];
            for &j in nbrs {
                let y = r * (vi - source.point(j)) * c;
                matrix.add_block3(i, i, &ci);
                matrix.add_block3(j, j, &ci);
                matrix.add_block3(i, j, &(-ci));
                for k in 0..3 {
                    rhs[3 * i + k] += y[k];
                    rhs[3 * j + k] -= y[k];
                }
            }
        }
    }
    for (l, w) in landmarks {
        matrix.add_block3(l.source, l.source, &(Mat3::identity() * *w));
        for k in 0..3 {
            rhs[3 * l.source + k] += w * l.target[k];
        }
    }
    // proximal terms: the step penalty damps tangential slides that the
    // plane rows barely see, the tiny guard keeps the matrix definite
    let prox = damping * inv_v + POSITION_REGULARIZER;
    matrix.add_diagonal(prox);
    for i in 0..n {
        for k in 0..3 {
            rhs[3 * i + k] += prox * state.positions[i][k];
        }
    }
}

/// Assembles `NᵀWᵀWN/|V| + w_ARAP·BᵀB/2|E|` and the matching right-hand side
/// for the current correspondences and rotations.
#[allow(clippy::too_many_arguments)]
pub fn assemble_position_system(
    source: &Surface,
    target: &Surface,
    corr: &CorrespondenceSet,
    state: &DeformationState,
    weights: &EnergyWeights,
    metric: MetricKind,
    damping: f64,
    landmarks: &[Landmark],
) -> PositionSystem {
    let mut matrix = position_pattern(source);
    let mut rhs = vec![0.0; 3 * source.len()];
    let lw: Vec<(Landmark, f64)> = landmarks.iter().map(|l| (*l, weights.w_landmark)).collect();
    fill_position_system(&mut matrix, &mut rhs, source, target, corr, state, metric, weights.w_arap, damping, &lw);
    PositionSystem { matrix, rhs, current: flatten(&state.positions) }
}

/// Solves a position system; returns one position per block of three.
pub fn solve_positions(system: &PositionSystem, solver: &mut CachedLdl) -> Result<Vec<Vec3>> {
    let x = solver.solve_near(&system.matrix, &system.rhs, &system.current)?;
    Ok(x.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

/// Projection of `rn` onto the plane `{h : (h + nᵗ)·d = 0}`.
///
/// `d` must be nonzero.
pub fn project_to_constraint_plane(rn: &Vec3, target_normal: &Vec3, d: &Vec3) -> Vec3 {
    rn - d * ((target_normal + rn).dot(d) / d.norm_squared())
}

/// Weights that define the per-point rotation subproblem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationTerms {
    pub metric: MetricKind,
    pub w_arap: f64,
    /// Number of points the alignment term is averaged over.
    pub align_count: usize,
    /// Number of undirected source edges.
    pub edge_count: usize,
}

impl RotationTerms {
    fn omega(&self, neighbor_count: usize) -> f64 {
        if neighbor_count == 0 || self.edge_count == 0 {
            return 0.0;
        }
        self.w_arap * self.align_count as f64 / (neighbor_count as f64 * 2.0 * self.edge_count as f64)
    }
}

/// Cross-covariance `S` of the surrogate rotation problem for point `i`.
///
/// `alpha` is the pair weight, `u`/`target_normal` the matched target sample
/// (ignored when `alpha` is zero).
pub fn rotation_matrix_s(
    i: usize,
    state: &DeformationState,
    source: &Surface,
    alpha: f64,
    u: &Vec3,
    target_normal: &Vec3,
    terms: &RotationTerms,
) -> Mat3 {
    let n = source.normal(i);
    let mut s = Mat3::zeros();
    if terms.metric == MetricKind::Sp2p && alpha > 0.0 {
        let d = state.positions[i] - u;
        let dn2 = d.norm_squared();
        if dn2 > 0.0 {
            let h = project_to_constraint_plane(&(state.rotations[i] * n), target_normal, &d);
            s += n * h.transpose() * (alpha * dn2);
        }
    }
    let nbrs = source.neighbors(i);
    let omega = terms.omega(nbrs.len());
    if omega > 0.0 {
        let vi = source.point(i);
        let vhi = state.positions[i];
        for &j in nbrs {
            s += (vi - source.point(j)) * (vhi - state.positions[j]).transpose() * omega;
        }
    }
    s
}

/// Closed-form rotation for point `i` from the surrogate problem; keeps the
/// previous rotation when `S = 0`.
pub fn update_rotation(
    i: usize,
    state: &DeformationState,
    source: &Surface,
    alpha: f64,
    u: &Vec3,
    target_normal: &Vec3,
    terms: &RotationTerms,
) -> Mat3 {
    let s = rotation_matrix_s(i, state, source, alpha, u, target_normal, terms);
    fit_rotation(&s).unwrap_or(state.rotations[i])
}

/// Per-point rotation objective scaled by `|V|`:
/// `α[(R n + nᵗ)·d]² + ω Σⱼ ‖(v̂ᵢ − v̂ⱼ) − R(vᵢ − vⱼ)‖²`.
#[allow(clippy::too_many_arguments)]
pub fn rotation_objective(
    r: &Mat3,
    i: usize,
    state: &DeformationState,
    source: &Surface,
    alpha: f64,
    u: &Vec3,
    target_normal: &Vec3,
    terms: &RotationTerms,
) -> f64 {
    let n = source.normal(i);
    let mut e = 0.0;
    if terms.metric == MetricKind::Sp2p {
        let f = (r * n + target_normal).dot(&(state.positions[i] - u));
        e += alpha * f * f;
    }
    let nbrs = source.neighbors(i);
    let omega = terms.omega(nbrs.len());
    if omega > 0.0 {
        for &j in nbrs {
            let diff = state.positions[i] - state.positions[j] - r * (source.point(i) - source.point(j));
            e += omega * diff.norm_squared();
        }
    }
    e
}

#[derive(Debug, Clone)]
pub struct FineResult {
    pub state: DeformationState,
    pub log: Vec<IterationRecord>,
    pub sigma: f64,
    /// Largest relative residual `‖Ax − b‖/‖b‖` over all position solves.
    pub max_solve_residual: f64,
}

/// Fine-stage solver bound to one source/target pair.
pub struct FineSolver<'a> {
    source: &'a Surface,
    target: &'a Surface,
    index: SpatialIndex,
    config: FineConfig,
    landmarks: Vec<(Landmark, f64)>,
    matrix: SparseSymmetric,
    rhs: Vec<f64>,
    ldl: CachedLdl,
}

impl<'a> FineSolver<'a> {
    pub fn new(source: &'a Surface, target: &'a Surface, config: FineConfig, landmarks: &[Landmark]) -> Result<Self> {
        let index = target.spatial_index()?;
        for l in landmarks {
            if l.source >= source.len() {
                return Err(crate::Error::IndexOutOfRange { index: l.source, len: source.len() });
            }
        }
        let w_landmark = config.w_landmark.unwrap_or_else(|| default_landmark_weight(landmarks.len()));
        Ok(FineSolver {
            source,
            target,
            index,
            landmarks: landmarks.iter().map(|l| (*l, w_landmark)).collect(),
            matrix: position_pattern(source),
            rhs: vec![0.0; 3 * source.len()],
            ldl: CachedLdl::new(3),
            config,
        })
    }

    pub fn config(&self) -> &FineConfig {
        &self.config
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    /// Symbolic analyses performed by the position solver so far.
    pub fn symbolic_analyses(&self) -> usize {
        self.ldl.analyses()
    }

    pub fn sigma_for(&self, state: &DeformationState) -> f64 {
        self.config.sigma.unwrap_or_else(|| compute_sigma(&state.positions, &self.index))
    }

    pub fn weighting(&self, sigma: f64) -> Weighting {
        Weighting {
            scheme: self.config.weights,
            metric: self.config.metric,
            sigma,
            loss_scale: self.config.loss_scale.unwrap_or(sigma),
        }
    }

    pub fn energy_weights(&self, sigma: f64) -> EnergyWeights {
        EnergyWeights {
            w_arap: self.config.w_arap,
            sigma,
            w_landmark: self.landmarks.first().map_or(0.0, |l| l.1),
        }
    }

    pub fn landmarks(&self) -> Vec<Landmark> {
        self.landmarks.iter().map(|l| l.0).collect()
    }

    /// Objective of `state` under frozen correspondences.
    pub fn objective(&self, state: &DeformationState, corr: &CorrespondenceSet, sigma: f64) -> f64 {
        fine_objective(
            self.config.metric,
            state,
            self.source,
            self.target,
            corr,
            &self.energy_weights(sigma),
            &self.landmarks(),
        )
    }

    /// Position solve with rotations fixed. Returns the new positions and the
    /// relative residual of the solve.
    pub fn solve_positions(&mut self, state: &DeformationState, corr: &CorrespondenceSet) -> Result<(Vec<Vec3>, f64)> {
        fill_position_system(
            &mut self.matrix,
            &mut self.rhs,
            self.source,
            self.target,
            corr,
            state,
            self.config.metric,
            self.config.w_arap,
            self.config.damping,
            &self.landmarks,
        );
        let x = self.ldl.solve_near(&self.matrix, &self.rhs, &flatten(&state.positions))?;
        let residual = relative_residual(&self.matrix, &x, &self.rhs);
        Ok((x.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(), residual))
    }

    /// Rotation update for all points given new positions in `state`.
    pub fn update_rotations(&self, state: &mut DeformationState, corr: &CorrespondenceSet) {
        let terms = RotationTerms {
            metric: self.config.metric,
            w_arap: self.config.w_arap,
            align_count: self.source.len(),
            edge_count: self.source.edges().len(),
        };
        let rotations: Vec<Mat3> = (0..self.source.len())
            .map(|i| {
                let j = corr.rho[i];
                update_rotation(i, state, self.source, corr.alpha[i], &self.target.point(j), &self.target.normal(j), &terms)
            })
            .collect();
        state.rotations = rotations;
        state.refresh_normals(self.source);
    }

    /// Positions then rotations with correspondences held fixed.
    pub fn sweep(&mut self, state: &DeformationState, corr: &CorrespondenceSet) -> Result<(DeformationState, f64)> {
        let (positions, residual) = self.solve_positions(state, corr)?;
        let mut next = DeformationState {
            positions,
            rotations: state.rotations.clone(),
            normals: state.normals.clone(),
        };
        self.update_rotations(&mut next, corr);
        Ok((next, residual))
    }

    pub fn run(&mut self, initial: DeformationState) -> Result<FineResult> {
        let sigma = self.sigma_for(&initial);
        let weighting = self.weighting(sigma);
        let mut state = initial;
        let mut log = Vec::new();
        let mut max_residual: f64 = 0.0;
        let scale = (self.source.len() as f64).sqrt();
        for iter in 1..=self.config.max_iters.max(1) {
            let start = Instant::now();
            let corr = update_correspondences(&state, self.target, &self.index, &weighting);
            let (next, residual) = self.sweep(&state, &corr)?;
            max_residual = max_residual.max(residual);
            let displacement = state
                .positions
                .iter()
                .zip(&next.positions)
                .map(|(a, b)| (a - b).norm_squared())
                .sum::<f64>()
                .sqrt()
                / scale;
            state = next;
            let energy = self.objective(&state, &corr, sigma);
            log.push(IterationRecord {
                iter,
                energy,
                displacement,
                alpha_mean: corr.mean_alpha(),
                seconds: start.elapsed().as_secs_f64(),
            });
            if displacement < self.config.tol {
                break;
            }
        }
        Ok(FineResult { state, log, sigma, max_solve_residual: max_residual })
    }
}

/// Runs the fine stage from `initial` (identity or a coarse result).
pub fn run_fine(
    source: &Surface,
    target: &Surface,
    initial: DeformationState,
    config: &FineConfig,
    landmarks: &[Landmark],
) -> Result<FineResult> {
    FineSolver::new(source, target, config.clone(), landmarks)?.run(initial)
}
