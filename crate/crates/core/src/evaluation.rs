//! Registration accuracy metrics and per-point error colouring.

use serde::{Deserialize, Serialize};

use crate::geometry::geodesic_distance;
use crate::kdtree::SpatialIndex;
use crate::{Error, Result, Surface, Vec3};

/// Number of thresholds on the cumulative-error grid.
pub const AUC_GRID_SIZE: usize = 100;
/// Percentile of the errors that ends the threshold grid.
pub const AUC_GRID_PERCENTILE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    #[default]
    Geodesic,
    Euclidean,
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "geodesic" => Ok(DistanceMode::Geodesic),
            "euclidean" => Ok(DistanceMode::Euclidean),
            _ => Err(Error::config("distance_mode", format!("unknown mode '{s}' (expected geodesic|euclidean)"))),
        }
    }
}

/// Known answer for a registration: deformed source positions, source-target
/// correspondences, or both.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub positions: Option<Vec<Vec3>>,
    /// `(source index, target index)` pairs.
    pub correspondences: Option<Vec<(usize, usize)>>,
}

impl GroundTruth {
    pub fn from_positions(positions: Vec<Vec3>) -> Self {
        GroundTruth { positions: Some(positions), correspondences: None }
    }

    pub fn validate(&self, source_len: usize, target_len: usize) -> Result<()> {
        if self.positions.is_none() && self.correspondences.is_none() {
            return Err(Error::config("ground_truth", "needs positions or correspondences"));
        }
        if let Some(p) = &self.positions {
            if p.len() != source_len {
                return Err(Error::LengthMismatch(source_len, p.len()));
            }
        }
        if let Some(c) = &self.correspondences {
            for &(i, j) in c {
                if i >= source_len {
                    return Err(Error::IndexOutOfRange { index: i, len: source_len });
                }
                if j >= target_len {
                    return Err(Error::IndexOutOfRange { index: j, len: target_len });
                }
            }
        }
        Ok(())
    }
}

pub fn rmse(result: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    if result.len() != truth.len() {
        return Err(Error::LengthMismatch(truth.len(), result.len()));
    }
    if result.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = result.iter().zip(truth).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((sum / result.len() as f64).sqrt())
}

/// Per-pair correspondence errors. For each `(i, j)`, `τ` is the source
/// point whose deformed position is nearest to `u_j`; the error is the
/// distance between `v_τ` and `v_i` on the undeformed source.
pub fn corr_errors(
    deformed: &[Vec3],
    source: &Surface,
    target: &Surface,
    pairs: &[(usize, usize)],
    mode: DistanceMode,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::config("ground_truth.correspondences", "empty correspondence set"));
    }
    if deformed.len() != source.len() {
        return Err(Error::LengthMismatch(source.len(), deformed.len()));
    }
    let index = SpatialIndex::new(deformed)?;
    pairs
        .iter()
        .map(|&(i, j)| {
            if i >= source.len() {
                return Err(Error::IndexOutOfRange { index: i, len: source.len() });
            }
            if j >= target.len() {
                return Err(Error::IndexOutOfRange { index: j, len: target.len() });
            }
            let tau = index.nearest(&target.point(j));
            match mode {
                DistanceMode::Euclidean => Ok((source.point(tau) - source.point(i)).norm()),
                DistanceMode::Geodesic => geodesic_distance(source, tau, i).ok_or(Error::Disconnected(tau, i)),
            }
        })
        .collect()
}

/// Mean of [`corr_errors`].
pub fn corr_err(
    deformed: &[Vec3],
    source: &Surface,
    target: &Surface,
    pairs: &[(usize, usize)],
    mode: DistanceMode,
) -> Result<f64> {
    let e = corr_errors(deformed, source, target, pairs, mode)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Fraction of `errors` at or below each threshold.
pub fn cumulative_curve(errors: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| (t, sorted.partition_point(|&e| e <= t) as f64 / n))
        .collect()
}

/// Nearest-rank percentile (`q` in `[0, 1]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Uniform thresholds from 0 to the 95th percentile of `errors`.
pub fn threshold_grid(errors: &[f64]) -> Vec<f64> {
    let top = percentile(errors, AUC_GRID_PERCENTILE);
    (0..AUC_GRID_SIZE)
        .map(|k| top * k as f64 / (AUC_GRID_SIZE - 1) as f64)
        .collect()
}

/// Trapezoidal area under the curve divided by the threshold range. A
/// zero-width curve reports its fraction at the single threshold.
pub fn auc(curve: &[(f64, f64)]) -> f64 {
    match curve {
        [] => 0.0,
        [(_, f)] => *f,
        _ => {
            let range = curve[curve.len() - 1].0 - curve[0].0;
            if !(range > 0.0) {
                return curve[0].1;
            }
            let area: f64 = curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
            area / range
        }
    }
}

/// Fraction of ground-truth positions closer than `l̄_t/√3` to the target,
/// with `l̄_t` the mean target edge length.
pub fn overlap_ratio(target: &Surface, truth: &[Vec3]) -> Result<f64> {
    if truth.is_empty() {
        return Ok(0.0);
    }
    let index = target.spatial_index()?;
    let threshold = target.mean_edge_length() / 3f64.sqrt();
    let inside = truth
        .iter()
        .filter(|p| index.nearest_with_dist2(p).1.sqrt() < threshold)
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

/// Blue-to-red ramp over `[0, scale]`.
pub fn error_color(error: f64, scale: f64) -> [u8; 3] {
    let c = if scale > 0.0 { (error / scale).clamp(0.0, 1.0) } else if error > 0.0 { 1.0 } else { 0.0 };
    [(255.0 * c).round() as u8, 0, (255.0 * (1.0 - c)).round() as u8]
}

pub fn error_map(errors: &[f64], scale: f64) -> Vec<[u8; 3]> {
    errors.iter().map(|&e| error_color(e, scale)).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorReport {
    pub rmse: Option<f64>,
    pub corr_err: Option<f64>,
    pub auc: Option<f64>,
    pub overlap: Option<f64>,
    pub cumulative_curve: Vec<(f64, f64)>,
    /// Distance of each deformed point to its ground-truth position, or to
    /// the nearest target point when no positions are known.
    pub per_point_errors: Vec<f64>,
}

pub const METRICS_CSV_HEADER: &str = "rmse,corr_err,auc,overlap";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

impl ErrorReport {
    pub fn csv_fields(&self) -> String {
        format!("{},{},{},{}", opt(self.rmse), opt(self.corr_err), opt(self.auc), opt(self.overlap))
    }
}

/// All metrics available from `truth`. Inputs are in the same (original)
/// units; `deformed` follows the source ordering.
pub fn evaluate(
    deformed: &[Vec3],
    source: &Surface,
    target: &Surface,
    truth: &GroundTruth,
    mode: DistanceMode,
) -> Result<ErrorReport> {
    truth.validate(source.len(), target.len())?;
    if deformed.len() != source.len() {
        return Err(Error::LengthMismatch(source.len(), deformed.len()));
    }
    let mut report = ErrorReport::default();
    if let Some(gt) = &truth.positions {
        report.rmse = Some(rmse(deformed, gt)?);
        report.overlap = Some(overlap_ratio(target, gt)?);
        report.per_point_errors = deformed.iter().zip(gt).map(|(a, b)| (a - b).norm()).collect();
    } else {
        let index = target.spatial_index()?;
        report.per_point_errors = deformed.iter().map(|p| index.nearest_with_dist2(p).1.sqrt()).collect();
    }
    let curve_errors = match &truth.correspondences {
        Some(pairs) => {
            let e = corr_errors(deformed, source, target, pairs, mode)?;
            report.corr_err = Some(e.iter().sum::<f64>() / e.len() as f64);
            e
        }
        None => report.per_point_errors.clone(),
    };
    let curve = cumulative_curve(&curve_errors, &threshold_grid(&curve_errors));
    report.auc = Some(auc(&curve));
    report.cumulative_curve = curve;
    Ok(report)
}
