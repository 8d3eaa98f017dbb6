//! Interchangeable alignment metrics and correspondence weighting schemes.
//!
//! Every metric is expressed as at most three weighted linear rows
//! `cᵀ v̂ = b` per source point, so the fine and coarse assemblers share one
//! code path regardless of the metric in use.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::energy::{robust_weight, CorrespondenceSet, DeformationState};
use crate::{Surface, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// Symmetrized point-to-plane.
    #[default]
    Sp2p,
    /// Point-to-point.
    P2p,
    /// Point-to-plane against the target normal.
    P2pl,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Sp2p, MetricKind::P2pl, MetricKind::P2p];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Sp2p => "sp2p",
            MetricKind::P2p => "p2p",
            MetricKind::P2pl => "p2pl",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sp2p" => Ok(MetricKind::Sp2p),
            "p2p" => Ok(MetricKind::P2p),
            "p2pl" => Ok(MetricKind::P2pl),
            other => Err(format!("unknown metric `{other}` (expected sp2p, p2p or p2pl)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum WeightScheme {
    /// Normal-gated Gaussian of the previous pair distance.
    #[default]
    #[serde(rename = "robust")]
    RobustGaussian,
    /// Every pair weighted 1.
    #[serde(rename = "none")]
    Uniform,
    /// 0/1 weight: reject beyond 3σ or with opposed normals.
    #[serde(rename = "hard")]
    HardThreshold,
    #[serde(rename = "welsch")]
    Welsch,
    #[serde(rename = "huber")]
    Huber,
    #[serde(rename = "gm")]
    GemanMcClure,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 6] = [
        WeightScheme::RobustGaussian,
        WeightScheme::Uniform,
        WeightScheme::HardThreshold,
        WeightScheme::Welsch,
        WeightScheme::Huber,
        WeightScheme::GemanMcClure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightScheme::RobustGaussian => "robust",
            WeightScheme::Uniform => "none",
            WeightScheme::HardThreshold => "hard",
            WeightScheme::Welsch => "welsch",
            WeightScheme::Huber => "huber",
            WeightScheme::GemanMcClure => "gm",
        }
    }

    /// Whether the scheme reweights a residual through a robust loss.
    pub fn is_irls(self) -> bool {
        matches!(self, WeightScheme::Welsch | WeightScheme::Huber | WeightScheme::GemanMcClure)
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WeightScheme::ALL
            .into_iter()
            .find(|w| w.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown weight scheme `{s}` (expected robust, none, hard, welsch, huber or gm)"))
    }
}

/// 0 if the pair is farther than `3σ` or the normals oppose, else 1.
pub fn hard_threshold_weight(v: &Vec3, source_normal: &Vec3, u: &Vec3, target_normal: &Vec3, sigma: f64) -> f64 {
    if (v - u).norm() > 3.0 * sigma || source_normal.dot(target_normal) < 0.0 {
        0.0
    } else {
        1.0
    }
}

/// IRLS weight `φ′(r) / 2r` of a robust loss with scale `nu`, normalized so
/// that `w(0) = 1`. Non-IRLS schemes return 1.
pub fn irls_weight(residual: f64, scheme: WeightScheme, nu: f64) -> f64 {
    let r2 = residual * residual;
    let nu2 = nu * nu;
    match scheme {
        WeightScheme::Welsch => (-r2 / nu2).exp(),
        WeightScheme::Huber => {
            let a = residual.abs();
            if a <= nu {
                1.0
            } else {
                nu / a
            }
        }
        WeightScheme::GemanMcClure => {
            let q = nu2 + r2;
            nu2 * nu2 / (q * q)
        }
        _ => 1.0,
    }
}

/// Signed residual of one pair under `kind` (the P2P residual is the distance).
pub fn metric_residual(kind: MetricKind, v: &Vec3, source_normal: &Vec3, u: &Vec3, target_normal: &Vec3) -> f64 {
    match kind {
        MetricKind::Sp2p => (source_normal + target_normal).dot(&(v - u)),
        MetricKind::P2pl => target_normal.dot(&(v - u)),
        MetricKind::P2p => (v - u).norm(),
    }
}

/// Weight of one pair evaluated on the previous iterate.
#[allow(clippy::too_many_arguments)]
pub fn pair_weight(
    scheme: WeightScheme,
    metric: MetricKind,
    v: &Vec3,
    source_normal: &Vec3,
    u: &Vec3,
    target_normal: &Vec3,
    sigma: f64,
    loss_scale: f64,
) -> f64 {
    match scheme {
        WeightScheme::RobustGaussian => robust_weight(v, source_normal, u, target_normal, sigma),
        WeightScheme::Uniform => 1.0,
        WeightScheme::HardThreshold => hard_threshold_weight(v, source_normal, u, target_normal, sigma),
        _ => {
            if source_normal.dot(target_normal) < 0.0 {
                0.0
            } else {
                let r = metric_residual(metric, v, source_normal, u, target_normal);
                irls_weight(r, scheme, loss_scale)
            }
        }
    }
}

/// One weighted linear row `coeff · v̂ = rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlignmentRow {
    pub coeff: Vec3,
    pub rhs: f64,
}

/// Up to three rows contributed by a single source point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointRows {
    rows: [AlignmentRow; 3],
    count: usize,
}

impl PointRows {
    pub fn as_slice(&self) -> &[AlignmentRow] {
        &self.rows[..self.count]
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// `Σ c cᵀ` over the rows.
    pub fn normal_matrix(&self) -> crate::Mat3 {
        self.as_slice().iter().map(|r| r.coeff * r.coeff.transpose()).sum()
    }

    /// `Σ c·b` over the rows.
    pub fn normal_rhs(&self) -> Vec3 {
        self.as_slice().iter().map(|r| r.coeff * r.rhs).sum()
    }
}

/// Rows of one pair with weight `alpha`, each scaled by `√alpha`.
pub fn point_rows(kind: MetricKind, alpha: f64, source_normal: &Vec3, u: &Vec3, target_normal: &Vec3) -> PointRows {
    let s = alpha.sqrt();
    let mut out = PointRows::default();
    match kind {
        MetricKind::P2p => {
            for k in 0..3 {
                let mut c = Vec3::zeros();
                c[k] = s;
                out.rows[k] = AlignmentRow { coeff: c, rhs: s * u[k] };
            }
            out.count = 3;
        }
        MetricKind::P2pl | MetricKind::Sp2p => {
            let a = if kind == MetricKind::Sp2p { source_normal + target_normal } else { *target_normal };
            let c = a * s;
            out.rows[0] = AlignmentRow { coeff: c, rhs: c.dot(u) };
            out.count = 1;
        }
    }
    out
}

/// Rows for every source point given the current state (whose normals are
/// `Rᵢ nᵢ`) and correspondences.
pub fn metric_rows(
    kind: MetricKind,
    state: &DeformationState,
    corr: &CorrespondenceSet,
    target: &Surface,
) -> Vec<PointRows> {
    (0..state.len())
        .map(|i| {
            let j = corr.rho[i];
            point_rows(kind, corr.alpha[i], &state.normals[i], &target.point(j), &target.normal(j))
        })
        .collect()
}
