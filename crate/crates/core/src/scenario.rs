//! Seeded synthetic source/target pairs with exact ground truth.
//!
//! Every generator builds a source mesh and maps its vertices through an
//! analytic deformation to obtain the ground-truth positions. The target is
//! the mapped mesh, or an independent tessellation of the same deformed
//! surface, optionally noisy or cropped.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::evaluation::GroundTruth;
use crate::kdtree::SpatialIndex;
use crate::{Error, Result, Surface, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    /// Bumpy sheet bent about an axis across it.
    BentPlane,
    /// Rounded square tube whose halves rotate rigidly in opposite
    /// directions about a joint at its middle.
    ArticulatedBar,
    /// Tube twisted about its axis.
    TwistedCylinder,
    /// Twisted closed blob seen from one side: the target keeps only the
    /// points nearest to a seeded viewpoint.
    PartialOverlapCrop,
    /// Closed, feature-rich blob under a rigid motion.
    RigidBlob,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::BentPlane,
        ScenarioKind::ArticulatedBar,
        ScenarioKind::TwistedCylinder,
        ScenarioKind::PartialOverlapCrop,
        ScenarioKind::RigidBlob,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::BentPlane => "bent_plane",
            ScenarioKind::ArticulatedBar => "articulated_bar",
            ScenarioKind::TwistedCylinder => "twisted_cylinder",
            ScenarioKind::PartialOverlapCrop => "partial_crop",
            ScenarioKind::RigidBlob => "rigid_blob",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(&s.replace('-', "_")))
            .ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

/// Generator settings. `magnitude` is an angle in degrees (bend, joint,
/// twist or rigid rotation); `noise` is the target noise standard deviation
/// in units of the mean source edge length.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub kind: ScenarioKind,
    /// Samples along the main direction; closed shapes get about
    /// `resolution²` vertices.
    pub resolution: usize,
    pub magnitude: f64,
    pub noise: f64,
    pub seed: u64,
    /// Fraction of target points removed by [`ScenarioKind::PartialOverlapCrop`].
    pub crop_fraction: f64,
    /// Build the target from its own tessellation of the deformed surface
    /// instead of the mapped source vertices.
    pub resample: bool,
}

impl SyntheticScenario {
    pub fn new(kind: ScenarioKind, resolution: usize, magnitude: f64, noise: f64, seed: u64) -> Self {
        SyntheticScenario { kind, resolution, magnitude, noise, seed, crop_fraction: 0.4, resample: false }
    }

    pub fn label(&self) -> String {
        let alt = if self.resample { "-x" } else { "" };
        format!("{}-r{}-m{}-s{}{alt}", self.kind, self.resolution, self.magnitude, self.seed)
    }
}

/// Regular grid mesh over `[0,1]²` parameters, optionally wrapped in `u`
/// with the first column shifted by `phase` cells.
fn grid_mesh(nu: usize, nv: usize, wrap_u: bool, phase: f64, f: impl Fn(f64, f64) -> Vec3) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let du = if wrap_u { nu } else { nu - 1 } as f64;
    let mut points = Vec::with_capacity(nu * nv);
    for j in 0..nv {
        for i in 0..nu {
            points.push(f((i as f64 + phase) / du, j as f64 / (nv - 1) as f64));
        }
    }
    let cols = if wrap_u { nu } else { nu - 1 };
    let mut faces = Vec::new();
    for j in 0..nv - 1 {
        for i in 0..cols {
            let a = j * nu + i;
            let b = j * nu + (i + 1) % nu;
            let (c, d) = (a + nu, b + nu);
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    (points, faces)
}

/// Unit icosphere after `level` midpoint subdivisions.
pub fn icosphere(level: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3::new(p[0], p[1], p[2]).normalize())
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, v: &mut Vec<Vec3>| -> usize {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a] + v[b]) / 2.0).normalize());
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(f.len() * 4);
        for [a, b, c] in f {
            let ab = mid(a, b, &mut v);
            let bc = mid(b, c, &mut v);
            let ca = mid(c, a, &mut v);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    (v, f)
}

/// Icosphere level giving at least `resolution²` vertices.
fn sphere_level(resolution: usize) -> usize {
    let want = resolution * resolution;
    (0..7).find(|&l| 10 * 4usize.pow(l as u32) + 2 >= want).unwrap_or(6)
}

/// Radially modulated ellipsoid of extent about 1.2 along x.
fn blob_point(p: &Vec3) -> Vec3 {
    let r = 1.0 + 0.2 * (5.0 * p.x).sin() * (4.0 * p.y + 0.5).cos() + 0.15 * (6.0 * p.z + 0.3).sin();
    Vec3::new(1.3 * p.x, p.y, 0.8 * p.z) * r * 0.35
}

fn bend(p: &Vec3, angle: f64, length: f64) -> Vec3 {
    if angle.abs() < 1e-12 {
        return *p;
    }
    let radius = length / angle;
    let phi = p.x / radius;
    let r = radius - p.z;
    Vec3::new(r * phi.sin(), p.y, radius - r * phi.cos())
}

fn twist(p: &Vec3, angle_per_unit: f64) -> Vec3 {
    let a = angle_per_unit * p.x;
    let (s, c) = a.sin_cos();
    Vec3::new(p.x, c * p.y - s * p.z, s * p.y + c * p.z)
}

fn random_axis(rng: &mut ChaCha8Rng) -> Unit<Vec3> {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return Unit::new_normalize(v);
        }
    }
}

/// Builds `(source, target, ground truth)` for `spec`. Identical specs give
/// identical outputs.
pub fn generate_scenario(spec: &SyntheticScenario) -> Result<(Surface, Surface, GroundTruth)> {
    if spec.resolution < 4 {
        return Err(Error::config("scenario.resolution", "must be at least 4"));
    }
    if !spec.magnitude.is_finite() || !(spec.noise >= 0.0) || !(0.0..1.0).contains(&spec.crop_fraction) {
        return Err(Error::config("scenario", "magnitude must be finite, noise nonnegative, crop in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // per-seed variation of the deformation strength
    let jitter = 0.8 + 0.4 * rng.gen::<f64>();
    let angle = spec.magnitude.to_radians();
    let n = spec.resolution;

    // Sampler of the undeformed shape; `true` asks for an independent
    // tessellation of the same surface.
    type Sampler = Box<dyn Fn(bool) -> (Vec<Vec3>, Vec<[usize; 3]>)>;
    type Warp = Box<dyn Fn(&Vec3) -> Vec3>;
    let (sample, map): (Sampler, Warp) = match spec.kind {
        ScenarioKind::BentPlane => {
            let (pu, pv) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
            let sheet = move |u: f64, v: f64| {
                let z = 0.04 * (13.0 * u + pu).sin() * (11.0 * v + pv).cos() + 0.03 * (17.0 * u * v + pv).sin();
                Vec3::new(u - 0.5, v - 0.5, z)
            };
            let a = angle * jitter;
            (
                Box::new(move |alt| {
                    let m = n + alt as usize;
                    grid_mesh(m, m, false, 0.0, sheet)
                }),
                Box::new(move |p: &Vec3| bend(p, a, 1.0)),
            )
        }
        ScenarioKind::ArticulatedBar => {
            let around = (n / 2).max(8);
            let tube = |u: f64, v: f64| {
                let t = u * std::f64::consts::TAU;
                // rounded square cross-section
                let (c, s) = (t.cos(), t.sin());
                let k = (c.abs().powi(4) + s.abs().powi(4)).powf(-0.25);
                Vec3::new(v - 0.5, 0.09 * k * c, 0.06 * k * s)
            };
            let tilt = rng.gen_range(-0.3..0.3);
            let axis = Unit::new_normalize(Vec3::new(0.0, tilt, 1.0));
            // both halves turn by half the joint angle, so neither starts aligned
            let right = Rotation3::from_axis_angle(&axis, 0.5 * angle * jitter);
            let left = right.inverse();
            (
                Box::new(move |alt| grid_mesh(around + alt as usize, n + alt as usize, true, if alt { 0.5 } else { 0.0 }, tube)),
                Box::new(move |p: &Vec3| if p.x > 0.0 { right * p } else { left * p }),
            )
        }
        ScenarioKind::TwistedCylinder => {
            let around = (n / 2).max(8);
            let tube = |u: f64, v: f64| {
                let t = u * std::f64::consts::TAU;
                Vec3::new(v - 0.5, 0.15 * t.cos(), 0.1 * t.sin())
            };
            let a = angle * jitter;
            (
                Box::new(move |alt| grid_mesh(around + alt as usize, n + alt as usize, true, if alt { 0.5 } else { 0.0 }, tube)),
                Box::new(move |p: &Vec3| twist(p, a)),
            )
        }
        ScenarioKind::PartialOverlapCrop | ScenarioKind::RigidBlob => {
            let level = sphere_level(n);
            let blob: Sampler = Box::new(move |alt| {
                let (sphere, f) = icosphere(level);
                let spin = if alt { Rotation3::from_euler_angles(0.3, 0.5, 0.7) } else { Rotation3::identity() };
                (sphere.iter().map(|p| blob_point(&(spin * p))).collect(), f)
            });
            if spec.kind == ScenarioKind::RigidBlob {
                let rot = Rotation3::from_axis_angle(&random_axis(&mut rng), angle);
                let shift = random_axis(&mut rng).into_inner() * 0.04;
                (blob, Box::new(move |p: &Vec3| rot * p + shift))
            } else {
                let a = angle * jitter;
                (blob, Box::new(move |p: &Vec3| bend(&twist(p, a), 0.5 * a, 1.0)))
            }
        }
    };

    let (points, faces) = sample(false);
    let source = Surface::from_mesh(points, faces.clone())?;
    let truth: Vec<Vec3> = source.points().iter().map(&map).collect();
    let (mut target_points, target_faces) = if spec.resample {
        let (pts, f) = sample(true);
        (pts.iter().map(&map).collect(), f)
    } else {
        (truth.clone(), faces)
    };
    // ground-truth partner of each target point: the nearest deformed source point
    let partner: Vec<usize> = if spec.resample {
        let index = SpatialIndex::new(&truth)?;
        target_points.iter().map(|p| index.nearest(p)).collect()
    } else {
        (0..target_points.len()).collect()
    };
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise * source.mean_edge_length())
            .map_err(|e| Error::config("scenario.noise", e.to_string()))?;
        for p in &mut target_points {
            *p += Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    let mut kept: Vec<usize> = (0..target_points.len()).collect();
    let mut target_faces = target_faces;
    if spec.kind == ScenarioKind::PartialOverlapCrop && spec.crop_fraction > 0.0 {
        let view = random_axis(&mut rng).into_inner();
        let (k, f) = crop_towards(&target_points, &target_faces, &view, 1.0 - spec.crop_fraction);
        let mut remap = vec![usize::MAX; target_points.len()];
        for (new, &old) in k.iter().enumerate() {
            remap[old] = new;
        }
        target_faces = f.into_iter().map(|f| f.map(|v| remap[v])).collect();
        target_points = k.iter().map(|&i| target_points[i]).collect();
        kept = k;
    }
    let correspondences = kept.iter().enumerate().map(|(new, &old)| (partner[old], new)).collect();
    let target = Surface::from_mesh(target_points, target_faces)?;
    let truth = GroundTruth { positions: Some(truth), correspondences: Some(correspondences) };
    Ok((source, target, truth))
}

/// Keeps the `keep` fraction of vertices closest to a camera looking along
/// `-view`, and the faces among them. Vertices left without faces are
/// dropped as well.
fn crop_towards(points: &[Vec3], faces: &[[usize; 3]], view: &Vec3, keep: f64) -> (Vec<usize>, Vec<[usize; 3]>) {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| view.dot(&points[b]).total_cmp(&view.dot(&points[a])).then(a.cmp(&b)));
    let count = ((points.len() as f64 * keep).round() as usize).max(3);
    let mut inside = vec![false; points.len()];
    for &i in &order[..count.min(points.len())] {
        inside[i] = true;
    }
    let faces: Vec<[usize; 3]> = faces.iter().copied().filter(|f| f.iter().all(|&v| inside[v])).collect();
    let mut used = vec![false; points.len()];
    for f in &faces {
        for &v in f {
            used[v] = true;
        }
    }
    ((0..points.len()).filter(|&i| used[i]).collect(), faces)
}
