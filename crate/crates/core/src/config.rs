//! Run configuration: a TOML file with `[run]`, `[coarse]` and `[fine]`
//! sections. Every key is optional; missing keys take the solver defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::coarse::CoarseConfig;
use crate::evaluation::DistanceMode;
use crate::fine::FineConfig;
use crate::geometry::DEFAULT_KNN;
use crate::variants::{MetricKind, WeightScheme};
use crate::{Error, Result};

/// Fully defaulted settings for one registration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub metric: MetricKind,
    pub weights: WeightScheme,
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    pub landmarks: Option<PathBuf>,
    pub ground_truth: Vec<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    pub distance_mode: DistanceMode,
    pub skip_coarse: bool,
    pub skip_fine: bool,
    /// Neighbor count for point-cloud inputs.
    pub knn: usize,
    /// Write wall-clock columns to the CSV outputs.
    pub timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            metric: MetricKind::default(),
            weights: WeightScheme::default(),
            coarse: CoarseConfig::default(),
            fine: FineConfig::default(),
            landmarks: None,
            ground_truth: Vec::new(),
            output: PathBuf::from("out"),
            seed: 0,
            distance_mode: DistanceMode::default(),
            skip_coarse: false,
            skip_fine: false,
            knn: DEFAULT_KNN,
            timings: false,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    #[serde(default)]
    run: RunSection,
    #[serde(default)]
    coarse: CoarseSection,
    #[serde(default)]
    fine: FineSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    metric: Option<MetricKind>,
    weights: Option<WeightScheme>,
    landmarks: Option<PathBuf>,
    #[serde(default)]
    ground_truth: Vec<PathBuf>,
    output: Option<PathBuf>,
    seed: Option<u64>,
    distance_mode: Option<DistanceMode>,
    skip_coarse: Option<bool>,
    skip_fine: Option<bool>,
    knn: Option<usize>,
    timings: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoarseSection {
    w_arap: Option<f64>,
    w_smo: Option<f64>,
    w_rot: Option<f64>,
    sample_count: Option<usize>,
    radius_multiplier: Option<f64>,
    max_iters: Option<usize>,
    tol: Option<f64>,
    sigma: Option<f64>,
    loss_scale: Option<f64>,
    w_landmark: Option<f64>,
    damping: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FineSection {
    w_arap: Option<f64>,
    max_iters: Option<usize>,
    tol: Option<f64>,
    sigma: Option<f64>,
    loss_scale: Option<f64>,
    w_landmark: Option<f64>,
    damping: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl RunConfig {
    /// Parses configuration text. Relative paths resolve against `base`.
    pub fn from_toml(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let file: File = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            Error::parse(origin, line, e.message().to_string())
        })?;
        let mut cfg = RunConfig::default();
        let r = file.run;
        set(&mut cfg.metric, r.metric);
        set(&mut cfg.weights, r.weights);
        cfg.landmarks = r.landmarks.map(|p| base.join(p));
        cfg.ground_truth = r.ground_truth.into_iter().map(|p| base.join(p)).collect();
        set(&mut cfg.output, r.output.map(|p| base.join(p)));
        set(&mut cfg.seed, r.seed);
        set(&mut cfg.distance_mode, r.distance_mode);
        set(&mut cfg.skip_coarse, r.skip_coarse);
        set(&mut cfg.skip_fine, r.skip_fine);
        set(&mut cfg.knn, r.knn);
        set(&mut cfg.timings, r.timings);

        let c = file.coarse;
        let cc = &mut cfg.coarse;
        set(&mut cc.w_arap, c.w_arap);
        set(&mut cc.w_smo, c.w_smo);
        set(&mut cc.w_rot, c.w_rot);
        set(&mut cc.sample_count, c.sample_count);
        set(&mut cc.radius_multiplier, c.radius_multiplier);
        set(&mut cc.max_iters, c.max_iters);
        set(&mut cc.tol, c.tol);
        cc.sigma = c.sigma;
        cc.loss_scale = c.loss_scale;
        cc.w_landmark = c.w_landmark;
        set(&mut cc.damping, c.damping);

        let f = file.fine;
        let fc = &mut cfg.fine;
        set(&mut fc.w_arap, f.w_arap);
        set(&mut fc.max_iters, f.max_iters);
        set(&mut fc.tol, f.tol);
        fc.sigma = f.sigma;
        fc.loss_scale = f.loss_scale;
        fc.w_landmark = f.w_landmark;
        set(&mut fc.damping, f.damping);

        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the run-wide metric and weight scheme into both stages.
    pub fn sync(&mut self) {
        self.coarse.metric = self.metric;
        self.coarse.weights = self.weights;
        self.fine.metric = self.metric;
        self.fine.weights = self.weights;
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be a finite nonnegative number, got {v}")))
            }
        };
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be a finite positive number, got {v}")))
            }
        };
        let c = &self.coarse;
        nonneg("coarse.w_arap", c.w_arap)?;
        nonneg("coarse.w_smo", c.w_smo)?;
        nonneg("coarse.w_rot", c.w_rot)?;
        nonneg("coarse.damping", c.damping)?;
        positive("coarse.radius_multiplier", c.radius_multiplier)?;
        positive("coarse.tol", c.tol)?;
        if c.sample_count == 0 {
            return Err(Error::config("coarse.sample_count", "must be at least 1"));
        }
        let f = &self.fine;
        nonneg("fine.w_arap", f.w_arap)?;
        nonneg("fine.damping", f.damping)?;
        positive("fine.tol", f.tol)?;
        for (field, v) in [
            ("coarse.sigma", c.sigma),
            ("coarse.loss_scale", c.loss_scale),
            ("fine.sigma", f.sigma),
            ("fine.loss_scale", f.loss_scale),
        ] {
            if let Some(v) = v {
                positive(field, v)?;
            }
        }
        for (field, v) in [("coarse.w_landmark", c.w_landmark), ("fine.w_landmark", f.w_landmark)] {
            if let Some(v) = v {
                nonneg(field, v)?;
            }
        }
        if self.knn == 0 {
            return Err(Error::config("run.knn", "must be at least 1"));
        }
        Ok(())
    }

    /// Checks that every referenced input file exists.
    pub fn check_paths(&self) -> Result<()> {
        let missing = |field: &str, p: &Path| Error::config(field, format!("`{}` does not exist", p.display()));
        if let Some(p) = &self.landmarks {
            if !p.is_file() {
                return Err(missing("run.landmarks", p));
            }
        }
        for p in &self.ground_truth {
            if !p.is_file() {
                return Err(missing("run.ground_truth", p));
            }
        }
        Ok(())
    }
}

/// Loads, defaults and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cfg = RunConfig::from_toml(&text, path, base)?;
    cfg.check_paths()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml(text, Path::new("run.toml"), Path::new("/base"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.coarse.w_smo, 0.01);
        assert_eq!(cfg.coarse.w_rot, 1e-4);
        assert_eq!(cfg.coarse.w_arap, 500.0);
        assert_eq!(cfg.fine.w_arap, 200.0);
    }

    #[test]
    fn overrides_reach_both_stages() {
        let cfg = parse(
            "[run]\nmetric = \"p2pl\"\nweights = \"hard\"\nground_truth = [\"gt.ply\"]\n\n[fine]\nmax_iters = 5\n\n[coarse]\nw_smo = 0.001\n",
        )
        .unwrap();
        assert_eq!(cfg.fine.max_iters, 5);
        assert_eq!(cfg.coarse.w_smo, 0.001);
        assert_eq!(cfg.fine.metric, MetricKind::P2pl);
        assert_eq!(cfg.coarse.weights, WeightScheme::HardThreshold);
        assert_eq!(cfg.ground_truth, vec![PathBuf::from("/base/gt.ply")]);
    }

    #[test]
    fn negative_weight_names_field() {
        match parse("[fine]\nw_arap = -1.0\n") {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "fine.w_arap"),
            other => panic!("{other:?}"),
        }
        match parse("[coarse]\nsigma = 0.0\n") {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "coarse.sigma"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line() {
        match parse("[run]\nseed = 1\n\n[fine]\nbogus = 3\n") {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 5);
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("[run]\nmetric = \"xyz\"\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("[nope]\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_paths_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[run]\nlandmarks = \"absent.txt\"\n").unwrap();
        match load_config(&path) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "run.landmarks"),
            other => panic!("{other:?}"),
        }
        fs::write(dir.path().join("absent.txt"), "").unwrap();
        assert!(load_config(&path).is_ok());
    }
}
