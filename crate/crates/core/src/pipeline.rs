//! End-to-end registration: normalize, coarse graph alignment, fine
//! per-point refinement, then back to the caller's units.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::coarse::{run_coarse, CoarseConfig};
use crate::config::RunConfig;
use crate::energy::{DeformationState, Landmark};
use crate::evaluation::{error_map, evaluate, DistanceMode, ErrorReport, GroundTruth, METRICS_CSV_HEADER};
use crate::fine::{run_fine, seconds_field, FineConfig, IterationRecord, ITERATION_CSV_HEADER};
use crate::geometry::{normalize_pair, NormalizationTransform};
use crate::io::{write_csv, write_ply, MeshData};
use crate::scenario::{generate_scenario, SyntheticScenario};
use crate::variants::{MetricKind, WeightScheme};
use crate::{Error, Result, Surface, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    pub skip_coarse: bool,
    pub skip_fine: bool,
    /// Landmarks with target positions in input units.
    pub landmarks: Vec<Landmark>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions::from_run_config(&RunConfig::default())
    }
}

impl PipelineOptions {
    pub fn from_run_config(cfg: &RunConfig) -> Self {
        let mut cfg = cfg.clone();
        cfg.sync();
        PipelineOptions {
            coarse: cfg.coarse,
            fine: cfg.fine,
            skip_coarse: cfg.skip_coarse,
            skip_fine: cfg.skip_fine,
            landmarks: Vec::new(),
        }
    }

    /// Sets the metric and weight scheme of both stages.
    pub fn with_variant(mut self, metric: MetricKind, weights: WeightScheme) -> Self {
        self.coarse.metric = metric;
        self.fine.metric = metric;
        self.coarse.weights = weights;
        self.fine.weights = weights;
        self
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    /// Source topology with deformed positions and normals, in input units.
    pub deformed: Surface,
    /// Final state in normalized units.
    pub state: DeformationState,
    pub transform: NormalizationTransform,
    pub coarse_log: Vec<IterationRecord>,
    pub fine_log: Vec<IterationRecord>,
    pub seconds: f64,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: name, source: Box::new(e) })
}

/// Registers `source` onto `target`.
pub fn register(source: &Surface, target: &Surface, options: &PipelineOptions) -> Result<PipelineResult> {
    let start = Instant::now();
    let (transform, src, tgt) = stage("normalize", normalize_pair(source, target))?;
    let landmarks: Vec<Landmark> = options
        .landmarks
        .iter()
        .map(|l| Landmark { source: l.source, target: transform.apply(&l.target) })
        .collect();
    let mut state = DeformationState::identity(&src);
    let mut coarse_log = Vec::new();
    if !options.skip_coarse {
        let res = stage("coarse", run_coarse(&src, &tgt, &options.coarse, &landmarks))?;
        state = res.state;
        coarse_log = res.log;
    }
    let mut fine_log = Vec::new();
    if !options.skip_fine {
        let res = stage("fine", run_fine(&src, &tgt, state, &options.fine, &landmarks))?;
        state = res.state;
        fine_log = res.log;
    }
    let points = state.positions.iter().map(|p| transform.invert(p)).collect();
    let deformed = stage("output", source.with_points_and_normals(points, state.normals.clone()))?;
    Ok(PipelineResult { deformed, state, transform, coarse_log, fine_log, seconds: start.elapsed().as_secs_f64() })
}

/// Distance of each point to the nearest target point.
pub fn distance_to_target(points: &[Vec3], target: &Surface) -> Result<Vec<f64>> {
    let index = target.spatial_index()?;
    Ok(points.iter().map(|p| index.nearest_with_dist2(p).1.sqrt()).collect())
}

/// Metrics for `result` against `truth`, or only per-point distances to the
/// target when no ground truth is known.
pub fn evaluate_result(
    result: &PipelineResult,
    source: &Surface,
    target: &Surface,
    truth: Option<&GroundTruth>,
    mode: DistanceMode,
) -> Result<ErrorReport> {
    match truth {
        Some(t) => evaluate(result.deformed.points(), source, target, t, mode),
        None => Ok(ErrorReport {
            per_point_errors: distance_to_target(result.deformed.points(), target)?,
            ..ErrorReport::default()
        }),
    }
}

pub fn metrics_header() -> String {
    format!("{METRICS_CSV_HEADER},coarse_iters,fine_iters,seconds")
}

pub fn metrics_row(result: &PipelineResult, report: &ErrorReport, timed: bool) -> String {
    format!(
        "{},{},{},{}",
        report.csv_fields(),
        result.coarse_log.len(),
        result.fine_log.len(),
        seconds_field(result.seconds, timed)
    )
}

/// Writes `deformed.ply`, `errormap.ply`, `metrics.csv`, `curve.csv` and the
/// two iteration logs into `dir`.
pub fn write_outputs(dir: &Path, result: &PipelineResult, report: &ErrorReport, timed: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut mesh = MeshData::from_surface(&result.deformed);
    write_ply(&dir.join("deformed.ply"), &mesh)?;
    let scale = report.per_point_errors.iter().copied().fold(0.0, f64::max);
    mesh.colors = Some(error_map(&report.per_point_errors, scale));
    write_ply(&dir.join("errormap.ply"), &mesh)?;
    write_csv(&dir.join("metrics.csv"), &metrics_header(), [metrics_row(result, report, timed)])?;
    write_csv(
        &dir.join("curve.csv"),
        "threshold,fraction",
        report.cumulative_curve.iter().map(|(t, f)| format!("{t:e},{f:e}")),
    )?;
    for (name, log) in [("iterations_coarse.csv", &result.coarse_log), ("iterations_fine.csv", &result.fine_log)] {
        write_csv(&dir.join(name), ITERATION_CSV_HEADER, log.iter().map(|r| r.csv_row(timed)))?;
    }
    Ok(())
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scenario: String,
    pub metric: MetricKind,
    pub weights: WeightScheme,
    /// `ok`, or the failing stage.
    pub status: String,
    pub report: ErrorReport,
    pub coarse_iters: usize,
    pub fine_iters: usize,
    pub seconds: f64,
}

pub fn bench_header() -> String {
    format!("scenario,metric,weights,status,{METRICS_CSV_HEADER},coarse_iters,fine_iters,seconds")
}

impl BenchRow {
    pub fn csv_row(&self, timed: bool) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.scenario,
            self.metric,
            self.weights,
            self.status,
            self.report.csv_fields(),
            self.coarse_iters,
            self.fine_iters,
            seconds_field(self.seconds, timed)
        )
    }
}

/// Runs one scenario with one variant. Solver failures become a row with a
/// failure status instead of an error.
pub fn bench_case(
    spec: &SyntheticScenario,
    metric: MetricKind,
    weights: WeightScheme,
    base: &PipelineOptions,
    mode: DistanceMode,
) -> Result<BenchRow> {
    let (source, target, truth) = generate_scenario(spec)?;
    let options = base.clone().with_variant(metric, weights);
    let mut row = BenchRow {
        scenario: spec.label(),
        metric,
        weights,
        status: "ok".into(),
        report: ErrorReport::default(),
        coarse_iters: 0,
        fine_iters: 0,
        seconds: 0.0,
    };
    match register(&source, &target, &options) {
        Ok(result) => {
            row.report = evaluate_result(&result, &source, &target, Some(&truth), mode)?;
            row.coarse_iters = result.coarse_log.len();
            row.fine_iters = result.fine_log.len();
            row.seconds = result.seconds;
        }
        Err(Error::Stage { stage, source }) if !source.is_input_error() => row.status = format!("failed_{stage}"),
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Every (scenario, metric, weight scheme) combination, in that nesting
/// order. Cases run on up to `threads` workers; row order and contents do
/// not depend on the thread count.
pub fn bench_rows(
    specs: &[SyntheticScenario],
    metrics: &[MetricKind],
    weights: &[WeightScheme],
    base: &PipelineOptions,
    mode: DistanceMode,
    threads: usize,
) -> Result<Vec<BenchRow>> {
    let cases: Vec<(&SyntheticScenario, MetricKind, WeightScheme)> = specs
        .iter()
        .flat_map(|s| metrics.iter().flat_map(move |&m| weights.iter().map(move |&w| (s, m, w))))
        .collect();
    let slots: Vec<Mutex<Option<Result<BenchRow>>>> = cases.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, cases.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(spec, m, w)) = cases.get(k) else { break };
                let row = bench_case(spec, m, w, base, mode);
                *slots[k].lock().unwrap() = Some(row);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().expect("every case ran")).collect()
}

/// The benchmark table as CSV text.
pub fn bench_table(
    specs: &[SyntheticScenario],
    metrics: &[MetricKind],
    weights: &[WeightScheme],
    base: &PipelineOptions,
    mode: DistanceMode,
    threads: usize,
    timed: bool,
) -> Result<String> {
    let rows = bench_rows(specs, metrics, weights, base, mode, threads)?;
    let mut out = bench_header();
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row(timed));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioKind;

    fn small() -> (Surface, Surface, GroundTruth) {
        generate_scenario(&SyntheticScenario::new(ScenarioKind::BentPlane, 10, 10.0, 0.0, 1)).unwrap()
    }

    #[test]
    fn output_round_trips_to_internal_solution() {
        let (s, t, _) = small();
        let r = register(&s, &t, &PipelineOptions::default()).unwrap();
        for (p, q) in r.deformed.points().iter().zip(&r.state.positions) {
            assert!((r.transform.apply(p) - q).norm() <= 1e-12 * q.norm().max(1.0));
        }
        assert_eq!(r.deformed.edges(), s.edges());
        assert_eq!(r.deformed.faces(), s.faces());
    }

    #[test]
    fn skipping_stages_keeps_topology() {
        let (s, t, _) = small();
        for (sc, sf) in [(true, false), (false, true), (true, true)] {
            let opts = PipelineOptions { skip_coarse: sc, skip_fine: sf, ..PipelineOptions::default() };
            let r = register(&s, &t, &opts).unwrap();
            assert_eq!(r.deformed.edges(), s.edges());
            assert_eq!(r.deformed.faces(), s.faces());
            assert_eq!(r.coarse_log.is_empty(), sc);
            assert_eq!(r.fine_log.is_empty(), sf);
            if sc && sf {
                for (a, b) in r.deformed.points().iter().zip(s.points()) {
                    assert!((a - b).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let (s, t, _) = small();
        let mut opts = PipelineOptions::default();
        opts.landmarks.push(Landmark { source: s.len(), target: Vec3::zeros() });
        let err = register(&s, &t, &opts).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "coarse", .. }), "{err}");
        assert!(err.is_input_error());
    }

    #[test]
    fn empty_bench_is_header_only() {
        let table = bench_table(&[], &MetricKind::ALL, &[WeightScheme::RobustGaussian], &PipelineOptions::default(), DistanceMode::Geodesic, 2, false).unwrap();
        assert_eq!(table, format!("{}\n", bench_header()));
    }

    #[test]
    fn outputs_are_written_deterministically() {
        let (s, t, gt) = small();
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for run in 0..2 {
            let r = register(&s, &t, &PipelineOptions::default()).unwrap();
            let report = evaluate_result(&r, &s, &t, Some(&gt), DistanceMode::Geodesic).unwrap();
            let out = dir.path().join(format!("run{run}"));
            write_outputs(&out, &r, &report, false).unwrap();
            let mut files = Vec::new();
            for name in ["deformed.ply", "errormap.ply", "metrics.csv", "curve.csv", "iterations_coarse.csv", "iterations_fine.csv"] {
                files.push(fs::read(out.join(name)).unwrap());
            }
            bytes.push(files);
        }
        assert_eq!(bytes[0], bytes[1]);
        let metrics = String::from_utf8(bytes[0][2].clone()).unwrap();
        assert_eq!(metrics.lines().count(), 2);
    }
}
