//! `nrr`: register surfaces, evaluate results and run synthetic benchmarks.
//!
//! Exit codes: 0 success, 2 input error, 3 solver failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nrr_core::config::{load_config, RunConfig};
use nrr_core::evaluation::{evaluate, DistanceMode, ErrorReport, GroundTruth, METRICS_CSV_HEADER};
use nrr_core::io::{load_ground_truth_into, load_landmarks, read_mesh, write_csv, write_ply, MeshData};
use nrr_core::pipeline::{bench_table, evaluate_result, register, write_outputs, PipelineOptions};
use nrr_core::scenario::{generate_scenario, ScenarioKind, SyntheticScenario};
use nrr_core::variants::{MetricKind, WeightScheme};
use nrr_core::{Error, Surface};

#[derive(Parser)]
#[command(name = "nrr", version, about = "Non-rigid surface registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deform SOURCE onto TARGET and write the result, error map and logs.
    Register {
        source: PathBuf,
        target: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Lines of `source target` indices or `source x y z` positions.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Ground truth: a mesh of deformed source positions, or `i j`
        /// correspondence pairs. Repeatable.
        #[arg(long)]
        gt: Vec<PathBuf>,
        /// Output directory; overrides the config (default `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score an existing result against ground truth.
    Evaluate {
        /// Deformed source (same vertex order as SOURCE).
        result: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        #[arg(long, default_value = "geodesic")]
        distance_mode: DistanceMode,
        #[arg(long, default_value_t = nrr_core::geometry::DEFAULT_KNN)]
        knn: usize,
        /// Directory for metrics.csv and curve.csv; prints to stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (scenario, metric, weight scheme) combination and print a CSV table.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "bent_plane,articulated_bar,twisted_cylinder")]
        scenarios: Vec<ScenarioKind>,
        #[arg(long, value_delimiter = ',', default_value = "sp2p,p2pl,p2p")]
        metrics: Vec<MetricKind>,
        /// Weight schemes; defaults to the configured one.
        #[arg(long = "schemes", value_delimiter = ',')]
        schemes: Vec<WeightScheme>,
        /// Seeds per scenario, starting at --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 20)]
        resolution: usize,
        /// Deformation angle in degrees.
        #[arg(long, default_value_t = 30.0)]
        magnitude: f64,
        /// Target noise in mean edge lengths.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0.4)]
        crop_fraction: f64,
        /// Tessellate targets independently of the source.
        #[arg(long)]
        resample: bool,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Output CSV file; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic pair: source.ply, target.ply, gt.ply and, when
    /// known, gt_pairs.txt.
    Generate {
        /// bent_plane, articulated_bar, twisted_cylinder, partial_crop or rigid_blob.
        scenario: ScenarioKind,
        #[arg(long, default_value_t = 20)]
        resolution: usize,
        #[arg(long, default_value_t = 30.0)]
        magnitude: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.4)]
        crop_fraction: f64,
        #[arg(long)]
        resample: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings shared by `register` and `bench`. Flags override the config file.
#[derive(Args)]
struct RunArgs {
    /// TOML file with [run], [coarse] and [fine] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Alignment metric: sp2p, p2pl or p2p.
    #[arg(long)]
    metric: Option<MetricKind>,
    /// Correspondence weights: robust, none, hard, welsch, huber or gm.
    #[arg(long)]
    weights: Option<WeightScheme>,
    /// Skip the deformation-graph stage.
    #[arg(long)]
    skip_coarse: bool,
    /// Skip the per-point stage.
    #[arg(long)]
    skip_fine: bool,
    /// Seed for sampling (and the first bench seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Correspondence error distance: geodesic or euclidean.
    #[arg(long)]
    distance_mode: Option<DistanceMode>,
    /// Record wall-clock seconds in the CSV outputs.
    #[arg(long)]
    timings: bool,
    /// Neighbor count for inputs without faces.
    #[arg(long)]
    knn: Option<usize>,
    /// Rigidity weight of the fine stage.
    #[arg(long, allow_negative_numbers = true)]
    w_arap: Option<f64>,
    /// Rigidity weight of the coarse stage.
    #[arg(long, allow_negative_numbers = true)]
    coarse_w_arap: Option<f64>,
    /// Graph smoothness weight.
    #[arg(long, allow_negative_numbers = true)]
    w_smo: Option<f64>,
    /// Orthogonality weight of node transforms.
    #[arg(long, allow_negative_numbers = true)]
    w_rot: Option<f64>,
    /// Landmark weight for both stages.
    #[arg(long, allow_negative_numbers = true)]
    w_landmark: Option<f64>,
    /// Source samples used by the coarse stage.
    #[arg(long)]
    sample_count: Option<usize>,
    /// Graph node radius in mean edge lengths.
    #[arg(long, allow_negative_numbers = true)]
    radius_multiplier: Option<f64>,
    /// Iteration cap of the coarse stage.
    #[arg(long)]
    coarse_iters: Option<usize>,
    /// Iteration cap of the fine stage.
    #[arg(long)]
    fine_iters: Option<usize>,
    /// Convergence tolerance of the coarse stage.
    #[arg(long, allow_negative_numbers = true)]
    coarse_tol: Option<f64>,
    /// Convergence tolerance of the fine stage.
    #[arg(long, allow_negative_numbers = true)]
    fine_tol: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        set(&mut cfg.metric, self.metric);
        set(&mut cfg.weights, self.weights);
        cfg.skip_coarse |= self.skip_coarse;
        cfg.skip_fine |= self.skip_fine;
        cfg.timings |= self.timings;
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.distance_mode, self.distance_mode);
        set(&mut cfg.knn, self.knn);
        set(&mut cfg.fine.w_arap, self.w_arap);
        set(&mut cfg.coarse.w_arap, self.coarse_w_arap);
        set(&mut cfg.coarse.w_smo, self.w_smo);
        set(&mut cfg.coarse.w_rot, self.w_rot);
        if self.w_landmark.is_some() {
            cfg.coarse.w_landmark = self.w_landmark;
            cfg.fine.w_landmark = self.w_landmark;
        }
        set(&mut cfg.coarse.sample_count, self.sample_count);
        set(&mut cfg.coarse.radius_multiplier, self.radius_multiplier);
        set(&mut cfg.coarse.max_iters, self.coarse_iters);
        set(&mut cfg.fine.max_iters, self.fine_iters);
        set(&mut cfg.coarse.tol, self.coarse_tol);
        set(&mut cfg.fine.tol, self.fine_tol);
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load(path: &Path, knn: usize) -> Result<Surface, Error> {
    read_mesh(path)?.into_surface(knn)
}

fn load_truth(paths: &[PathBuf]) -> Result<Option<GroundTruth>, Error> {
    if paths.is_empty() {
        return Ok(None);
    }
    let mut truth = GroundTruth::default();
    for p in paths {
        load_ground_truth_into(p, &mut truth)?;
    }
    Ok(Some(truth))
}

fn print_report(report: &ErrorReport) {
    println!("{METRICS_CSV_HEADER}");
    println!("{}", report.csv_fields());
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Register { source, target, run, landmarks, gt, out } => {
            let mut cfg = run.resolve()?;
            if let Some(p) = landmarks {
                cfg.landmarks = Some(p);
            }
            if !gt.is_empty() {
                cfg.ground_truth = gt;
            }
            set(&mut cfg.output, out);
            cfg.check_paths()?;
            let src = load(&source, cfg.knn)?;
            let tgt = load(&target, cfg.knn)?;
            let mut options = PipelineOptions::from_run_config(&cfg);
            if let Some(p) = &cfg.landmarks {
                options.landmarks = load_landmarks(p, src.len(), &tgt)?;
            }
            let truth = load_truth(&cfg.ground_truth)?;
            let result = register(&src, &tgt, &options)?;
            let report = evaluate_result(&result, &src, &tgt, truth.as_ref(), cfg.distance_mode)?;
            write_outputs(&cfg.output, &result, &report, cfg.timings)?;
            print_report(&report);
        }
        Command::Evaluate { result, source, target, gt, distance_mode, knn, out } => {
            let src = load(&source, knn)?;
            let tgt = load(&target, knn)?;
            let deformed = read_mesh(&result)?.points;
            let truth = load_truth(&gt)?.unwrap_or_default();
            let report = evaluate(&deformed, &src, &tgt, &truth, distance_mode)?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                    write_csv(&dir.join("metrics.csv"), METRICS_CSV_HEADER, [report.csv_fields()])?;
                    write_csv(
                        &dir.join("curve.csv"),
                        "threshold,fraction",
                        report.cumulative_curve.iter().map(|(t, f)| format!("{t:e},{f:e}")),
                    )?;
                }
                None => print_report(&report),
            }
        }
        Command::Bench {
            run,
            scenarios,
            metrics,
            schemes,
            seeds,
            resolution,
            magnitude,
            noise,
            crop_fraction,
            resample,
            threads,
            out,
        } => {
            let cfg = run.resolve()?;
            let specs: Vec<SyntheticScenario> = scenarios
                .iter()
                .flat_map(|&kind| {
                    (cfg.seed..cfg.seed + seeds).map(move |seed| SyntheticScenario {
                        crop_fraction,
                        resample,
                        ..SyntheticScenario::new(kind, resolution, magnitude, noise, seed)
                    })
                })
                .collect();
            let schemes = if schemes.is_empty() { vec![cfg.weights] } else { schemes };
            let options = PipelineOptions::from_run_config(&cfg);
            let table = bench_table(&specs, &metrics, &schemes, &options, cfg.distance_mode, threads, cfg.timings)?;
            match out {
                Some(p) => fs::write(&p, table).map_err(|e| Error::Io { path: p.clone(), source: e })?,
                None => print!("{table}"),
            }
        }
        Command::Generate { scenario, resolution, magnitude, noise, seed, crop_fraction, resample, out } => {
            let spec = SyntheticScenario {
                crop_fraction,
                resample,
                ..SyntheticScenario::new(scenario, resolution, magnitude, noise, seed)
            };
            let (source, target, truth) = generate_scenario(&spec)?;
            fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            write_ply(&out.join("source.ply"), &MeshData::from_surface(&source))?;
            write_ply(&out.join("target.ply"), &MeshData::from_surface(&target))?;
            if let Some(p) = &truth.positions {
                let mesh = MeshData { points: p.clone(), faces: source.faces().map(<[_]>::to_vec), ..MeshData::default() };
                write_ply(&out.join("gt.ply"), &mesh)?;
            }
            if let Some(pairs) = &truth.correspondences {
                let text: String = pairs.iter().map(|(i, j)| format!("{i} {j}\n")).collect();
                let path = out.join("gt_pairs.txt");
                fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
