use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Matrix3;
use serde::Serialize;

use sunvo::eval::{Trajectory, TrajectoryMetrics};
use sunvo::montecarlo::{modes_for, monte_carlo, MonteCarloResult};
use sunvo::pipeline::{run, sun_seed, PipelineError, RunConfig, SunMode};
use sunvo::sun::oracle_measurement;
use sunvo::tracks::{generate_synthetic, load_tracks, save_tracks, write_sun_detections, GroundTruth, TrackTable};

const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 3;

#[derive(Parser)]
#[command(name = "sunvo", version, about = "Stereo visual odometry with sun-direction corrections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic tracks, ground truth and oracle sun detections.
    Simulate(Common),
    /// Run one pipeline and write the trajectory, report and metrics.
    Run(Common),
    /// Metrics between an estimated and a ground-truth trajectory file.
    Eval {
        estimate: PathBuf,
        truth: PathBuf,
        /// Directory for metrics.json; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired Monte Carlo trials written to montecarlo.csv.
    Montecarlo(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long = "sun-mode")]
    sun_mode: Option<SunMode>,
    #[arg(long)]
    trials: Option<usize>,
}

enum CliError {
    Config(String),
    Abort(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Abort(e.to_string())
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Abort(format!("{}: {e}", path.display()))
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            if let Some(s) = cfg.synthetic.as_mut() {
                s.seed = seed;
            }
        }
        if let Some(mode) = self.sun_mode {
            cfg.sun.source = mode;
            cfg.montecarlo.modes = modes_for(mode);
        }
        if let Some(trials) = self.trials {
            cfg.montecarlo.trials = trials;
        }
        cfg.validate()?;
        fs::create_dir_all(&self.out).map_err(|e| io_error(&self.out, e))?;
        Ok(cfg)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn synthetic_table(cfg: &RunConfig) -> Result<TrackTable, CliError> {
    let synthetic = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| config_error("configuration needs a synthetic section or paths.tracks"))?;
    Ok(generate_synthetic(synthetic, &cfg.intrinsics).map_err(PipelineError::from)?)
}

fn load_table(cfg: &RunConfig) -> Result<TrackTable, CliError> {
    let Some(path) = &cfg.paths.tracks else {
        return synthetic_table(cfg);
    };
    let covariance = Matrix3::identity() * cfg.observation_sigma_px.powi(2);
    let mut table = load_tracks(path, covariance).map_err(PipelineError::from)?;
    if let Some(gt) = &cfg.paths.ground_truth {
        let truth = Trajectory::load(gt).map_err(config_error)?;
        if truth.len() != table.frame_count() {
            return Err(config_error(format!(
                "ground truth has {} poses but the tracks span {} frames",
                truth.len(),
                table.frame_count()
            )));
        }
        table.ground_truth = Some(GroundTruth {
            poses: truth.poses,
            landmarks: Default::default(),
            outliers: Default::default(),
            sun_direction: None,
        });
    }
    Ok(table)
}

fn simulate(args: &Common) -> Result<(), CliError> {
    let cfg = args.load()?;
    let table = synthetic_table(&cfg)?;
    let tracks_path = args.out.join("tracks.txt");
    save_tracks(&table, &tracks_path).map_err(|e| io_error(&tracks_path, e))?;
    let truth = cfg.truth_trajectory(&table).expect("synthetic ground truth");
    let truth_path = args.out.join("ground_truth.txt");
    truth.save(&truth_path).map_err(|e| io_error(&truth_path, e))?;
    let gt = table.ground_truth.as_ref().expect("synthetic ground truth");
    let s_w = cfg.ephemeris_sun()?.or(gt.sun_direction);
    if let Some(s_w) = s_w {
        let sigma = cfg.sun.sigma_deg.to_radians();
        let detections = (0..table.frame_count())
            .filter(|f| f % cfg.sun.cadence == 0)
            .map(|f| oracle_measurement(&gt.poses[f], &s_w, sigma, f, sun_seed(cfg.seed, f)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(config_error)?;
        let path = args.out.join("sun_detections.txt");
        let mut buf = Vec::new();
        write_sun_detections(&detections, &mut buf).map_err(|e| io_error(&path, e))?;
        fs::write(&path, buf).map_err(|e| io_error(&path, e))?;
    }
    println!(
        "{} frames, {} landmarks, {} observations",
        table.frame_count(),
        table.landmark_count(),
        table.observation_count()
    );
    Ok(())
}

fn run_one(args: &Common) -> Result<(), CliError> {
    let cfg = args.load()?;
    let table = load_table(&cfg)?;
    let output = run(&cfg, &table)?;
    let traj_path = args.out.join("trajectory.txt");
    output.trajectory.save(&traj_path).map_err(|e| io_error(&traj_path, e))?;
    write_json(&args.out.join("report.json"), &output.report)?;
    if let Some(truth) = cfg.truth_trajectory(&table) {
        let metrics = TrajectoryMetrics::compute(&output.trajectory, &truth).map_err(|e| CliError::Abort(e.to_string()))?;
        write_json(&args.out.join("metrics.json"), &metrics)?;
        println!(
            "trans ARMSE {:.4} m, rot ARMSE {:.6} rad, final drift {:.3} m ({:.3}%)",
            metrics.trans_armse, metrics.rot_armse, metrics.drift.meters, metrics.drift.percent
        );
    }
    let sun = &output.report.sun;
    println!(
        "{} windows, sun {} generated / {} accepted / {} rejected",
        output.report.windows,
        sun.generated,
        sun.accepted,
        sun.rejected()
    );
    Ok(())
}

fn eval(estimate: &Path, truth: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let est = Trajectory::load(estimate).map_err(config_error)?;
    let truth = Trajectory::load(truth).map_err(config_error)?;
    let metrics = TrajectoryMetrics::compute(&est, &truth).map_err(config_error)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            write_json(&dir.join("metrics.json"), &metrics)
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
            Ok(())
        }
    }
}

fn print_summary(result: &MonteCarloResult) {
    for &mode in &result.modes {
        let drifts: Vec<f64> = result
            .outcomes(mode)
            .into_iter()
            .flatten()
            .map(|o| o.metrics.drift.meters)
            .collect();
        let median = sunvo::montecarlo::median_iqr(&drifts).map_or(f64::NAN, |(m, _)| m);
        println!(
            "{:<18} {}/{} trials, median final drift {:.3} m",
            mode.name(),
            result.completed(mode),
            result.trials,
            median
        );
    }
}

fn montecarlo(args: &Common) -> Result<(), CliError> {
    let cfg = args.load()?;
    let result = monte_carlo(&cfg, cfg.montecarlo.trials)?;
    let path = args.out.join("montecarlo.csv");
    fs::write(&path, result.to_csv_string()).map_err(|e| io_error(&path, e))?;
    print_summary(&result);
    if !result.is_complete() {
        log::warn!("some trials aborted; see the status column of {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Run(args) => run_one(args),
        Command::Eval { estimate, truth, out } => eval(estimate, truth, out.as_deref()),
        Command::Montecarlo(args) => montecarlo(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Abort(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_ABORT)
        }
    }
}
