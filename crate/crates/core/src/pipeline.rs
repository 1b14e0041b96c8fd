//! Sliding-window orchestration.
//!
//! Window `b` covers frames `b .. b + N`. Its base frame is `b`, and
//! `T_{b,w}` is the pose committed for `b` by an earlier window. Each window
//! is initialized from RANSAC inter-frame motions, re-triangulates its
//! landmarks in the base frame, attaches gated sun measurements and is
//! solved. Only frames without a committed pose are committed, so every
//! frame is written exactly once.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{self, StereoIntrinsics};
use crate::eval::Trajectory;
use crate::frontend::{ransac_interframe, FrontendError, InterframeEstimate, RansacConfig};
use crate::geometry::{Pose, Rotation, UnitVec3};
use crate::solver::{solve_window, SolverError, SolverOptions, WindowObservation, WindowProblem, WindowSun};
use crate::sun::{
    bimodal_measurement, camera_vec_from_azzen, gate_measurement, max_likelihood, oracle_measurement, predict_sun,
    solar_ephemeris, vo_prior_disambiguate, BimodalConfig, EphemerisQuery, GateDecision, GateReason, SunError,
    SunMeasurement, SunPrior, SunSource, DEFAULT_COS_GATE, DEFAULT_Y_GATE, PRIOR_SIGMA_AZIMUTH_DEG,
    PRIOR_SIGMA_ZENITH_DEG,
};
use crate::tracks::{load_sun_detections, GroundTruth, LandmarkId, SyntheticWorldConfig, TrackError, TrackTable};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("frontend initialization failed at frame {frame}: {source}")]
    Frontend { frame: usize, source: FrontendError },
    #[error("solver failed in window {window}: {source}")]
    Solver { window: usize, source: SolverError },
    #[error(transparent)]
    Tracks(#[from] TrackError),
}

impl PipelineError {
    /// Configuration problems as opposed to aborts during estimation.
    pub fn is_config(&self) -> bool {
        match self {
            PipelineError::Config(_) => true,
            PipelineError::Tracks(e) => !matches!(e, TrackError::InfeasibleScene { .. }),
            PipelineError::Solver { source, .. } => matches!(source, SolverError::Configuration(_)),
            PipelineError::Frontend { .. } => false,
        }
    }
}

fn config_err(e: impl fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SunMode {
    Off,
    Oracle,
    Bimodal,
    File,
}

impl FromStr for SunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(SunMode::Off),
            "oracle" => Ok(SunMode::Oracle),
            "bimodal" => Ok(SunMode::Bimodal),
            "file" => Ok(SunMode::File),
            other => Err(format!("unknown sun mode {other:?}")),
        }
    }
}

impl fmt::Display for SunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SunMode::Off => "off",
            SunMode::Oracle => "oracle",
            SunMode::Bimodal => "bimodal",
            SunMode::File => "file",
        })
    }
}

fn default_true() -> bool {
    true
}
fn default_cadence() -> usize {
    5
}
fn default_cos_gate() -> f64 {
    DEFAULT_COS_GATE
}
fn default_y_gate() -> f64 {
    DEFAULT_Y_GATE
}
fn default_sigma_deg() -> f64 {
    5.0
}
fn default_prior_az() -> f64 {
    PRIOR_SIGMA_AZIMUTH_DEG
}
fn default_prior_zen() -> f64 {
    PRIOR_SIGMA_ZENITH_DEG
}
fn default_static_limit() -> f64 {
    600.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SunConfig {
    #[serde(default = "default_off")]
    pub source: SunMode,
    /// A measurement is taken on every frame index divisible by this.
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default = "default_cos_gate")]
    pub cos_gate: f64,
    #[serde(default = "default_y_gate")]
    pub y_gate: f64,
    /// Angular noise of the simulated sun sensor (degrees).
    #[serde(default = "default_sigma_deg")]
    pub sigma_deg: f64,
    /// Isotropic standard deviation given to simulated measurements in the
    /// solver (degrees). Defaults to `sigma_deg`.
    #[serde(default)]
    pub solver_sigma_deg: Option<f64>,
    /// Resolve bimodal detections with the pose-predicted prior; otherwise take the larger weight.
    #[serde(default = "default_true")]
    pub vo_prior: bool,
    #[serde(default)]
    pub bimodal: BimodalConfig,
    #[serde(default = "default_prior_az")]
    pub prior_sigma_azimuth_deg: f64,
    #[serde(default = "default_prior_zen")]
    pub prior_sigma_zenith_deg: f64,
    /// Longest run (seconds) for which a single sun direction is assumed.
    #[serde(default = "default_static_limit")]
    pub max_static_duration_s: f64,
}

fn default_off() -> SunMode {
    SunMode::Off
}

impl Default for SunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl SunConfig {
    pub fn solver_sigma_rad(&self) -> f64 {
        self.solver_sigma_deg.unwrap_or(self.sigma_deg).to_radians()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EphemerisConfig {
    pub lat: f64,
    pub lon: f64,
    /// UTC seconds of frame 0.
    pub t0: f64,
}

/// Camera pose in the world: centre and camera-to-world orientation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseConfig {
    pub position: [f64; 3],
    /// `[w, x, y, z]`.
    pub orientation: [f64; 4],
}

impl PoseConfig {
    /// World-to-camera transform.
    pub fn to_pose(&self) -> Result<Pose, PipelineError> {
        let [w, x, y, z] = self.orientation;
        let q = Quaternion::new(w, x, y, z);
        if !((q.norm() - 1.0).abs() < 1e-6) {
            return Err(config_err("initial_pose.orientation must be a unit quaternion"));
        }
        let r = Rotation::from_quaternion(&UnitQuaternion::new_normalize(q));
        Ok(Pose::new(r, Vector3::from(self.position)).inverse())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default)]
    pub tracks: Option<PathBuf>,
    #[serde(default)]
    pub sun_detections: Option<PathBuf>,
    /// Ground-truth trajectory file for tracks loaded from disk.
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
}

/// Heading error injected into every committed pose, standing in for
/// visual odometry yaw drift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    #[serde(default)]
    pub yaw_bias_deg: f64,
    #[serde(default)]
    pub yaw_noise_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    Off,
    Oracle,
    Bimodal,
    BimodalNoPrior,
    File,
}

impl ExperimentMode {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentMode::Off => "off",
            ExperimentMode::Oracle => "oracle",
            ExperimentMode::Bimodal => "bimodal",
            ExperimentMode::BimodalNoPrior => "bimodal_no_prior",
            ExperimentMode::File => "file",
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        let (source, prior) = match self {
            ExperimentMode::Off => (SunMode::Off, cfg.sun.vo_prior),
            ExperimentMode::Oracle => (SunMode::Oracle, cfg.sun.vo_prior),
            ExperimentMode::Bimodal => (SunMode::Bimodal, true),
            ExperimentMode::BimodalNoPrior => (SunMode::Bimodal, false),
            ExperimentMode::File => (SunMode::File, cfg.sun.vo_prior),
        };
        cfg.sun.source = source;
        cfg.sun.vo_prior = prior;
    }
}

impl FromStr for ExperimentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown mode {s:?}"))
    }
}

fn default_trials() -> usize {
    20
}
fn default_modes() -> Vec<ExperimentMode> {
    vec![ExperimentMode::Off, ExperimentMode::Oracle]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<ExperimentMode>,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            modes: default_modes(),
        }
    }
}

fn default_window() -> usize {
    2
}
fn default_dt() -> f64 {
    0.1
}
fn default_pixel_sigma() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_window")]
    pub window_size: usize,
    /// Seconds between frames.
    #[serde(default = "default_dt")]
    pub frame_dt: f64,
    #[serde(default = "StereoIntrinsics::kitti_like")]
    pub intrinsics: StereoIntrinsics,
    /// Isotropic `(u, v, d)` standard deviation used to weight observations.
    #[serde(default = "default_pixel_sigma")]
    pub observation_sigma_px: f64,
    #[serde(default)]
    pub ransac: RansacConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub sun: SunConfig,
    #[serde(default)]
    pub ephemeris: Option<EphemerisConfig>,
    /// `T_{1,w}`; defaults to the ground-truth first pose, or identity.
    #[serde(default)]
    pub initial_pose: Option<PoseConfig>,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synthetic: Option<SyntheticWorldConfig>,
    #[serde(default)]
    pub montecarlo: MonteCarloConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.window_size < 2 {
            return Err(config_err("window_size must be >= 2"));
        }
        if !(self.frame_dt > 0.0) {
            return Err(config_err("frame_dt must be positive"));
        }
        if !(self.observation_sigma_px > 0.0) {
            return Err(config_err("observation_sigma_px must be positive"));
        }
        self.intrinsics.validate().map_err(config_err)?;
        self.ransac.validate().map_err(config_err)?;
        let s = &self.sun;
        if s.cadence == 0 {
            return Err(config_err("sun.cadence must be >= 1"));
        }
        if !(s.cos_gate >= 0.0 && s.y_gate >= 0.0) {
            return Err(config_err("sun gates must be non-negative"));
        }
        if !(s.sigma_deg >= 0.0) || !(s.solver_sigma_rad() > 0.0) {
            return Err(config_err("sun.sigma_deg must be >= 0 and the solver sigma positive"));
        }
        if !(s.prior_sigma_azimuth_deg > 0.0 && s.prior_sigma_zenith_deg > 0.0) {
            return Err(config_err("prior sigmas must be positive"));
        }
        if let Some(e) = &self.ephemeris {
            solar_ephemeris(&EphemerisQuery {
                latitude_deg: e.lat,
                longitude_deg: e.lon,
                timestamp: e.t0,
            })
            .map_err(config_err)?;
        }
        if let Some(p) = &self.initial_pose {
            p.to_pose()?;
        }
        Ok(())
    }

    /// Sun direction in the world from the ephemeris section, when present.
    pub fn ephemeris_sun(&self) -> Result<Option<UnitVec3>, PipelineError> {
        self.ephemeris
            .map(|e| {
                solar_ephemeris(&EphemerisQuery {
                    latitude_deg: e.lat,
                    longitude_deg: e.lon,
                    timestamp: e.t0,
                })
                .map_err(config_err)
            })
            .transpose()
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        self.ephemeris.map_or(0.0, |e| e.t0) + frame as f64 * self.frame_dt
    }

    /// Ground-truth poses of a synthetic table on this configuration's clock.
    pub fn truth_trajectory(&self, tracks: &TrackTable) -> Option<Trajectory> {
        let g = tracks.ground_truth.as_ref()?;
        (g.poses.len() == tracks.frame_count()).then(|| Trajectory {
            poses: g.poses.clone(),
            timestamps: (0..g.poses.len()).map(|f| self.timestamp(f)).collect(),
        })
    }
}

/// Sun measurement bookkeeping. `accepted + rejected_cosine + rejected_vertical == generated`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SunAudit {
    pub generated: usize,
    pub accepted: usize,
    pub rejected_cosine: usize,
    pub rejected_vertical: usize,
    /// Sun terms placed into window problems.
    pub used: usize,
    /// Bimodal detections whose selected candidate was the true mode.
    pub bimodal_true_selected: usize,
    pub bimodal_total: usize,
}

impl SunAudit {
    pub fn rejected(&self) -> usize {
        self.rejected_cosine + self.rejected_vertical
    }

    pub fn balanced(&self) -> bool {
        self.accepted + self.rejected() == self.generated
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub windows: usize,
    pub solver_iterations: usize,
    pub unconverged_windows: usize,
    pub dropped_observations: usize,
    pub sun: SunAudit,
    pub static_sun_warning: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub report: RunReport,
}

const STREAM_RANSAC: u64 = 1;
const STREAM_SUN: u64 = 2;
const STREAM_YAW: u64 = 3;
const STREAM_TRIAL: u64 = 4;

/// Independent 64-bit seed for `(seed, stream, index)` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    derive_seed(seed, STREAM_TRIAL, trial as u64)
}

/// Seed of the simulated sun measurement taken at `frame`.
pub fn sun_seed(seed: u64, frame: usize) -> u64 {
    derive_seed(seed, STREAM_SUN, frame as u64)
}

struct SunContext<'a> {
    cfg: &'a SunConfig,
    /// Direction used by the estimator.
    s_w: UnitVec3,
    /// Direction used to simulate measurements.
    s_true: UnitVec3,
    truth: Option<&'a GroundTruth>,
    by_frame: BTreeMap<usize, Vec<SunMeasurement>>,
    seed: u64,
}

impl SunContext<'_> {
    /// Candidate measurements for `frame`, before gating.
    fn measurements(
        &self,
        frame: usize,
        predicted: &UnitVec3,
        audit: &mut SunAudit,
    ) -> Result<Vec<SunMeasurement>, PipelineError> {
        let seed = sun_seed(self.seed, frame);
        let weight = Matrix3::identity() * self.cfg.solver_sigma_rad().powi(2);
        let truth_pose = || {
            self.truth
                .and_then(|g| g.poses.get(frame))
                .ok_or_else(|| config_err("simulated sun measurements need ground-truth poses"))
        };
        let sun = |e: SunError| config_err(e);
        Ok(match self.cfg.source {
            SunMode::Off => Vec::new(),
            SunMode::Oracle => {
                let mut m =
                    oracle_measurement(truth_pose()?, &self.s_true, self.cfg.sigma_deg.to_radians(), frame, seed)
                        .map_err(sun)?;
                m.covariance = weight;
                vec![m]
            }
            SunMode::Bimodal => {
                let det = bimodal_measurement(truth_pose()?, &self.s_true, &self.cfg.bimodal, frame, seed)
                    .map_err(sun)?;
                let pairs = det.as_pairs();
                let (idx, chosen) = if self.cfg.vo_prior {
                    let prior = SunPrior::from_prediction(predicted).with_sigmas(
                        self.cfg.prior_sigma_azimuth_deg.to_radians(),
                        self.cfg.prior_sigma_zenith_deg.to_radians(),
                    );
                    vo_prior_disambiguate(&pairs, &prior)
                } else {
                    max_likelihood(&pairs)
                }
                .expect("two candidates");
                audit.bimodal_total += 1;
                audit.bimodal_true_selected += usize::from(idx == det.true_index);
                vec![SunMeasurement {
                    direction: camera_vec_from_azzen(&chosen),
                    covariance: weight,
                    frame,
                    source: SunSource::BimodalSim,
                }]
            }
            SunMode::File => self.by_frame.get(&frame).cloned().unwrap_or_default(),
        })
    }
}

/// Runs the pipeline, loading sun detections from `paths.sun_detections` in file mode.
pub fn run(cfg: &RunConfig, tracks: &TrackTable) -> Result<RunOutput, PipelineError> {
    let detections = match (cfg.sun.source, &cfg.paths.sun_detections) {
        (SunMode::File, Some(p)) => load_sun_detections(p)?,
        (SunMode::File, None) => return Err(config_err("sun.source = file needs paths.sun_detections")),
        _ => Vec::new(),
    };
    run_with_detections(cfg, tracks, &detections)
}

pub fn run_with_detections(
    cfg: &RunConfig,
    tracks: &TrackTable,
    detections: &[(usize, SunMeasurement)],
) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let n = cfg.window_size;
    let frame_count = tracks.frame_count();
    if frame_count < n {
        return Err(config_err(format!("{frame_count} frames is fewer than the window size {n}")));
    }
    let truth = tracks.ground_truth.as_ref();
    let anchor = match (&cfg.initial_pose, truth) {
        (Some(p), _) => p.to_pose()?,
        (None, Some(g)) if !g.poses.is_empty() => g.poses[0],
        _ => Pose::identity(),
    };
    let k = &cfg.intrinsics;
    let mut report = RunReport::default();

    let sun_on = cfg.sun.source != SunMode::Off;
    let ephemeris_sun = cfg.ephemeris_sun()?;
    let truth_sun = truth.and_then(|g| g.sun_direction);
    let s_w = ephemeris_sun.or(truth_sun);
    if sun_on && s_w.is_none() {
        return Err(config_err("sun measurements need an ephemeris section or a ground-truth sun direction"));
    }
    let s_w = s_w.unwrap_or_else(|| UnitVec3::new_unchecked(Vector3::z()));
    let duration = (frame_count - 1) as f64 * cfg.frame_dt;
    if sun_on && duration > cfg.sun.max_static_duration_s {
        log::warn!(
            "run spans {duration:.1} s, longer than the {:.1} s static-sun limit",
            cfg.sun.max_static_duration_s
        );
        report.static_sun_warning = true;
    }
    let mut by_frame: BTreeMap<usize, Vec<SunMeasurement>> = BTreeMap::new();
    for (f, m) in detections {
        m.validate().map_err(config_err)?;
        by_frame.entry(*f).or_default().push(*m);
    }
    let sun = SunContext {
        cfg: &cfg.sun,
        s_w,
        s_true: truth_sun.unwrap_or(s_w),
        truth,
        by_frame,
        seed: cfg.seed,
    };

    let ransac = RansacConfig {
        seed: cfg.ransac.seed ^ derive_seed(cfg.seed, STREAM_RANSAC, 0),
        ..cfg.ransac
    };
    let obs_cov = Matrix3::identity() * cfg.observation_sigma_px.powi(2);
    let yaw_bias = cfg.perturbation.yaw_bias_deg.to_radians();
    let yaw_noise = cfg.perturbation.yaw_noise_deg.to_radians();

    let mut motions: Vec<InterframeEstimate> = Vec::with_capacity(frame_count - 1);
    let mut committed: Vec<Pose> = vec![anchor];
    let mut accepted_sun: Vec<Vec<SunMeasurement>> = vec![Vec::new(); frame_count];

    for b in 0..=frame_count - n {
        while motions.len() < b + n - 1 {
            let f = motions.len();
            motions.push(
                ransac_interframe(tracks, f, k, &ransac).map_err(|source| PipelineError::Frontend { frame: f, source })?,
            );
        }
        let t_bw = committed[b];
        let t_wb = t_bw.inverse();
        let mut guess: Vec<Pose> = Vec::with_capacity(n);
        for i in 0..n {
            let f = b + i;
            guess.push(if i == 0 {
                Pose::identity()
            } else if f < committed.len() {
                committed[f].compose(&t_wb)
            } else {
                motions[f - 1].motion.compose(&guess[i - 1])
            });
        }

        for (i, g) in guess.iter().enumerate().skip(1) {
            let f = b + i;
            if f < committed.len() || !sun_on || f % cfg.sun.cadence != 0 {
                continue;
            }
            let predicted = predict_sun(g, &t_bw, &sun.s_w);
            for m in sun.measurements(f, &predicted, &mut report.sun)? {
                report.sun.generated += 1;
                match gate_measurement(&m.direction, &predicted, cfg.sun.cos_gate, cfg.sun.y_gate) {
                    GateDecision::Accept => {
                        report.sun.accepted += 1;
                        accepted_sun[f].push(m);
                    }
                    GateDecision::Reject(GateReason::CosineDistance(_)) => report.sun.rejected_cosine += 1,
                    GateDecision::Reject(GateReason::VerticalError(_)) => report.sun.rejected_vertical += 1,
                }
            }
        }

        let mut problem = build_window(b, n, tracks, &motions, &guess, k, &obs_cov);
        problem.t_bw = t_bw;
        problem.s_w = sun.s_w;
        for i in 1..n {
            for m in &accepted_sun[b + i] {
                problem.sun.push(WindowSun {
                    pose: i,
                    measurement: *m,
                });
            }
        }
        report.sun.used += problem.sun.len();

        let (est, solve) =
            solve_window(&problem, &cfg.solver).map_err(|source| PipelineError::Solver { window: b, source })?;
        report.windows += 1;
        report.solver_iterations += solve.iterations;
        report.unconverged_windows += usize::from(!solve.converged);
        if solve.dropped_observations > 0 {
            log::warn!("window {b}: {} observations fell behind the camera", solve.dropped_observations);
        }
        report.dropped_observations += solve.dropped_observations;

        for i in 1..n {
            let f = b + i;
            if f < committed.len() {
                continue;
            }
            let mut pose = est.poses[i].compose(&t_bw);
            let mut yaw = yaw_bias;
            if yaw_noise > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_YAW, f as u64));
                let z: f64 = StandardNormal.sample(&mut rng);
                yaw += yaw_noise * z;
            }
            if yaw != 0.0 {
                pose = Pose::from_rotation(Rotation::rot_y(yaw)).compose(&pose);
            }
            committed.push(pose);
        }
    }
    debug_assert!(report.sun.balanced());

    Ok(RunOutput {
        trajectory: Trajectory {
            poses: committed,
            timestamps: (0..frame_count).map(|f| cfg.timestamp(f)).collect(),
        },
        report,
    })
}

/// Window problem with landmarks re-triangulated in the base frame.
///
/// A track contributes its first run of consecutive window frames in which
/// every step is a RANSAC inlier for that frame pair.
fn build_window(
    b: usize,
    n: usize,
    tracks: &TrackTable,
    motions: &[InterframeEstimate],
    guess: &[Pose],
    k: &StereoIntrinsics,
    obs_cov: &Matrix3<f64>,
) -> WindowProblem {
    let mut per_track: BTreeMap<LandmarkId, Vec<(usize, camera::StereoObservation)>> = BTreeMap::new();
    for i in 0..n {
        for (id, y) in tracks.frame(b + i) {
            per_track.entry(*id).or_default().push((i, *y));
        }
    }
    let is_inlier = |i: usize, id: &LandmarkId| motions[b + i - 1].inliers.binary_search(id).is_ok();

    let mut landmarks = Vec::new();
    let mut landmark_ids = Vec::new();
    let mut observations = Vec::new();
    for (id, seq) in per_track {
        let mut start = 0;
        while start < seq.len() {
            let mut end = start + 1;
            while end < seq.len() && seq[end].0 == seq[end - 1].0 + 1 && is_inlier(seq[end].0, &id) {
                end += 1;
            }
            if end - start >= 2 {
                break;
            }
            start = end;
        }
        if start >= seq.len() {
            continue;
        }
        let mut end = start + 1;
        while end < seq.len() && seq[end].0 == seq[end - 1].0 + 1 && is_inlier(seq[end].0, &id) {
            end += 1;
        }
        let (i0, y0) = seq[start];
        let Ok(p_cam) = camera::triangulate(k, &y0) else {
            continue;
        };
        let j = landmarks.len();
        landmarks.push(guess[i0].inverse().transform_point(&p_cam));
        landmark_ids.push(id);
        for (i, y) in &seq[start..end] {
            observations.push(WindowObservation {
                pose: *i,
                landmark: j,
                obs: y.with_covariance(*obs_cov),
            });
        }
    }
    WindowProblem {
        window_index: b,
        intrinsics: *k,
        poses: guess.to_vec(),
        landmarks,
        landmark_ids,
        observations,
        sun: Vec::new(),
        t_bw: Pose::identity(),
        s_w: UnitVec3::new_unchecked(Vector3::z()),
    }
}
