//! Keypoint tracks: the in-memory table, a synthetic scene generator, and
//! the plain-text track and sun-detection file formats.
//!
//! Track file, one observation per line:
//!
//! ```text
//! # frame_id landmark_id u v d
//! 0 17 402.25 188.5 31.75
//! ```
//!
//! Sun detection file, one camera-frame measurement per line with a
//! diagonal covariance:
//!
//! ```text
//! # frame_id sx sy sz r11 r22 r33
//! 5 0.0 0.0 1.0 0.01 1000000 0.01
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{self, StereoIntrinsics, StereoObservation};
use crate::geometry::{Pose, Rotation, UnitVec3};
use crate::sun::{SunMeasurement, SunSource};

pub type LandmarkId = u64;

/// Maximum deviation from unit norm accepted for a sun detection vector.
pub const SUN_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("frame {frame} is out of range for a table of {frame_count} frames")]
    FrameOutOfRange { frame: usize, frame_count: usize },
    #[error("landmark {landmark} already observed in frame {frame}")]
    DuplicateObservation { landmark: LandmarkId, frame: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: sun vector norm {norm} is not within {SUN_NORM_TOLERANCE} of 1")]
    NonUnitSun { line: usize, norm: f64 },
    #[error("infeasible synthetic scene: {0}")]
    InfeasibleScene(String),
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ground truth carried by synthetic tables.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// World-to-camera transforms `T_{k,w}`, one per frame.
    pub poses: Vec<Pose>,
    /// Landmark positions in the world (ENU) frame.
    pub landmarks: BTreeMap<LandmarkId, Vector3<f64>>,
    /// Tracks whose association switches to another landmark after their first frame.
    pub outliers: BTreeSet<LandmarkId>,
    pub sun_direction: Option<UnitVec3>,
}

/// Landmark-indexed keypoint tracks over a fixed number of frames.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrackTable {
    frame_count: usize,
    tracks: BTreeMap<LandmarkId, BTreeMap<usize, StereoObservation>>,
    by_frame: Vec<BTreeMap<LandmarkId, StereoObservation>>,
    pub ground_truth: Option<GroundTruth>,
}

impl TrackTable {
    pub fn new(frame_count: usize) -> Self {
        Self {
            frame_count,
            tracks: BTreeMap::new(),
            by_frame: vec![BTreeMap::new(); frame_count],
            ground_truth: None,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn landmark_count(&self) -> usize {
        self.tracks.len()
    }

    pub fn observation_count(&self) -> usize {
        self.by_frame.iter().map(BTreeMap::len).sum()
    }

    pub fn insert(
        &mut self,
        frame: usize,
        landmark: LandmarkId,
        obs: StereoObservation,
    ) -> Result<(), TrackError> {
        if frame >= self.frame_count {
            return Err(TrackError::FrameOutOfRange {
                frame,
                frame_count: self.frame_count,
            });
        }
        let track = self.tracks.entry(landmark).or_default();
        if track.contains_key(&frame) {
            return Err(TrackError::DuplicateObservation { landmark, frame });
        }
        track.insert(frame, obs);
        self.by_frame[frame].insert(landmark, obs);
        Ok(())
    }

    pub fn tracks(&self) -> impl Iterator<Item = (LandmarkId, &BTreeMap<usize, StereoObservation>)> {
        self.tracks.iter().map(|(id, t)| (*id, t))
    }

    pub fn track(&self, landmark: LandmarkId) -> Option<&BTreeMap<usize, StereoObservation>> {
        self.tracks.get(&landmark)
    }

    pub fn frame(&self, frame: usize) -> &BTreeMap<LandmarkId, StereoObservation> {
        &self.by_frame[frame]
    }

    pub fn observation(&self, landmark: LandmarkId, frame: usize) -> Option<&StereoObservation> {
        self.by_frame.get(frame).and_then(|f| f.get(&landmark))
    }

    /// Tracks observed in both frames, sorted by landmark id.
    pub fn common_tracks(
        &self,
        a: usize,
        b: usize,
    ) -> Vec<(LandmarkId, StereoObservation, StereoObservation)> {
        let fb = &self.by_frame[b];
        self.by_frame[a]
            .iter()
            .filter_map(|(id, ya)| fb.get(id).map(|yb| (*id, *ya, *yb)))
            .collect()
    }

    /// Replaces every observation covariance.
    pub fn set_covariance(&mut self, covariance: Matrix3<f64>) {
        for track in self.tracks.values_mut() {
            for obs in track.values_mut() {
                obs.covariance = covariance;
            }
        }
        for frame in &mut self.by_frame {
            for obs in frame.values_mut() {
                obs.covariance = covariance;
            }
        }
    }
}

fn parse_field<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T, TrackError> {
    tok.parse().map_err(|_| TrackError::Parse {
        line,
        message: format!("cannot parse {what} from {tok:?}"),
    })
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let body = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = body.split_whitespace().collect();
        (!toks.is_empty()).then_some((i + 1, toks))
    })
}

/// Parses the track format. Observations get `covariance`.
pub fn parse_tracks(text: &str, covariance: Matrix3<f64>) -> Result<TrackTable, TrackError> {
    let mut rows = Vec::new();
    for (line, toks) in content_lines(text) {
        if toks.len() != 5 {
            return Err(TrackError::Parse {
                line,
                message: format!("expected 5 fields (frame landmark u v d), found {}", toks.len()),
            });
        }
        let frame: usize = parse_field(toks[0], line, "frame id")?;
        let landmark: LandmarkId = parse_field(toks[1], line, "landmark id")?;
        let u: f64 = parse_field(toks[2], line, "u")?;
        let v: f64 = parse_field(toks[3], line, "v")?;
        let d: f64 = parse_field(toks[4], line, "d")?;
        if !(u.is_finite() && v.is_finite() && d.is_finite()) {
            return Err(TrackError::Parse {
                line,
                message: "non-finite measurement".into(),
            });
        }
        rows.push((line, frame, landmark, u, v, d));
    }
    let frame_count = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let mut table = TrackTable::new(frame_count);
    for (line, frame, landmark, u, v, d) in rows {
        table
            .insert(frame, landmark, StereoObservation::new(u, v, d).with_covariance(covariance))
            .map_err(|e| TrackError::Parse {
                line,
                message: e.to_string(),
            })?;
    }
    Ok(table)
}

pub fn load_tracks(path: impl AsRef<Path>, covariance: Matrix3<f64>) -> Result<TrackTable, TrackError> {
    parse_tracks(&fs::read_to_string(path)?, covariance)
}

pub fn write_tracks<W: Write>(table: &TrackTable, mut out: W) -> io::Result<()> {
    writeln!(out, "# frame_id landmark_id u v d")?;
    for (frame, obs) in table.by_frame.iter().enumerate() {
        for (id, y) in obs {
            writeln!(out, "{frame} {id} {} {} {}", y.u, y.v, y.d)?;
        }
    }
    Ok(())
}

pub fn save_tracks(table: &TrackTable, path: impl AsRef<Path>) -> io::Result<()> {
    let mut buf = Vec::new();
    write_tracks(table, &mut buf)?;
    fs::write(path, buf)
}

pub fn parse_sun_detections(text: &str) -> Result<Vec<(usize, SunMeasurement)>, TrackError> {
    let mut out = Vec::new();
    for (line, toks) in content_lines(text) {
        if toks.len() != 7 {
            return Err(TrackError::Parse {
                line,
                message: format!(
                    "expected 7 fields (frame sx sy sz r11 r22 r33), found {}",
                    toks.len()
                ),
            });
        }
        let frame: usize = parse_field(toks[0], line, "frame id")?;
        let mut vals = [0.0f64; 6];
        for (slot, tok) in vals.iter_mut().zip(&toks[1..]) {
            *slot = parse_field(tok, line, "number")?;
        }
        let v = Vector3::new(vals[0], vals[1], vals[2]);
        let norm = v.norm();
        if !((norm - 1.0).abs() <= SUN_NORM_TOLERANCE) {
            return Err(TrackError::NonUnitSun { line, norm });
        }
        if vals[3..].iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(TrackError::Parse {
                line,
                message: "covariance diagonal must be positive".into(),
            });
        }
        let measurement = SunMeasurement {
            direction: UnitVec3::new_unchecked(v / norm),
            covariance: Matrix3::from_diagonal(&Vector3::new(vals[3], vals[4], vals[5])),
            frame,
            source: SunSource::File,
        };
        out.push((frame, measurement));
    }
    Ok(out)
}

pub fn load_sun_detections(path: impl AsRef<Path>) -> Result<Vec<(usize, SunMeasurement)>, TrackError> {
    parse_sun_detections(&fs::read_to_string(path)?)
}

/// Writes detections using only the covariance diagonal.
pub fn write_sun_detections<W: Write>(detections: &[SunMeasurement], mut out: W) -> io::Result<()> {
    writeln!(out, "# frame_id sx sy sz r11 r22 r33")?;
    for m in detections {
        let s = m.direction.as_vector();
        let c = &m.covariance;
        writeln!(
            out,
            "{} {} {} {} {} {} {}",
            m.frame,
            s.x,
            s.y,
            s.z,
            c[(0, 0)],
            c[(1, 1)],
            c[(2, 2)]
        )?;
    }
    Ok(())
}

/// Constant-curvature pieces of a planar drive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcSegment {
    pub frames: usize,
    /// Total heading change over the segment, degrees, positive turns right (clockwise seen from above).
    #[serde(default)]
    pub turn_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Chained arcs; `step` is the distance travelled per frame.
    Arcs {
        step: f64,
        #[serde(default)]
        start_heading_deg: f64,
        segments: Vec<ArcSegment>,
    },
    /// One East/North position per frame; heading follows the direction of travel.
    Waypoints { points: Vec<[f64; 2]> },
}

impl TrajectorySpec {
    pub fn frame_count(&self) -> usize {
        match self {
            TrajectorySpec::Arcs { segments, .. } => 1 + segments.iter().map(|s| s.frames).sum::<usize>(),
            TrajectorySpec::Waypoints { points } => points.len(),
        }
    }

    /// `(east, north, heading)` per frame, heading as a compass angle in radians.
    pub fn planar_states(&self) -> Vec<(f64, f64, f64)> {
        match self {
            TrajectorySpec::Arcs {
                step,
                start_heading_deg,
                segments,
            } => {
                let mut heading = start_heading_deg.to_radians();
                let (mut e, mut n) = (0.0, 0.0);
                let mut out = vec![(e, n, heading)];
                for seg in segments {
                    if seg.frames == 0 {
                        continue;
                    }
                    let dh = seg.turn_deg.to_radians() / seg.frames as f64;
                    for _ in 0..seg.frames {
                        let mid = heading + 0.5 * dh;
                        e += step * mid.sin();
                        n += step * mid.cos();
                        heading += dh;
                        out.push((e, n, heading));
                    }
                }
                out
            }
            TrajectorySpec::Waypoints { points } => {
                let m = points.len();
                (0..m)
                    .map(|i| {
                        let (a, b) = if i + 1 < m {
                            (points[i], points[i + 1])
                        } else if m >= 2 {
                            (points[m - 2], points[m - 1])
                        } else {
                            ([0.0, 0.0], [0.0, 1.0])
                        };
                        let heading = (b[0] - a[0]).atan2(b[1] - a[1]);
                        (points[i][0], points[i][1], heading)
                    })
                    .collect()
            }
        }
    }
}

/// World-to-camera transform for a level camera at `position` looking along
/// compass heading `heading` (x right, y down, z forward).
pub fn level_camera_pose(position: Vector3<f64>, heading: f64) -> Pose {
    let (s, c) = heading.sin_cos();
    let camera_to_world = Matrix3::new(
        c, 0.0, s, //
        -s, 0.0, c, //
        0.0, -1.0, 0.0,
    );
    let rotation = Rotation::from_matrix(camera_to_world).expect("level camera rotation");
    Pose::new(rotation, position).inverse()
}

fn default_lifetime() -> [usize; 2] {
    [5, 20]
}

fn default_camera_height() -> f64 {
    1.65
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub trajectory: TrajectorySpec,
    pub landmark_count: usize,
    /// Depth range `[min, max]` (meters) at which landmarks are seeded.
    pub depth_range: [f64; 2],
    #[serde(default)]
    pub pixel_noise_sigma: f64,
    #[serde(default)]
    pub outlier_fraction: f64,
    /// Sun direction in ENU; recorded in the ground truth when present.
    #[serde(default)]
    pub sun_direction: Option<[f64; 3]>,
    /// Track lifetime range `[min, max]` in frames, sampled uniformly.
    #[serde(default = "default_lifetime")]
    pub track_lifetime: [usize; 2],
    #[serde(default = "default_camera_height")]
    pub camera_height: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticWorldConfig {
    fn validate(&self) -> Result<(), TrackError> {
        let bad = |m: &str| Err(TrackError::InvalidConfig(m.to_string()));
        if self.trajectory.frame_count() < 2 {
            return bad("trajectory must have at least 2 frames");
        }
        if self.landmark_count < 10 {
            return bad("landmark count must be at least 10");
        }
        if !(self.pixel_noise_sigma >= 0.0) {
            return bad("pixel noise sigma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier fraction must be in [0, 1)");
        }
        let [dmin, dmax] = self.depth_range;
        if !(dmin > 0.5 && dmax >= dmin) {
            return bad("depth range must satisfy 0.5 < min <= max");
        }
        let [lmin, lmax] = self.track_lifetime;
        if !(lmin >= 2 && lmax >= lmin) {
            return bad("track lifetime must satisfy 2 <= min <= max");
        }
        Ok(())
    }
}

const MIN_VISIBLE_DEPTH: f64 = 0.5;

fn visible(k: &StereoIntrinsics, pose: &Pose, point: &Vector3<f64>) -> Option<StereoObservation> {
    let p = pose.transform_point(point);
    if p.z <= MIN_VISIBLE_DEPTH {
        return None;
    }
    let y = camera::project(k, &p).ok()?;
    k.in_bounds(y.u, y.v).then_some(y)
}

/// Generates tracks from a random scene seeded along the trajectory.
///
/// Each landmark gets a lifetime window placed uniformly over the sequence
/// (clipped at the first frame), is placed at a random pixel and depth in
/// the window's first frame, and is observed from there until it leaves the
/// image or the window ends.
/// Outlier tracks keep their first observation and then follow the
/// projections of a different landmark.
pub fn generate_synthetic(cfg: &SyntheticWorldConfig, k: &StereoIntrinsics) -> Result<TrackTable, TrackError> {
    cfg.validate()?;
    k.validate()
        .map_err(|e| TrackError::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.pixel_noise_sigma).expect("sigma validated");

    let poses: Vec<Pose> = cfg
        .trajectory
        .planar_states()
        .into_iter()
        .map(|(e, n, h)| level_camera_pose(Vector3::new(e, n, cfg.camera_height), h))
        .collect();
    let frame_count = poses.len();

    let mut landmarks = BTreeMap::new();
    // Noiseless projections per landmark, contiguous from the seed frame.
    let mut clean: BTreeMap<LandmarkId, Vec<(usize, StereoObservation)>> = BTreeMap::new();
    for id in 0..cfg.landmark_count as LandmarkId {
        let lifetime = rng.random_range(cfg.track_lifetime[0]..=cfg.track_lifetime[1]);
        // Windows may start before the first frame so early frames are as dense as later ones.
        let start = rng.random_range(1 - lifetime as i64..frame_count as i64 - 1);
        let seed_frame = start.max(0) as usize;
        let lifetime = (start + lifetime as i64) as usize - seed_frame;
        let u = rng.random_range(0.0..f64::from(k.width));
        let v = rng.random_range(0.0..f64::from(k.height));
        let z = if cfg.depth_range[1] > cfg.depth_range[0] {
            rng.random_range(cfg.depth_range[0]..cfg.depth_range[1])
        } else {
            cfg.depth_range[0]
        };
        let p_cam = Vector3::new((u - k.cu) * z / k.fu, (v - k.cv) * z / k.fv, z);
        let world = poses[seed_frame].inverse().transform_point(&p_cam);
        landmarks.insert(id, world);
        let mut obs = Vec::new();
        for (f, pose) in poses.iter().enumerate().skip(seed_frame).take(lifetime) {
            match visible(k, pose, &world) {
                Some(y) => obs.push((f, y)),
                None => break,
            }
        }
        clean.insert(id, obs);
    }

    let n_outliers = (cfg.outlier_fraction * cfg.landmark_count as f64).round() as usize;
    let mut ids: Vec<LandmarkId> = landmarks.keys().copied().collect();
    // Partial Fisher-Yates for a deterministic outlier subset.
    for i in 0..n_outliers.min(ids.len()) {
        let j = rng.random_range(i..ids.len());
        ids.swap(i, j);
    }
    let candidates: BTreeSet<LandmarkId> = ids[..n_outliers.min(ids.len())].iter().copied().collect();

    let mut tracks = clean.clone();
    let mut outliers = BTreeSet::new();
    for &id in &candidates {
        let Some(&(first, first_obs)) = clean[&id].first() else {
            continue;
        };
        if first + 1 >= frame_count {
            continue;
        }
        let partners: Vec<LandmarkId> = clean
            .iter()
            .filter(|(pid, obs)| {
                **pid != id && !candidates.contains(pid) && obs.iter().any(|(f, _)| *f == first + 1)
            })
            .map(|(pid, _)| *pid)
            .collect();
        if partners.is_empty() {
            continue;
        }
        let partner = partners[rng.random_range(0..partners.len())];
        let span = clean[&id].len().max(2);
        let mut obs = vec![(first, first_obs)];
        for (f, y) in clean[&partner].iter().filter(|(f, _)| *f > first).take(span - 1) {
            if *f != obs.last().map(|o| o.0 + 1).unwrap_or(0) {
                break;
            }
            obs.push((*f, *y));
        }
        tracks.insert(id, obs);
        outliers.insert(id);
    }

    let mut table = TrackTable::new(frame_count);
    for (id, obs) in &tracks {
        for (f, y) in obs {
            let noisy = if cfg.pixel_noise_sigma > 0.0 {
                StereoObservation::new(
                    y.u + noise.sample(&mut rng),
                    y.v + noise.sample(&mut rng),
                    y.d + noise.sample(&mut rng),
                )
            } else {
                *y
            };
            if noisy.d <= camera::DEFAULT_MIN_DISPARITY {
                continue;
            }
            table.insert(*f, *id, noisy)?;
        }
    }
    if let Some(empty) = (0..frame_count).find(|f| table.frame(*f).is_empty()) {
        return Err(TrackError::InfeasibleScene(format!(
            "no landmark is visible in frame {empty}"
        )));
    }
    let sun_direction = match cfg.sun_direction {
        Some(s) => Some(
            UnitVec3::new_normalize(Vector3::from(s))
                .map_err(|_| TrackError::InvalidConfig("sun direction is zero".into()))?,
        ),
        None => None,
    };
    table.ground_truth = Some(GroundTruth {
        poses,
        landmarks,
        outliers,
        sun_direction,
    });
    Ok(table)
}
