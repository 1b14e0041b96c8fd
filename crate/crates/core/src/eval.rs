//! Trajectory metrics and the trajectory interchange format.
//!
//! Positions are camera centres in the world (ENU) frame. No alignment is
//! applied before differencing; both trajectories share the same anchor.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{Pose, Rotation};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory alignment: {0}")]
    Alignment(String),
    #[error("path length must be positive")]
    ZeroPathLength,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// World-frame poses with timestamps, one per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// World-to-camera transforms `T_{k,w}`.
    pub poses: Vec<Pose>,
    /// Seconds.
    pub timestamps: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(Pose::center).collect()
    }

    /// Sum of chord lengths between consecutive camera centres.
    pub fn path_length(&self) -> f64 {
        self.positions().windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// One line per frame: `frame t x y z qw qx qy qz`, camera-to-world.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# frame t x y z qw qx qy qz\n");
        for (k, (pose, t)) in self.poses.iter().zip(&self.timestamps).enumerate() {
            let c = pose.center();
            let q = pose.rotation.inverse().to_quaternion();
            writeln!(s, "{k} {t} {} {} {} {} {} {} {}", c.x, c.y, c.z, q.w, q.i, q.j, q.k)
                .expect("write to string");
        }
        s
    }

    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(self.to_text().as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        std::fs::write(path, self.to_text())
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut poses = Vec::new();
        let mut timestamps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| EvalError::Parse { line, message };
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields.len() != 9 {
                return Err(err(format!("expected 9 fields, found {}", fields.len())));
            }
            let frame: usize = fields[0].parse().map_err(|_| err("bad frame index".into()))?;
            if frame != poses.len() {
                return Err(err(format!("expected frame {}, found {frame}", poses.len())));
            }
            let v: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad number {f:?}"))))
                .collect::<Result<_, _>>()?;
            let q = Quaternion::new(v[4], v[5], v[6], v[7]);
            if !((q.norm() - 1.0).abs() < 1e-6) {
                return Err(err("quaternion is not unit".into()));
            }
            let camera_to_world = Rotation::from_quaternion(&UnitQuaternion::new_normalize(q));
            let center = Vector3::new(v[1], v[2], v[3]);
            poses.push(Pose::new(camera_to_world, center).inverse());
            timestamps.push(v[0]);
        }
        Ok(Self { poses, timestamps })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn check_aligned(est: &Trajectory, truth: &Trajectory) -> Result<(), EvalError> {
    if est.len() != truth.len() || est.timestamps.len() != est.len() || truth.timestamps.len() != truth.len() {
        return Err(EvalError::Alignment(format!(
            "frame counts differ ({} vs {})",
            est.len(),
            truth.len()
        )));
    }
    if est.is_empty() {
        return Err(EvalError::Alignment("trajectories are empty".into()));
    }
    if let Some(k) = (0..est.len()).find(|&k| (est.timestamps[k] - truth.timestamps[k]).abs() > 1e-6) {
        return Err(EvalError::Alignment(format!("timestamps differ at frame {k}")));
    }
    Ok(())
}

fn en(v: &Vector3<f64>) -> f64 {
    v.x.hypot(v.y)
}

/// `(translational, translational EN-plane, rotational)` ARMSE.
pub fn armse(est: &Trajectory, truth: &Trajectory) -> Result<(f64, f64, f64), EvalError> {
    check_aligned(est, truth)?;
    let n = est.len() as f64;
    let (mut t, mut t_en, mut r) = (0.0, 0.0, 0.0);
    for (a, b) in est.poses.iter().zip(&truth.poses) {
        let e = a.center() - b.center();
        t += e.norm_squared();
        t_en += en(&e).powi(2);
        r += a.rotation.compose(&b.rotation.inverse()).angle().powi(2);
    }
    Ok(((t / n).sqrt(), (t_en / n).sqrt(), (r / n).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FinalDrift {
    pub meters: f64,
    pub percent: f64,
    pub en_meters: f64,
    pub en_percent: f64,
}

/// Drift from a final-frame position error and the ground-truth path length.
pub fn drift_from_error(error: &Vector3<f64>, path_length: f64) -> Result<FinalDrift, EvalError> {
    if !(path_length > 0.0) {
        return Err(EvalError::ZeroPathLength);
    }
    let meters = error.norm();
    let en_meters = en(error);
    Ok(FinalDrift {
        meters,
        percent: 100.0 * meters / path_length,
        en_meters,
        en_percent: 100.0 * en_meters / path_length,
    })
}

pub fn final_drift(est: &Trajectory, truth: &Trajectory, path_length: f64) -> Result<FinalDrift, EvalError> {
    check_aligned(est, truth)?;
    let last = est.len() - 1;
    drift_from_error(&(est.poses[last].center() - truth.poses[last].center()), path_length)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrajectoryMetrics {
    pub trans_armse: f64,
    pub trans_armse_en: f64,
    /// Radians.
    pub rot_armse: f64,
    pub drift: FinalDrift,
}

impl TrajectoryMetrics {
    pub fn compute(est: &Trajectory, truth: &Trajectory) -> Result<Self, EvalError> {
        let (trans_armse, trans_armse_en, rot_armse) = armse(est, truth)?;
        let drift = final_drift(est, truth, truth.path_length())?;
        Ok(Self {
            trans_armse,
            trans_armse_en,
            rot_armse,
            drift,
        })
    }
}
