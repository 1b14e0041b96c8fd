//! Rectified stereo pinhole model.
//!
//! Camera frame axes: z forward, x right, y down. A point `p = (x, y, z)`
//! maps to left-image pixel `(u, v)` and disparity `d`:
//!
//! ```text
//! u = fu * x / z + cu
//! v = fv * y / z + cv
//! d = fu * baseline / z
//! ```

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum depth accepted by [`project`] (meters).
pub const DEFAULT_EPSILON_Z: f64 = 1e-6;
/// Minimum disparity accepted by [`triangulate`] (pixels).
pub const DEFAULT_MIN_DISPARITY: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("disparity {d} is below the minimum; depth is effectively infinite")]
    DisparityTooSmall { d: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("observation covariance is not symmetric positive definite")]
    InvalidCovariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StereoIntrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    /// Stereo baseline in meters.
    pub baseline: f64,
    pub width: u32,
    pub height: u32,
}

impl StereoIntrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        let finite = [self.fu, self.fv, self.cu, self.cv, self.baseline]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(CameraError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fu <= 0.0 || self.fv <= 0.0 || self.baseline <= 0.0 {
            return Err(CameraError::InvalidIntrinsics(
                "focal lengths and baseline must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::InvalidIntrinsics(
                "image size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Roughly the KITTI rectified color camera pair.
    pub fn kitti_like() -> Self {
        Self {
            fu: 718.856,
            fv: 718.856,
            cu: 607.1928,
            cv: 185.2157,
            baseline: 0.537,
            width: 1241,
            height: 376,
        }
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < f64::from(self.width) && v < f64::from(self.height)
    }
}

/// A `(u, v, d)` measurement with its 3x3 covariance (pixels^2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoObservation {
    pub u: f64,
    pub v: f64,
    pub d: f64,
    pub covariance: Matrix3<f64>,
}

impl StereoObservation {
    /// Observation with unit pixel covariance.
    pub fn new(u: f64, v: f64, d: f64) -> Self {
        Self {
            u,
            v,
            d,
            covariance: Matrix3::identity(),
        }
    }

    pub fn with_covariance(mut self, covariance: Matrix3<f64>) -> Self {
        self.covariance = covariance;
        self
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, self.d)
    }

    pub fn from_vector(y: &Vector3<f64>) -> Self {
        Self::new(y.x, y.y, y.z)
    }
}

pub fn project(k: &StereoIntrinsics, p_cam: &Vector3<f64>) -> Result<StereoObservation, CameraError> {
    project_with_epsilon(k, p_cam, DEFAULT_EPSILON_Z)
}

pub fn project_with_epsilon(
    k: &StereoIntrinsics,
    p_cam: &Vector3<f64>,
    epsilon_z: f64,
) -> Result<StereoObservation, CameraError> {
    let z = p_cam.z;
    if !(z > epsilon_z) {
        return Err(CameraError::BehindCamera { z });
    }
    Ok(StereoObservation::new(
        k.fu * p_cam.x / z + k.cu,
        k.fv * p_cam.y / z + k.cv,
        k.fu * k.baseline / z,
    ))
}

pub fn triangulate(k: &StereoIntrinsics, y: &StereoObservation) -> Result<Vector3<f64>, CameraError> {
    triangulate_with_min_disparity(k, y, DEFAULT_MIN_DISPARITY)
}

pub fn triangulate_with_min_disparity(
    k: &StereoIntrinsics,
    y: &StereoObservation,
    d_min: f64,
) -> Result<Vector3<f64>, CameraError> {
    if !(y.d > d_min) {
        return Err(CameraError::DisparityTooSmall { d: y.d });
    }
    let z = k.fu * k.baseline / y.d;
    Ok(Vector3::new(
        (y.u - k.cu) * z / k.fu,
        (y.v - k.cv) * z / k.fv,
        z,
    ))
}

/// Analytic derivative of `(u, v, d)` with respect to the camera-frame point.
pub fn project_jacobian(k: &StereoIntrinsics, p_cam: &Vector3<f64>) -> Result<Matrix3<f64>, CameraError> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    if !(z > DEFAULT_EPSILON_Z) {
        return Err(CameraError::BehindCamera { z });
    }
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    Ok(Matrix3::new(
        k.fu * iz,
        0.0,
        -k.fu * x * iz2,
        0.0,
        k.fv * iz,
        -k.fv * y * iz2,
        0.0,
        0.0,
        -k.fu * k.baseline * iz2,
    ))
}
