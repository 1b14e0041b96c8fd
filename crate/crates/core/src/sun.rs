//! Sun direction: ephemeris, prediction through the pose chain, simulated
//! and file-backed measurements, outlier gating, and the pose-informed prior
//! that resolves the two-fold shadow ambiguity.
//!
//! Camera-frame azimuth/zenith use the camera's own level frame: azimuth is
//! measured from the optical axis (z) towards the right (x), zenith from
//! camera up (-y).

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    azzen_from_unitvec, unitvec_from_azzen, wrap_pi, AzZen, Pose, Rotation, UnitVec3,
};

/// Cosine-distance gate threshold.
pub const DEFAULT_COS_GATE: f64 = 0.3;
/// Camera-frame vertical (y) component gate threshold.
pub const DEFAULT_Y_GATE: f64 = 0.3;
/// Variance assigned to unobserved components of azimuth-only measurements.
pub const AZIMUTH_ONLY_MASK_VARIANCE: f64 = 1e6;
/// Prior standard deviations: three sigma spans 360 degrees of azimuth and 90 degrees of zenith.
pub const PRIOR_SIGMA_AZIMUTH_DEG: f64 = 60.0;
pub const PRIOR_SIGMA_ZENITH_DEG: f64 = 15.0;

const MIN_COVARIANCE: f64 = 1e-18;
// 1950-01-01T00:00:00Z and 2050-01-01T00:00:00Z
const EPHEMERIS_MIN_UNIX: f64 = -631_152_000.0;
const EPHEMERIS_MAX_UNIX: f64 = 2_524_608_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SunError {
    #[error("timestamp {0} is outside the supported ephemeris range (1950-2050)")]
    TimestampOutOfRange(f64),
    #[error("latitude/longitude ({lat}, {lon}) out of range")]
    LocationOutOfRange { lat: f64, lon: f64 },
    #[error("sun measurement norm {0} is not within 1e-3 of 1")]
    NonUnitMeasurement(f64),
    #[error("sun measurement covariance is not symmetric positive definite")]
    InvalidCovariance,
    #[error("invalid sun parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SunSource {
    Oracle,
    BimodalSim,
    File,
}

/// A camera-frame sun direction with its covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SunMeasurement {
    pub direction: UnitVec3,
    pub covariance: Matrix3<f64>,
    pub frame: usize,
    pub source: SunSource,
}

impl SunMeasurement {
    pub fn validate(&self) -> Result<(), SunError> {
        let n = self.direction.as_vector().norm();
        if !((n - 1.0).abs() <= 1e-3) {
            return Err(SunError::NonUnitMeasurement(n));
        }
        if !is_spd(&self.covariance) {
            return Err(SunError::InvalidCovariance);
        }
        Ok(())
    }
}

pub(crate) fn is_spd(m: &Matrix3<f64>) -> bool {
    let sym = (m - m.transpose()).abs().max() <= 1e-9 * m.abs().max().max(1.0);
    sym && m.iter().all(|x| x.is_finite()) && m.cholesky().is_some()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EphemerisQuery {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    /// UTC, seconds since the Unix epoch.
    pub timestamp: f64,
}

/// Apparent solar position (no atmospheric refraction) as compass azimuth and zenith.
pub fn solar_azzen(q: &EphemerisQuery) -> Result<AzZen, SunError> {
    if !(q.latitude_deg.abs() <= 90.0 && q.longitude_deg.abs() <= 180.0) {
        return Err(SunError::LocationOutOfRange {
            lat: q.latitude_deg,
            lon: q.longitude_deg,
        });
    }
    if !(EPHEMERIS_MIN_UNIX..EPHEMERIS_MAX_UNIX).contains(&q.timestamp) {
        return Err(SunError::TimestampOutOfRange(q.timestamp));
    }
    let jd = q.timestamp / 86_400.0 + 2_440_587.5;
    let t = (jd - 2_451_545.0) / 36_525.0;

    let mean_long = (280.46646 + t * (36_000.76983 + t * 0.000_303_2)).rem_euclid(360.0);
    let mean_anom = 357.52911 + t * (35_999.05029 - 0.000_153_7 * t);
    let ecc = 0.016_708_634 - t * (0.000_042_037 + 0.000_000_126_7 * t);
    let m = mean_anom.to_radians();
    let center = m.sin() * (1.914_602 - t * (0.004_817 + 0.000_014 * t))
        + (2.0 * m).sin() * (0.019_993 - 0.000_101 * t)
        + (3.0 * m).sin() * 0.000_289;
    let true_long = mean_long + center;
    let node = (125.04 - 1934.136 * t).to_radians();
    let app_long = (true_long - 0.00569 - 0.00478 * node.sin()).to_radians();
    let mean_obliq =
        23.0 + (26.0 + (21.448 - t * (46.815 + t * (0.000_59 - t * 0.001_813))) / 60.0) / 60.0;
    let obliq = (mean_obliq + 0.00256 * node.cos()).to_radians();
    let decl = (obliq.sin() * app_long.sin()).asin();

    let y = (obliq / 2.0).tan().powi(2);
    let l0 = mean_long.to_radians();
    let eq_time_min = 4.0
        * (y * (2.0 * l0).sin() - 2.0 * ecc * m.sin() + 4.0 * ecc * y * m.sin() * (2.0 * l0).cos()
            - 0.5 * y * y * (4.0 * l0).sin()
            - 1.25 * ecc * ecc * (2.0 * m).sin())
        .to_degrees();

    let utc_minutes = q.timestamp.rem_euclid(86_400.0) / 60.0;
    let solar_minutes = (utc_minutes + eq_time_min + 4.0 * q.longitude_deg).rem_euclid(1440.0);
    let hour_angle = (solar_minutes / 4.0 - 180.0).to_radians();

    let lat = q.latitude_deg.to_radians();
    let cos_zen = (lat.sin() * decl.sin() + lat.cos() * decl.cos() * hour_angle.cos()).clamp(-1.0, 1.0);
    let zenith = cos_zen.acos();
    // Measured from south towards west, then shifted to a compass bearing.
    let az_south = hour_angle
        .sin()
        .atan2(hour_angle.cos() * lat.sin() - decl.tan() * lat.cos());
    Ok(AzZen::new(az_south + PI, zenith))
}

/// Sun direction in the local East-North-Up frame.
pub fn solar_ephemeris(q: &EphemerisQuery) -> Result<UnitVec3, SunError> {
    Ok(unitvec_from_azzen(&solar_azzen(q)?))
}

/// Expresses a world sun direction in camera frame `k`: `R_{k,b} R_{b,w} s_w`.
pub fn predict_sun(t_kb: &Pose, t_bw: &Pose, s_w: &UnitVec3) -> UnitVec3 {
    let s_b = t_bw.rotate_vector(s_w.as_vector());
    UnitVec3::new_unchecked(t_kb.rotate_vector(&s_b))
}

/// Camera-frame direction for a camera-level azimuth/zenith.
pub fn camera_vec_from_azzen(a: &AzZen) -> UnitVec3 {
    let level = unitvec_from_azzen(a).into_inner();
    // level frame (right, forward, up) -> camera (x, y, z) = (right, -up, forward)
    UnitVec3::new_unchecked(Vector3::new(level.x, -level.z, level.y))
}

/// Inverse of [`camera_vec_from_azzen`]; the azimuth is zero when the direction is vertical.
pub fn camera_azzen_from_vec(v: &UnitVec3) -> AzZen {
    let c = v.as_vector();
    let level = UnitVec3::new_unchecked(Vector3::new(c.x, c.z, -c.y));
    azzen_from_unitvec(&level).angles
}

fn sun_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Simulated sun sensor: the true camera-frame direction rotated by a
/// Gaussian angle (std `sigma`, radians) about a random axis perpendicular
/// to it. The covariance is `sigma^2 I`.
pub fn oracle_measurement(
    t_kw_true: &Pose,
    s_w: &UnitVec3,
    sigma: f64,
    frame: usize,
    seed: u64,
) -> Result<SunMeasurement, SunError> {
    if !(sigma >= 0.0) {
        return Err(SunError::InvalidParameter("oracle sigma must be >= 0".into()));
    }
    let truth = t_kw_true.rotate_vector(s_w.as_vector());
    let direction = if sigma == 0.0 {
        truth
    } else {
        let mut rng = sun_rng(seed);
        let raw = Vector3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        let angle: f64 = Normal::new(0.0, sigma).expect("sigma").sample(&mut rng);
        let mut axis = raw - truth * truth.dot(&raw);
        if axis.norm() < 1e-9 {
            axis = truth.cross(&Vector3::x());
            if axis.norm() < 1e-9 {
                axis = truth.cross(&Vector3::y());
            }
        }
        Rotation::from_axis_angle(&axis, angle).rotate(&truth)
    };
    Ok(SunMeasurement {
        direction: UnitVec3::new_normalize(direction).expect("rotated unit vector"),
        covariance: Matrix3::identity() * (sigma * sigma).max(MIN_COVARIANCE),
        frame,
        source: SunSource::Oracle,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BimodalConfig {
    /// Azimuth noise of the correct mode (radians).
    pub sigma_azimuth: f64,
    /// Zenith noise shared by both modes (radians).
    pub sigma_zenith: f64,
    /// Probability that the wrong mode carries the larger weight.
    pub wrong_mode_probability: f64,
    /// Largest ratio between the two weights; the ratio is uniform in `[1, max]`.
    pub max_weight_ratio: f64,
}

impl Default for BimodalConfig {
    fn default() -> Self {
        Self {
            sigma_azimuth: 5f64.to_radians(),
            sigma_zenith: 5f64.to_radians(),
            wrong_mode_probability: 0.5,
            max_weight_ratio: 3.0,
        }
    }
}

/// Two camera-frame candidates 180 degrees apart in azimuth, with likelihood weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BimodalDetection {
    pub candidates: [AzZen; 2],
    pub weights: [f64; 2],
    /// Index of the candidate generated from the true direction.
    pub true_index: usize,
    pub frame: usize,
}

impl BimodalDetection {
    pub fn as_pairs(&self) -> [(AzZen, f64); 2] {
        [
            (self.candidates[0], self.weights[0]),
            (self.candidates[1], self.weights[1]),
        ]
    }
}

/// Simulates the two-fold azimuth ambiguity of a shadow-based detector.
pub fn bimodal_measurement(
    t_kw_true: &Pose,
    s_w: &UnitVec3,
    cfg: &BimodalConfig,
    frame: usize,
    seed: u64,
) -> Result<BimodalDetection, SunError> {
    if !(cfg.sigma_azimuth > 0.0) || !(cfg.sigma_zenith >= 0.0) {
        return Err(SunError::InvalidParameter("bimodal sigmas must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.wrong_mode_probability) || !(cfg.max_weight_ratio >= 1.0) {
        return Err(SunError::InvalidParameter(
            "wrong-mode probability must be in [0, 1] and weight ratio >= 1".into(),
        ));
    }
    let mut rng = sun_rng(seed);
    let truth = camera_azzen_from_vec(&UnitVec3::new_unchecked(
        t_kw_true.rotate_vector(s_w.as_vector()),
    ));
    let n_az: f64 = StandardNormal.sample(&mut rng);
    let n_zen: f64 = StandardNormal.sample(&mut rng);
    let zenith = (truth.zenith + cfg.sigma_zenith * n_zen).clamp(1e-6, PI - 1e-6);
    let good = AzZen::new(truth.azimuth + cfg.sigma_azimuth * n_az, zenith);
    let flipped = AzZen::new(good.azimuth + PI, zenith);

    let ratio = if cfg.max_weight_ratio > 1.0 {
        rng.random_range(1.0..cfg.max_weight_ratio)
    } else {
        1.0
    };
    let high = ratio / (1.0 + ratio);
    let low = 1.0 / (1.0 + ratio);
    let wrong_wins = rng.random_bool(cfg.wrong_mode_probability);
    let (w_good, w_flip) = if wrong_wins { (low, high) } else { (high, low) };
    let swap = rng.random_bool(0.5);
    Ok(if swap {
        BimodalDetection {
            candidates: [flipped, good],
            weights: [w_flip, w_good],
            true_index: 1,
            frame,
        }
    } else {
        BimodalDetection {
            candidates: [good, flipped],
            weights: [w_good, w_flip],
            true_index: 0,
            frame,
        }
    })
}

/// Gaussian prior over camera-frame azimuth and zenith.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SunPrior {
    pub mean: AzZen,
    pub sigma_azimuth: f64,
    pub sigma_zenith: f64,
}

impl SunPrior {
    pub fn new(mean: AzZen) -> Self {
        Self {
            mean,
            sigma_azimuth: PRIOR_SIGMA_AZIMUTH_DEG.to_radians(),
            sigma_zenith: PRIOR_SIGMA_ZENITH_DEG.to_radians(),
        }
    }

    /// Prior centred on the direction predicted from the current pose estimate.
    pub fn from_prediction(predicted: &UnitVec3) -> Self {
        Self::new(camera_azzen_from_vec(predicted))
    }

    pub fn with_sigmas(mut self, sigma_azimuth: f64, sigma_zenith: f64) -> Self {
        self.sigma_azimuth = sigma_azimuth;
        self.sigma_zenith = sigma_zenith;
        self
    }

    /// Unnormalized log density; azimuth differences are wrapped to `[-pi, pi]`.
    pub fn log_density(&self, a: &AzZen) -> f64 {
        let da = wrap_pi(a.azimuth - self.mean.azimuth) / self.sigma_azimuth;
        let dz = (a.zenith - self.mean.zenith) / self.sigma_zenith;
        -0.5 * (da * da + dz * dz)
    }
}

/// Picks the candidate maximizing `weight * prior density`. Ties keep the
/// lower index. Returns `None` for an empty candidate list.
pub fn vo_prior_disambiguate(candidates: &[(AzZen, f64)], prior: &SunPrior) -> Option<(usize, AzZen)> {
    argmax_by(candidates, |(a, w)| w.ln() + prior.log_density(a))
}

/// Picks the candidate with the largest weight (no prior).
pub fn max_likelihood(candidates: &[(AzZen, f64)]) -> Option<(usize, AzZen)> {
    argmax_by(candidates, |(_, w)| *w)
}

fn argmax_by(candidates: &[(AzZen, f64)], score: impl Fn(&(AzZen, f64)) -> f64) -> Option<(usize, AzZen)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = score(c);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| (i, candidates[i].0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateReason {
    /// `1 - s . s_hat` exceeded the cosine threshold.
    CosineDistance(f64),
    /// `|s_y - s_hat_y|` exceeded the vertical threshold.
    VerticalError(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateDecision {
    Accept,
    Reject(GateReason),
}

impl GateDecision {
    pub fn is_accept(&self) -> bool {
        matches!(self, GateDecision::Accept)
    }
}

pub fn gate_measurement(
    measured: &UnitVec3,
    predicted: &UnitVec3,
    cos_thresh: f64,
    y_thresh: f64,
) -> GateDecision {
    let cos_dist = 1.0 - measured.dot(predicted);
    if cos_dist > cos_thresh {
        return GateDecision::Reject(GateReason::CosineDistance(cos_dist));
    }
    let y_err = (measured.as_vector().y - predicted.as_vector().y).abs();
    if y_err > y_thresh {
        return GateDecision::Reject(GateReason::VerticalError(y_err));
    }
    GateDecision::Accept
}

/// Measurement from an azimuth-only detector. The direction is horizontal
/// in the camera frame; the vertical axis and the in-plane radial direction
/// (whose length encodes elevation) carry variance 1e6, so only the
/// azimuth constrains the solution.
pub fn azimuth_only(azimuth: f64, sigma_azimuth: f64, frame: usize) -> Result<SunMeasurement, SunError> {
    if !(sigma_azimuth > 0.0) {
        return Err(SunError::InvalidParameter("azimuth sigma must be positive".into()));
    }
    let (s, c) = azimuth.sin_cos();
    let radial = Vector3::new(s, 0.0, c);
    let tangent = Vector3::new(c, 0.0, -s);
    let vertical = Vector3::y();
    let covariance = tangent * tangent.transpose() * sigma_azimuth * sigma_azimuth
        + (radial * radial.transpose() + vertical * vertical.transpose()) * AZIMUTH_ONLY_MASK_VARIANCE;
    Ok(SunMeasurement {
        direction: UnitVec3::new_unchecked(radial),
        covariance,
        frame,
        source: SunSource::File,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn deg(x: f64) -> f64 {
        x.to_radians()
    }

    #[test]
    fn ephemeris_is_unit_and_matches_reference() {
        // Reference: NREL SPA, geometric (unrefracted) position.
        let q = EphemerisQuery {
            latitude_deg: 49.0,
            longitude_deg: 8.4,
            timestamp: 1_317_384_000.0,
        };
        let v = solar_ephemeris(&q).unwrap();
        assert_relative_eq!(v.as_vector().norm(), 1.0, epsilon = 1e-12);
        let a = solar_azzen(&q).unwrap();
        assert!((a.azimuth.to_degrees() - 193.7208).abs() < 0.2);
        assert!((a.elevation().to_degrees() - 37.3715).abs() < 0.2);
    }

    #[test]
    fn ephemeris_midnight_is_below_horizon() {
        let q = EphemerisQuery {
            latitude_deg: 49.0,
            longitude_deg: 8.4,
            timestamp: 1_317_425_160.0,
        };
        assert!(solar_ephemeris(&q).unwrap().as_vector().z < 0.0);
    }

    #[test]
    fn ephemeris_range_errors() {
        let mut q = EphemerisQuery {
            latitude_deg: 0.0,
            longitude_deg: 0.0,
            timestamp: 3.0e9,
        };
        assert!(matches!(solar_ephemeris(&q), Err(SunError::TimestampOutOfRange(_))));
        q.timestamp = 0.0;
        q.latitude_deg = 91.0;
        assert!(matches!(solar_ephemeris(&q), Err(SunError::LocationOutOfRange { .. })));
    }

    #[test]
    fn predict_identity_chain() {
        let s = UnitVec3::new_normalize(Vector3::new(0.3, 0.4, 0.8)).unwrap();
        let p = predict_sun(&Pose::identity(), &Pose::identity(), &s);
        assert_eq!(p, s);
    }

    #[test]
    fn predict_yawed_camera_shifts_azimuth() {
        use crate::tracks::level_camera_pose;
        let s_w = unitvec_from_azzen(&AzZen::new(deg(120.0), deg(50.0)));
        let north = level_camera_pose(Vector3::zeros(), 0.0);
        let east = level_camera_pose(Vector3::zeros(), deg(90.0));
        let a0 = camera_azzen_from_vec(&predict_sun(&north, &Pose::identity(), &s_w));
        let a1 = camera_azzen_from_vec(&predict_sun(&east, &Pose::identity(), &s_w));
        assert_relative_eq!(a0.azimuth, deg(120.0), epsilon = 1e-12);
        assert_relative_eq!(wrap_pi(a0.azimuth - a1.azimuth), deg(90.0), epsilon = 1e-12);
        assert_relative_eq!(a0.zenith, deg(50.0), epsilon = 1e-12);
    }

    #[test]
    fn camera_azzen_anchor() {
        let v = camera_vec_from_azzen(&AzZen::new(0.0, PI / 2.0));
        assert_relative_eq!(*v.as_vector(), Vector3::z(), epsilon = 1e-15);
        let up = camera_vec_from_azzen(&AzZen::new(0.0, 0.0));
        assert_relative_eq!(*up.as_vector(), -Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn oracle_exact_and_deterministic() {
        let pose = Pose::from_rotation(so3_exp(&Vector3::new(0.1, 0.5, -0.2)));
        let s_w = UnitVec3::new_normalize(Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let exact = oracle_measurement(&pose, &s_w, 0.0, 3, 11).unwrap();
        assert_relative_eq!(
            *exact.direction.as_vector(),
            pose.rotate_vector(s_w.as_vector()),
            epsilon = 1e-15
        );
        let a = oracle_measurement(&pose, &s_w, deg(5.0), 3, 11).unwrap();
        let b = oracle_measurement(&pose, &s_w, deg(5.0), 3, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.validate().is_ok());
        assert_eq!(a.source, SunSource::Oracle);
    }

    #[test]
    fn oracle_angular_error_statistics() {
        let sigma = deg(5.0);
        let s_w = UnitVec3::new_normalize(Vector3::new(0.2, -0.5, 0.7)).unwrap();
        let pose = Pose::identity();
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|i| {
                let m = oracle_measurement(&pose, &s_w, sigma, 0, i).unwrap();
                m.direction.angle_to(&s_w)
            })
            .sum::<f64>()
            / n as f64;
        // E|N(0, sigma)| = sigma * sqrt(2 / pi)
        let expected = sigma * (2.0 / PI).sqrt();
        assert!((mean / expected - 1.0).abs() < 0.1, "mean {mean} expected {expected}");
    }

    #[test]
    fn bimodal_candidates_are_opposite() {
        let pose = Pose::from_rotation(so3_exp(&Vector3::new(0.0, 0.3, 0.0)));
        let s_w = UnitVec3::new_normalize(Vector3::new(0.1, -0.8, 0.4)).unwrap();
        let cfg = BimodalConfig::default();
        for seed in 0..200 {
            let det = bimodal_measurement(&pose, &s_w, &cfg, 0, seed).unwrap();
            let diff = wrap_pi(det.candidates[0].azimuth - det.candidates[1].azimuth).abs();
            assert_relative_eq!(diff, PI, epsilon = 1e-12);
            assert_eq!(det.candidates[0].zenith, det.candidates[1].zenith);
            assert_relative_eq!(det.weights[0] + det.weights[1], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn bimodal_wrong_mode_frequency() {
        let s_w = UnitVec3::new_normalize(Vector3::new(0.1, -0.8, 0.4)).unwrap();
        let cfg = BimodalConfig {
            wrong_mode_probability: 0.25,
            ..BimodalConfig::default()
        };
        let wrong = (0..4000)
            .filter(|seed| {
                let d = bimodal_measurement(&Pose::identity(), &s_w, &cfg, 0, *seed).unwrap();
                d.weights[1 - d.true_index] > d.weights[d.true_index]
            })
            .count();
        assert!((wrong as f64 / 4000.0 - 0.25).abs() < 0.03);
    }

    #[test]
    fn unambiguous_weights_pick_first() {
        let a = AzZen::new(0.3, 1.0);
        let b = AzZen::new(0.3 + PI, 1.0);
        let cands = [(a, 1.0), (b, 0.0)];
        assert_eq!(max_likelihood(&cands).unwrap().0, 0);
        let prior = SunPrior::new(AzZen::new(2.0, 1.0));
        assert_eq!(vo_prior_disambiguate(&cands, &prior).unwrap().0, 0);
        assert!(vo_prior_disambiguate(&[], &prior).is_none());
    }

    #[test]
    fn prior_aligned_candidate_wins_below_density_ratio() {
        let a = AzZen::new(1.0, 1.2);
        let b = AzZen::new(1.0 + PI, 1.2);
        let prior = SunPrior::new(a);
        let density_ratio = (prior.log_density(&a) - prior.log_density(&b)).exp();
        for ratio in [1.0, 2.0, 5.0, 0.99 * density_ratio] {
            let cands = [(a, 1.0), (b, ratio)];
            assert_eq!(vo_prior_disambiguate(&cands, &prior).unwrap().0, 0, "ratio {ratio}");
        }
        let cands = [(a, 1.0), (b, 1.01 * density_ratio)];
        assert_eq!(vo_prior_disambiguate(&cands, &prior).unwrap().0, 1);
    }

    #[test]
    fn symmetric_prior_falls_back_to_weights() {
        let a = AzZen::new(0.5, 1.0);
        let b = AzZen::new(0.5 + PI, 1.0);
        let prior = SunPrior::new(AzZen::new(0.5 + PI / 2.0, 1.0));
        assert_eq!(vo_prior_disambiguate(&[(a, 0.4), (b, 0.6)], &prior).unwrap().0, 1);
        assert_eq!(vo_prior_disambiguate(&[(a, 0.6), (b, 0.4)], &prior).unwrap().0, 0);
    }

    #[test]
    fn prior_overrides_wrong_mode_within_45_degrees() {
        // Density ratio at 45 degrees offset: exp((135^2 - 45^2) / (2 * 60^2)) = exp(2.25) ~ 9.49.
        let ratio = ((135.0f64.powi(2) - 45.0f64.powi(2)) / (2.0 * 60.0f64.powi(2))).exp();
        assert!(ratio > 1.5);
        assert_relative_eq!(ratio, 2.25f64.exp(), epsilon = 1e-12);
        let truth = AzZen::new(deg(200.0), 1.0);
        let wrong = AzZen::new(deg(20.0), 1.0);
        for offset in [-45.0, -30.0, 0.0, 10.0, 45.0] {
            let prior = SunPrior::new(AzZen::new(deg(200.0 + offset), 1.0));
            let pick = vo_prior_disambiguate(&[(wrong, 0.6), (truth, 0.4)], &prior).unwrap();
            assert_eq!(pick.0, 1, "offset {offset}");
        }
    }

    #[test]
    fn gate_examples() {
        let s = UnitVec3::new_normalize(Vector3::new(0.3, -0.4, 0.8)).unwrap();
        assert_eq!(gate_measurement(&s, &s, 0.3, 0.3), GateDecision::Accept);

        // Two directions in the x-z plane with cosine distance 0.31.
        let ang = (1.0f64 - 0.31).acos();
        let a = UnitVec3::new_unchecked(Vector3::z());
        let b = UnitVec3::new_unchecked(Vector3::new(ang.sin(), 0.0, ang.cos()));
        assert!(matches!(
            gate_measurement(&a, &b, DEFAULT_COS_GATE, DEFAULT_Y_GATE),
            GateDecision::Reject(GateReason::CosineDistance(_))
        ));

        // Cosine distance 0.1 split symmetrically in the y-z plane: y error = 2 sin(half angle) ~ 0.447.
        let half = 0.5 * (1.0f64 - 0.1).acos();
        let up = UnitVec3::new_unchecked(Vector3::new(0.0, half.sin(), half.cos()));
        let down = UnitVec3::new_unchecked(Vector3::new(0.0, -half.sin(), half.cos()));
        assert_relative_eq!(1.0 - up.dot(&down), 0.1, epsilon = 1e-12);
        match gate_measurement(&up, &down, DEFAULT_COS_GATE, DEFAULT_Y_GATE) {
            GateDecision::Reject(GateReason::VerticalError(e)) => assert!(e > 0.44),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn azimuth_only_construction() {
        let m = azimuth_only(0.0, deg(10.0), 4).unwrap();
        assert_relative_eq!(*m.direction.as_vector(), Vector3::z(), epsilon = 1e-15);
        assert_eq!(m.covariance[(1, 1)], AZIMUTH_ONLY_MASK_VARIANCE);
        assert_relative_eq!(m.covariance[(0, 0)], deg(10.0).powi(2), epsilon = 1e-15);
        assert!(m.validate().is_ok());
        assert!(azimuth_only(0.0, 0.0, 4).is_err());
    }

    proptest! {
        #[test]
        fn predicted_norm_is_preserved(
            a in prop::array::uniform3(-3.0f64..3.0),
            b in prop::array::uniform3(-3.0f64..3.0),
            s in prop::array::uniform3(-1.0f64..1.0),
        ) {
            prop_assume!(Vector3::from(s).norm() > 1e-3);
            let s_w = UnitVec3::new_normalize(Vector3::from(s)).unwrap();
            let t_kb = Pose::new(so3_exp(&Vector3::from(a)), Vector3::new(1.0, 2.0, 3.0));
            let t_bw = Pose::new(so3_exp(&Vector3::from(b)), Vector3::new(-4.0, 0.0, 9.0));
            let p = predict_sun(&t_kb, &t_bw, &s_w);
            prop_assert!((p.as_vector().norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn disambiguation_invariant_to_weight_scaling(
            az in 0.0f64..6.28, w0 in 0.01f64..1.0, w1 in 0.01f64..1.0,
            prior_az in 0.0f64..6.28, scale in 0.001f64..1000.0,
        ) {
            let cands = [(AzZen::new(az, 1.0), w0), (AzZen::new(az + PI, 1.0), w1)];
            let prior = SunPrior::new(AzZen::new(prior_az, 1.1));
            let s0 = w0.ln() + prior.log_density(&cands[0].0);
            let s1 = w1.ln() + prior.log_density(&cands[1].0);
            prop_assume!((s0 - s1).abs() > 1e-9);
            let scaled = [(cands[0].0, w0 * scale), (cands[1].0, w1 * scale)];
            prop_assert_eq!(
                vo_prior_disambiguate(&cands, &prior).unwrap().0,
                vo_prior_disambiguate(&scaled, &prior).unwrap().0
            );
        }

        #[test]
        fn gate_acceptance_is_an_angle_interval(y in -0.3f64..0.3) {
            // Rotate within the plane of constant y; acceptance must be a prefix of the angle sweep.
            let r = (1.0 - y * y).sqrt();
            let base = UnitVec3::new_unchecked(Vector3::new(0.0, y, r));
            let mut seen_reject = false;
            for i in 0..=180 {
                let t = (i as f64).to_radians();
                let v = UnitVec3::new_unchecked(Vector3::new(r * t.sin(), y, r * t.cos()));
                let accepted = gate_measurement(&v, &base, DEFAULT_COS_GATE, DEFAULT_Y_GATE).is_accept();
                if accepted {
                    prop_assert!(!seen_reject);
                } else {
                    seen_reject = true;
                }
            }
        }
    }
}
