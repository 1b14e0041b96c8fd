//! Sliding-window bundle adjustment with optional sun-direction terms.
//!
//! Minimizes
//!
//! ```text
//! J = sum_k ( sum_j e_y^T R_y^-1 e_y  +  e_s^T R_s^-1 e_s )
//! e_y = g(T_kb p_b) - y          e_s = R_kb R_bw s_w - s_k
//! ```
//!
//! by damped Gauss-Newton. Poses take left SE(3) increments, landmarks
//! additive ones, and landmarks are eliminated with a Schur complement
//! before the dense pose system is solved. Pose 0 is the window base and is
//! held at identity.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Matrix6x3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{self, CameraError, StereoIntrinsics, StereoObservation};
use crate::geometry::{se3_exp, skew, Pose, UnitVec3};
use crate::sun::{is_spd, SunError, SunMeasurement};
use crate::tracks::LandmarkId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("window {window}: normal equations are singular")]
    Singular { window: usize },
    #[error(transparent)]
    Sun(#[from] SunError),
}

fn default_max_iters() -> usize {
    50
}
fn default_lambda0() -> f64 {
    1e-4
}
fn default_update_tol() -> f64 {
    1e-10
}
fn default_cost_tol() -> f64 {
    1e-9
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_lambda0")]
    pub lambda0: f64,
    /// Stop when the accepted update norm falls below this.
    #[serde(default = "default_update_tol")]
    pub update_tol: f64,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    #[serde(default = "default_cost_tol")]
    pub cost_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            lambda0: default_lambda0(),
            update_tol: default_update_tol(),
            cost_tol: default_cost_tol(),
        }
    }
}

const MAX_LAMBDA: f64 = 1e16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowObservation {
    pub pose: usize,
    pub landmark: usize,
    pub obs: StereoObservation,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSun {
    pub pose: usize,
    pub measurement: SunMeasurement,
}

/// One window of the estimation problem, expressed in the base frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowProblem {
    pub window_index: usize,
    pub intrinsics: StereoIntrinsics,
    /// `T_{k,b}`; index 0 is the base and must be identity.
    pub poses: Vec<Pose>,
    /// Landmark positions in the base frame.
    pub landmarks: Vec<Vector3<f64>>,
    pub landmark_ids: Vec<LandmarkId>,
    pub observations: Vec<WindowObservation>,
    pub sun: Vec<WindowSun>,
    /// World-to-base transform, held fixed.
    pub t_bw: Pose,
    /// Sun direction in the world frame.
    pub s_w: UnitVec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowEstimate {
    pub poses: Vec<Pose>,
    pub landmarks: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SolveReport {
    /// Accepted Gauss-Newton steps.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub max_update_norm: f64,
    /// Observations skipped because the point fell behind the camera, summed over evaluations.
    pub dropped_observations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// `g(T p) - y` for one stereo observation.
pub fn reprojection_residual(
    t_kb: &Pose,
    p_b: &Vector3<f64>,
    y: &StereoObservation,
    k: &StereoIntrinsics,
) -> Result<Vector3<f64>, CameraError> {
    let predicted = camera::project(k, &t_kb.transform_point(p_b))?;
    Ok(predicted.as_vector() - y.as_vector())
}

/// Jacobians of the reprojection residual with respect to a left pose
/// increment `(omega, rho)` and to the base-frame landmark.
pub fn reprojection_jacobians(
    t_kb: &Pose,
    p_b: &Vector3<f64>,
    k: &StereoIntrinsics,
) -> Result<(Matrix3x6<f64>, Matrix3<f64>), CameraError> {
    let p_k = t_kb.transform_point(p_b);
    let j_proj = camera::project_jacobian(k, &p_k)?;
    let mut d_point = Matrix3x6::zeros();
    d_point.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&p_k)));
    d_point.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    Ok((j_proj * d_point, j_proj * t_kb.rotation.matrix()))
}

/// `R_kb R_bw s_w - s_k`. Directions ignore translation.
pub fn sun_residual(
    t_kb: &Pose,
    t_bw: &Pose,
    s_w: &UnitVec3,
    s_k: &SunMeasurement,
) -> Result<Vector3<f64>, SunError> {
    let n = s_k.direction.as_vector().norm();
    if !((n - 1.0).abs() <= 1e-3) {
        return Err(SunError::NonUnitMeasurement(n));
    }
    let predicted = crate::sun::predict_sun(t_kb, t_bw, s_w);
    Ok(predicted.as_vector() - s_k.direction.as_vector())
}

/// Jacobian of the sun residual with respect to a left increment of `T_kb`.
pub fn sun_jacobian(t_kb: &Pose, t_bw: &Pose, s_w: &UnitVec3) -> Matrix3x6<f64> {
    let predicted = crate::sun::predict_sun(t_kb, t_bw, s_w);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(predicted.as_vector())));
    j
}

fn information(cov: &Matrix3<f64>, what: &str) -> Result<Matrix3<f64>, SolverError> {
    if !is_spd(cov) {
        return Err(SolverError::Configuration(format!(
            "{what} covariance is not symmetric positive definite"
        )));
    }
    let inv = cov.cholesky().expect("checked spd").inverse();
    Ok((inv + inv.transpose()) * 0.5)
}

struct Weights {
    obs: Vec<Matrix3<f64>>,
    sun: Vec<Matrix3<f64>>,
}

impl WindowProblem {
    fn validate(&self) -> Result<Weights, SolverError> {
        if self.poses.is_empty() {
            return Err(SolverError::Configuration("window has no poses".into()));
        }
        if self.poses[0] != Pose::identity() {
            return Err(SolverError::Configuration("base pose must be identity".into()));
        }
        if self.landmark_ids.len() != self.landmarks.len() {
            return Err(SolverError::Configuration("landmark id count mismatch".into()));
        }
        let mut counts = vec![0usize; self.landmarks.len()];
        for o in &self.observations {
            if o.pose >= self.poses.len() || o.landmark >= self.landmarks.len() {
                return Err(SolverError::Configuration("observation index out of range".into()));
            }
            counts[o.landmark] += 1;
        }
        if let Some(j) = counts.iter().position(|c| *c < 2) {
            return Err(SolverError::Configuration(format!(
                "landmark {} has fewer than 2 observations",
                self.landmark_ids[j]
            )));
        }
        for s in &self.sun {
            if s.pose >= self.poses.len() {
                return Err(SolverError::Configuration("sun index out of range".into()));
            }
            s.measurement.validate().map_err(|e| match e {
                SunError::InvalidCovariance => SolverError::Configuration(
                    "sun covariance is not symmetric positive definite".into(),
                ),
                other => SolverError::Sun(other),
            })?;
        }
        Ok(Weights {
            obs: self
                .observations
                .iter()
                .map(|o| information(&o.obs.covariance, "observation"))
                .collect::<Result<_, _>>()?,
            sun: self
                .sun
                .iter()
                .map(|s| information(&s.measurement.covariance, "sun"))
                .collect::<Result<_, _>>()?,
        })
    }

    fn cost_at(&self, poses: &[Pose], landmarks: &[Vector3<f64>], w: &Weights) -> (f64, usize) {
        let mut cost = 0.0;
        let mut dropped = 0;
        for (o, info) in self.observations.iter().zip(&w.obs) {
            match reprojection_residual(&poses[o.pose], &landmarks[o.landmark], &o.obs, &self.intrinsics) {
                Ok(e) => cost += e.dot(&(info * e)),
                Err(_) => dropped += 1,
            }
        }
        for (s, info) in self.sun.iter().zip(&w.sun) {
            let e = sun_residual(&poses[s.pose], &self.t_bw, &self.s_w, &s.measurement)
                .expect("validated sun measurement");
            cost += e.dot(&(info * e));
        }
        (cost, dropped)
    }
}

/// Sum of squared Mahalanobis residuals at the problem's current estimate.
/// Observations behind the camera are skipped.
pub fn total_cost(problem: &WindowProblem) -> Result<f64, SolverError> {
    let weights = problem.validate()?;
    Ok(problem.cost_at(&problem.poses, &problem.landmarks, &weights).0)
}

struct NormalEquations {
    h_pp: DMatrix<f64>,
    b_p: DVector<f64>,
    h_ll: Vec<Matrix3<f64>>,
    b_l: Vec<Vector3<f64>>,
    /// Per landmark: (free pose index, H_pl block).
    h_pl: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

fn build_normal_equations(
    problem: &WindowProblem,
    poses: &[Pose],
    landmarks: &[Vector3<f64>],
    w: &Weights,
) -> NormalEquations {
    let free = poses.len() - 1;
    let mut ne = NormalEquations {
        h_pp: DMatrix::zeros(6 * free, 6 * free),
        b_p: DVector::zeros(6 * free),
        h_ll: vec![Matrix3::zeros(); landmarks.len()],
        b_l: vec![Vector3::zeros(); landmarks.len()],
        h_pl: vec![Vec::new(); landmarks.len()],
    };
    for (o, info) in problem.observations.iter().zip(&w.obs) {
        let t = &poses[o.pose];
        let p = &landmarks[o.landmark];
        let (Ok(e), Ok((jp, jl))) = (
            reprojection_residual(t, p, &o.obs, &problem.intrinsics),
            reprojection_jacobians(t, p, &problem.intrinsics),
        ) else {
            continue;
        };
        let we = info * e;
        let wjl = info * jl;
        ne.h_ll[o.landmark] += jl.transpose() * wjl;
        ne.b_l[o.landmark] -= jl.transpose() * we;
        if o.pose > 0 {
            let i = o.pose - 1;
            let h = jp.transpose() * info * jp;
            let mut block = ne.h_pp.fixed_view_mut::<6, 6>(6 * i, 6 * i);
            block += h;
            let mut g = ne.b_p.fixed_rows_mut::<6>(6 * i);
            g -= jp.transpose() * we;
            let cross = jp.transpose() * wjl;
            match ne.h_pl[o.landmark].iter_mut().find(|(pi, _)| *pi == i) {
                Some((_, blk)) => *blk += cross,
                None => ne.h_pl[o.landmark].push((i, cross)),
            }
        }
    }
    for (s, info) in problem.sun.iter().zip(&w.sun) {
        if s.pose == 0 {
            continue;
        }
        let i = s.pose - 1;
        let t = &poses[s.pose];
        let e = sun_residual(t, &problem.t_bw, &problem.s_w, &s.measurement).expect("validated");
        let j = sun_jacobian(t, &problem.t_bw, &problem.s_w);
        let mut block = ne.h_pp.fixed_view_mut::<6, 6>(6 * i, 6 * i);
        block += j.transpose() * info * j;
        let mut g = ne.b_p.fixed_rows_mut::<6>(6 * i);
        g -= j.transpose() * (info * e);
    }
    ne
}

/// Solves the damped system; returns `(pose steps, landmark steps)`.
fn solve_damped(ne: &NormalEquations, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let n = ne.b_p.len();
    let mut s = ne.h_pp.clone();
    for i in 0..n {
        s[(i, i)] += lambda * ne.h_pp[(i, i)];
    }
    let mut rhs = ne.b_p.clone();
    let mut inv_ll = Vec::with_capacity(ne.h_ll.len());
    for (j, h) in ne.h_ll.iter().enumerate() {
        // A landmark whose observations are all invalid this iteration is held fixed.
        if h.iter().all(|x| *x == 0.0) {
            inv_ll.push(Matrix3::zeros());
            continue;
        }
        let mut damped = *h;
        for d in 0..3 {
            damped[(d, d)] += lambda * h[(d, d)];
        }
        let inv = damped.cholesky()?.inverse();
        let bl = ne.b_l[j];
        for (a, h_a) in &ne.h_pl[j] {
            let tmp: Matrix6x3<f64> = h_a * inv;
            let mut r = rhs.fixed_rows_mut::<6>(6 * a);
            r -= tmp * bl;
            for (b, h_b) in &ne.h_pl[j] {
                let mut blk = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                blk -= tmp * h_b.transpose();
            }
        }
        inv_ll.push(inv);
    }
    let dp = if n > 0 {
        let sym = (&s + s.transpose()) * 0.5;
        sym.cholesky()?.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    let dl = inv_ll
        .iter()
        .enumerate()
        .map(|(j, inv)| {
            let mut r = ne.b_l[j];
            for (a, h_a) in &ne.h_pl[j] {
                r -= h_a.transpose() * dp.fixed_rows::<6>(6 * a);
            }
            inv * r
        })
        .collect();
    Some((dp, dl))
}

/// Damped Gauss-Newton over the window. Accepted costs never increase.
pub fn solve_window(
    problem: &WindowProblem,
    opts: &SolverOptions,
) -> Result<(WindowEstimate, SolveReport), SolverError> {
    let weights = problem.validate()?;
    if !(opts.lambda0 > 0.0) {
        return Err(SolverError::Configuration("lambda0 must be positive".into()));
    }
    let mut poses = problem.poses.clone();
    let mut landmarks = problem.landmarks.clone();
    let (mut cost, mut invalid) = problem.cost_at(&poses, &landmarks, &weights);
    let mut dropped = invalid;
    let mut report = SolveReport {
        initial_cost: cost,
        cost_history: vec![cost],
        ..SolveReport::default()
    };
    if cost == 0.0 {
        report.converged = true;
        report.final_cost = 0.0;
        report.dropped_observations = dropped;
        return Ok((WindowEstimate { poses, landmarks }, report));
    }

    let mut lambda = opts.lambda0;
    'outer: while report.iterations < opts.max_iters {
        let ne = build_normal_equations(problem, &poses, &landmarks, &weights);
        loop {
            let Some((dp, dl)) = solve_damped(&ne, lambda) else {
                lambda *= 10.0;
                if lambda > MAX_LAMBDA {
                    return Err(SolverError::Singular {
                        window: problem.window_index,
                    });
                }
                continue;
            };
            let mut cand_poses = poses.clone();
            for (i, pose) in cand_poses.iter_mut().enumerate().skip(1) {
                let xi: Vector6<f64> = dp.fixed_rows::<6>(6 * (i - 1)).into_owned();
                *pose = se3_exp(&xi).compose(pose);
            }
            let cand_landmarks: Vec<_> = landmarks.iter().zip(&dl).map(|(p, d)| p + d).collect();
            let (new_cost, new_dropped) = problem.cost_at(&cand_poses, &cand_landmarks, &weights);
            dropped += new_dropped;
            let step_norm = (dp.norm_squared() + dl.iter().map(|d| d.norm_squared()).sum::<f64>()).sqrt();
            // Losing a residual lowers the cost without improving the fit, so such steps are rejected.
            if new_cost < cost && new_dropped <= invalid {
                let rel = (cost - new_cost) / cost;
                poses = cand_poses;
                landmarks = cand_landmarks;
                cost = new_cost;
                invalid = new_dropped;
                report.iterations += 1;
                report.cost_history.push(cost);
                report.max_update_norm = report.max_update_norm.max(step_norm);
                lambda = (lambda / 10.0).max(1e-12);
                if step_norm < opts.update_tol || rel < opts.cost_tol || cost == 0.0 {
                    report.converged = true;
                    break 'outer;
                }
                break;
            }
            // A rejected step smaller than the update tolerance means no further progress is possible.
            if step_norm < opts.update_tol {
                report.converged = true;
                break 'outer;
            }
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                report.converged = true;
                break 'outer;
            }
        }
    }
    report.final_cost = cost;
    report.dropped_observations = dropped;
    Ok((WindowEstimate { poses, landmarks }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use crate::sun::{azimuth_only, SunSource};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn left_perturb(t: &Pose, i: usize, h: f64) -> Pose {
        let mut xi = Vector6::zeros();
        xi[i] = h;
        se3_exp(&xi).compose(t)
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            so3_exp(&Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            )),
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        )
    }

    fn rel_err<const R: usize, const C: usize>(
        a: &nalgebra::SMatrix<f64, R, C>,
        b: &nalgebra::SMatrix<f64, R, C>,
    ) -> f64 {
        (a - b).abs().max() / a.abs().max().max(1e-12)
    }

    #[test]
    fn reprojection_residual_examples() {
        let k = StereoIntrinsics::kitti_like();
        let t = Pose::new(so3_exp(&Vector3::new(0.01, 0.2, 0.0)), Vector3::new(0.1, 0.0, -0.5));
        let p = Vector3::new(1.0, -0.5, 10.0);
        let exact = camera::project(&k, &t.transform_point(&p)).unwrap();
        assert_eq!(reprojection_residual(&t, &p, &exact, &k).unwrap(), Vector3::zeros());
        let mut shifted = exact;
        shifted.u += 1.0;
        let e = reprojection_residual(&t, &p, &shifted, &k).unwrap();
        assert_relative_eq!(e, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-12);
        let behind = Vector3::new(0.0, 0.0, -5.0);
        assert!(reprojection_residual(&Pose::identity(), &behind, &exact, &k).is_err());
    }

    #[test]
    fn reprojection_jacobians_match_finite_differences() {
        let k = StereoIntrinsics::kitti_like();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for _ in 0..100 {
            let t = random_pose(&mut rng);
            let p = t.inverse().transform_point(&Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(3.0..40.0),
            ));
            let y = StereoObservation::new(300.0, 200.0, 20.0);
            let (jp, jl) = reprojection_jacobians(&t, &p, &k).unwrap();
            let mut num_p = Matrix3x6::zeros();
            for i in 0..6 {
                let plus = reprojection_residual(&left_perturb(&t, i, h), &p, &y, &k).unwrap();
                let minus = reprojection_residual(&left_perturb(&t, i, -h), &p, &y, &k).unwrap();
                num_p.set_column(i, &((plus - minus) / (2.0 * h)));
            }
            let mut num_l = Matrix3::zeros();
            for i in 0..3 {
                let mut a = p;
                let mut b = p;
                a[i] += h;
                b[i] -= h;
                let d = reprojection_residual(&t, &a, &y, &k).unwrap() - reprojection_residual(&t, &b, &y, &k).unwrap();
                num_l.set_column(i, &(d / (2.0 * h)));
            }
            assert!(rel_err(&jp, &num_p) < 1e-5, "pose jac {}", rel_err(&jp, &num_p));
            assert!(rel_err(&jl, &num_l) < 1e-5, "landmark jac {}", rel_err(&jl, &num_l));
        }
    }

    fn measurement(v: Vector3<f64>) -> SunMeasurement {
        SunMeasurement {
            direction: UnitVec3::new_normalize(v).unwrap(),
            covariance: Matrix3::identity(),
            frame: 0,
            source: SunSource::Oracle,
        }
    }

    #[test]
    fn sun_residual_examples() {
        let s_w = UnitVec3::new_normalize(Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let id = Pose::identity();
        assert_eq!(sun_residual(&id, &id, &s_w, &measurement(Vector3::z())).unwrap(), Vector3::zeros());
        let e = sun_residual(&id, &id, &s_w, &measurement(Vector3::x())).unwrap();
        assert_relative_eq!(e.norm(), 2f64.sqrt(), epsilon = 1e-15);
        let mut bad = measurement(Vector3::x());
        bad.direction = UnitVec3::new_unchecked(Vector3::new(2.0, 0.0, 0.0));
        assert!(matches!(sun_residual(&id, &id, &s_w, &bad), Err(SunError::NonUnitMeasurement(_))));
    }

    #[test]
    fn sun_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..100 {
            let t = random_pose(&mut rng);
            let t_bw = random_pose(&mut rng);
            let s_w = UnitVec3::new_normalize(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.1..1.0),
            ))
            .unwrap();
            let m = measurement(Vector3::new(0.2, -0.3, 0.9));
            let j = sun_jacobian(&t, &t_bw, &s_w);
            let mut num = Matrix3x6::zeros();
            for i in 0..6 {
                let plus = sun_residual(&left_perturb(&t, i, h), &t_bw, &s_w, &m).unwrap();
                let minus = sun_residual(&left_perturb(&t, i, -h), &t_bw, &s_w, &m).unwrap();
                num.set_column(i, &((plus - minus) / (2.0 * h)));
            }
            assert!(rel_err(&j, &num) < 1e-5, "{}", rel_err(&j, &num));
        }
    }

    /// Noiseless two- or three-pose window with landmarks in front of every camera.
    pub(crate) fn synthetic_window(n_poses: usize, n_landmarks: usize, seed: u64) -> (WindowProblem, Vec<Pose>) {
        let k = StereoIntrinsics::kitti_like();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<Pose> = (0..n_poses)
            .map(|i| {
                if i == 0 {
                    Pose::identity()
                } else {
                    Pose::new(so3_exp(&Vector3::new(0.0, 0.03 * i as f64, 0.0)), Vector3::new(0.02, 0.0, -(i as f64)))
                }
            })
            .collect();
        let mut landmarks = Vec::new();
        let mut observations = Vec::new();
        while landmarks.len() < n_landmarks {
            let p = Vector3::new(
                rng.random_range(-8.0..8.0),
                rng.random_range(-3.0..2.0),
                rng.random_range(6.0..40.0),
            );
            let obs: Vec<_> = truth.iter().map(|t| camera::project(&k, &t.transform_point(&p))).collect();
            if obs.iter().any(|o| o.as_ref().map_or(true, |y| !k.in_bounds(y.u, y.v))) {
                continue;
            }
            let j = landmarks.len();
            landmarks.push(p);
            for (i, o) in obs.into_iter().enumerate() {
                observations.push(WindowObservation { pose: i, landmark: j, obs: o.unwrap() });
            }
        }
        let problem = WindowProblem {
            window_index: 0,
            intrinsics: k,
            poses: truth.clone(),
            landmark_ids: (0..landmarks.len() as u64).collect(),
            landmarks,
            observations,
            sun: Vec::new(),
            t_bw: Pose::identity(),
            s_w: UnitVec3::new_normalize(Vector3::new(0.3, 0.5, 0.8)).unwrap(),
        };
        (problem, truth)
    }

    #[test]
    fn total_cost_examples() {
        let (mut problem, _) = synthetic_window(2, 20, 3);
        assert_eq!(total_cost(&problem).unwrap(), 0.0);
        problem.observations[0].obs.u += 1.0;
        assert_relative_eq!(total_cost(&problem).unwrap(), 1.0, epsilon = 1e-9);
        problem.observations[0].obs.covariance *= 2.0;
        assert_relative_eq!(total_cost(&problem).unwrap(), 0.5, epsilon = 1e-9);
        problem.observations[0].obs.covariance = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
        assert!(matches!(total_cost(&problem), Err(SolverError::Configuration(_))));
    }

    #[test]
    fn solve_at_truth_is_a_fixed_point() {
        let (problem, truth) = synthetic_window(2, 30, 4);
        let (est, report) = solve_window(&problem, &SolverOptions::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert_eq!(report.final_cost, 0.0);
        assert!(report.converged);
        assert_eq!(est.poses, truth);
    }

    #[test]
    fn solve_recovers_from_perturbation() {
        let (mut problem, truth) = synthetic_window(3, 40, 5);
        for (i, pose) in problem.poses.iter_mut().enumerate().skip(1) {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            *pose = se3_exp(&Vector6::new(0.05 * s, -0.03, 0.02, 0.1, -0.05 * s, 0.07)).compose(pose);
        }
        let (est, report) = solve_window(&problem, &SolverOptions::default()).unwrap();
        assert!(report.converged);
        assert_eq!(est.poses[0], Pose::identity());
        for (e, t) in est.poses.iter().zip(&truth) {
            assert!((e.translation - t.translation).norm() < 1e-8);
            assert!(e.rotation.compose(&t.rotation.inverse()).angle() < 1e-8);
        }
        for w in report.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn rejects_bad_problems() {
        let (mut problem, _) = synthetic_window(2, 10, 6);
        problem.poses[0] = Pose::from_translation(Vector3::x());
        assert!(matches!(solve_window(&problem, &SolverOptions::default()), Err(SolverError::Configuration(_))));
        let (mut problem, _) = synthetic_window(2, 10, 6);
        problem.observations.retain(|o| !(o.landmark == 3 && o.pose == 1));
        assert!(matches!(solve_window(&problem, &SolverOptions::default()), Err(SolverError::Configuration(_))));
    }

    #[test]
    fn unconstrained_pose_is_singular() {
        let (mut problem, _) = synthetic_window(2, 10, 7);
        // Add a third pose that nothing observes.
        problem.poses.push(Pose::from_translation(Vector3::new(0.0, 0.0, -2.0)));
        problem.observations[0].obs.u += 0.5;
        assert!(matches!(
            solve_window(&problem, &SolverOptions::default()),
            Err(SolverError::Singular { window: 0 })
        ));
    }

    #[test]
    fn sun_term_reduces_yaw_bias() {
        // Noisy landmarks leave yaw weakly determined; a sun measurement from the true pose pulls it back.
        let (mut problem, truth) = synthetic_window(2, 15, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for o in problem.observations.iter_mut() {
            o.obs.u += rng.random_range(-1.0..1.0);
            o.obs.v += rng.random_range(-1.0..1.0);
            o.obs.d += rng.random_range(-1.0..1.0);
        }
        let yaw = |p: &Pose, t: &Pose| crate::geometry::so3_log(&p.rotation.compose(&t.rotation.inverse())).y;
        problem.poses[1] = se3_exp(&Vector6::new(0.0, 0.05, 0.0, 0.0, 0.0, 0.0)).compose(&problem.poses[1]);
        let (plain, _) = solve_window(&problem, &SolverOptions::default()).unwrap();
        let s_true = truth[1].rotate_vector(problem.s_w.as_vector());
        problem.sun.push(WindowSun {
            pose: 1,
            measurement: SunMeasurement {
                direction: UnitVec3::new_normalize(s_true).unwrap(),
                covariance: Matrix3::identity() * 1e-8,
                frame: 1,
                source: SunSource::Oracle,
            },
        });
        let (aided, _) = solve_window(&problem, &SolverOptions::default()).unwrap();
        assert!(yaw(&aided.poses[1], &truth[1]).abs() < yaw(&plain.poses[1], &truth[1]).abs());
    }

    #[test]
    fn huge_sun_covariance_matches_pure_vo() {
        let (mut problem, _) = synthetic_window(3, 25, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for o in problem.observations.iter_mut() {
            o.obs.u += rng.random_range(-0.5..0.5);
            o.obs.v += rng.random_range(-0.5..0.5);
        }
        let (plain, _) = solve_window(&problem, &SolverOptions::default()).unwrap();
        for pose in 1..3 {
            problem.sun.push(WindowSun {
                pose,
                measurement: SunMeasurement {
                    direction: UnitVec3::new_normalize(Vector3::new(0.5, -0.5, 0.7)).unwrap(),
                    covariance: Matrix3::identity() * 1e12,
                    frame: pose,
                    source: SunSource::Oracle,
                },
            });
        }
        let (aided, _) = solve_window(&problem, &SolverOptions::default()).unwrap();
        for (a, b) in aided.poses.iter().zip(&plain.poses) {
            assert!((a.rotation.matrix() - b.rotation.matrix()).abs().max() < 1e-8);
            assert!((a.translation - b.translation).abs().max() < 1e-8);
        }
    }

    #[test]
    fn azimuth_only_ignores_sun_elevation() {
        let (mut base, truth) = synthetic_window(2, 20, 12);
        base.poses[1] = se3_exp(&Vector6::new(0.01, -0.02, 0.01, 0.05, 0.0, -0.05)).compose(&base.poses[1]);
        let solve_with_elevation = |elev_deg: f64| {
            let mut problem = base.clone();
            let s_w = crate::geometry::unitvec_from_azzen(&crate::geometry::AzZen::new(
                1.0,
                (90.0 - elev_deg).to_radians(),
            ));
            problem.s_w = s_w;
            let cam = crate::sun::camera_azzen_from_vec(&crate::sun::predict_sun(&truth[1], &problem.t_bw, &s_w));
            problem.sun.push(WindowSun {
                pose: 1,
                measurement: azimuth_only(cam.azimuth, 0.01, 1).unwrap(),
            });
            solve_window(&problem, &SolverOptions::default()).unwrap().0
        };
        let low = solve_with_elevation(20.0);
        let high = solve_with_elevation(55.0);
        assert!((low.poses[1].translation - high.poses[1].translation).norm() < 1e-6);
        assert!((low.poses[1].rotation.matrix() - high.poses[1].rotation.matrix()).abs().max() < 1e-6);
    }
}
