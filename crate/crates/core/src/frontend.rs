//! Frame-to-frame motion initialization: stereo point clouds aligned by a
//! three-point RANSAC with reprojection-error inlier gating.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{self, StereoIntrinsics};
use crate::geometry::{Pose, Rotation};
use crate::solver::reprojection_jacobians;
use crate::tracks::{LandmarkId, TrackTable};

/// Samples whose triangle area is at or below this (m^2) are degenerate.
pub const MIN_TRIANGLE_AREA: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrontendError {
    #[error("degenerate point sample (collinear or coincident)")]
    DegenerateSample,
    #[error("frames {frame}->{next}: {found} correspondences, need {needed}")]
    InsufficientCorrespondences {
        frame: usize,
        next: usize,
        found: usize,
        needed: usize,
    },
    #[error("frames {frame}->{next}: best model has {best} inliers, need {needed}")]
    NoConsensus {
        frame: usize,
        next: usize,
        best: usize,
        needed: usize,
    },
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
}

fn default_iterations() -> usize {
    200
}
fn default_threshold() -> f64 {
    2.0
}
fn default_min_inliers() -> usize {
    6
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Inlier threshold on the `(u, v, d)` reprojection error norm (pixels).
    #[serde(default = "default_threshold")]
    pub threshold_px: f64,
    #[serde(default = "default_min_inliers")]
    pub min_inliers: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            threshold_px: default_threshold(),
            min_inliers: default_min_inliers(),
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), FrontendError> {
        if self.iterations < 1 {
            return Err(FrontendError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.threshold_px > 0.0) {
            return Err(FrontendError::InvalidConfig("threshold must be > 0".into()));
        }
        if self.min_inliers < 3 {
            return Err(FrontendError::InvalidConfig("min inliers must be >= 3".into()));
        }
        Ok(())
    }
}

/// Least-squares rigid transform mapping `src` onto `dst` (Kabsch).
pub fn align_points(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Pose, FrontendError> {
    align_points_weighted(src, dst, &vec![1.0; src.len()])
}

/// Weighted Kabsch: minimizes `sum_i w_i |R src_i + t - dst_i|^2`. Weights must be positive.
pub fn align_points_weighted(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: &[f64],
) -> Result<Pose, FrontendError> {
    assert_eq!(src.len(), dst.len(), "point sets must have equal length");
    assert_eq!(src.len(), weights.len(), "one weight per point");
    let n = src.len();
    if n < 3 {
        return Err(FrontendError::DegenerateSample);
    }
    let total: f64 = weights.iter().sum();
    let c_src = src.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / total;
    let c_dst = dst.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / total;
    let mut cross = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        let a = s - c_src;
        cross += (d - c_dst) * a.transpose() * *w;
        spread += a * a.transpose() * *w;
    }
    // Collinear sources leave a rotation about the line undetermined.
    let mut eig = spread.symmetric_eigenvalues().as_slice().to_vec();
    eig.sort_by(f64::total_cmp);
    if eig[1] <= 1e-18 * eig[2].max(1.0) {
        return Err(FrontendError::DegenerateSample);
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = Rotation::from_matrix_orthonormalized(u * fix * v_t);
    let t = c_dst - r.rotate(&c_src);
    Ok(Pose::new(r, t))
}

/// Minimal solver for RANSAC: exact for noiseless non-collinear triples.
pub fn align_three_points(src: &[Vector3<f64>; 3], dst: &[Vector3<f64>; 3]) -> Result<Pose, FrontendError> {
    let area = 0.5 * (src[1] - src[0]).cross(&(src[2] - src[0])).norm();
    if !(area > MIN_TRIANGLE_AREA) {
        return Err(FrontendError::DegenerateSample);
    }
    align_points(src, dst)
}

/// Inter-frame motion `T_{k+1,k}` and the tracks consistent with it.
#[derive(Clone, Debug, PartialEq)]
pub struct InterframeEstimate {
    pub motion: Pose,
    /// Inlier track ids, sorted.
    pub inliers: Vec<LandmarkId>,
    pub correspondences: usize,
}

struct Correspondence {
    id: LandmarkId,
    point: Vector3<f64>,
    next_point: Vector3<f64>,
    next_obs: Vector3<f64>,
}

fn reprojection_error(k: &StereoIntrinsics, motion: &Pose, c: &Correspondence) -> f64 {
    match camera::project(k, &motion.transform_point(&c.point)) {
        Ok(y) => (y.as_vector() - c.next_obs).norm(),
        Err(_) => f64::INFINITY,
    }
}

fn inliers_of(k: &StereoIntrinsics, motion: &Pose, corr: &[Correspondence], thresh: f64) -> Vec<usize> {
    corr.iter()
        .enumerate()
        .filter(|(_, c)| reprojection_error(k, motion, c) <= thresh)
        .map(|(i, _)| i)
        .collect()
}

const REFINE_ROUNDS: usize = 5;
const GAUSS_NEWTON_STEPS: usize = 10;

/// Gauss-Newton on the summed squared `(u, v, d)` reprojection error of the
/// selected correspondences, starting from `model`.
fn minimize_reprojection(k: &StereoIntrinsics, corr: &[Correspondence], idx: &[usize], mut model: Pose) -> Pose {
    for _ in 0..GAUSS_NEWTON_STEPS {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for &i in idx {
            let c = &corr[i];
            let Ok(y) = camera::project(k, &model.transform_point(&c.point)) else {
                continue;
            };
            let Ok((jp, _)) = reprojection_jacobians(&model, &c.point, k) else {
                continue;
            };
            let e = y.as_vector() - c.next_obs;
            h += jp.transpose() * jp;
            g -= jp.transpose() * e;
        }
        let Some(chol) = h.cholesky() else {
            break;
        };
        let step = chol.solve(&g);
        model = model.retract_left(&step);
        if step.amax() < 1e-12 {
            break;
        }
    }
    model
}

/// Re-fits a model on its inliers until the inlier set stops changing or shrinks.
fn refine(
    k: &StereoIntrinsics,
    corr: &[Correspondence],
    mut model: Pose,
    mut inl: Vec<usize>,
    thresh: f64,
) -> (Pose, Vec<usize>) {
    for _ in 0..REFINE_ROUNDS {
        let refit = minimize_reprojection(k, corr, &inl, model);
        let refit_inl = inliers_of(k, &refit, corr, thresh);
        if refit_inl.len() < inl.len() {
            break;
        }
        let done = refit_inl == inl;
        model = refit;
        inl = refit_inl;
        if done {
            break;
        }
    }
    (model, inl)
}

fn frame_seed(seed: u64, frame: usize) -> u64 {
    seed ^ (frame as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Three-point RANSAC between frames `k` and `k + 1`.
///
/// Samples index into the id-sorted correspondence list, so the result does
/// not depend on insertion order. Each hypothesis that beats the current
/// best is refined on its inliers by minimizing their reprojection error,
/// repeated while the inlier set keeps changing without shrinking. Ties in
/// inlier count keep the earliest hypothesis.
pub fn ransac_interframe(
    tracks: &TrackTable,
    k: usize,
    intrinsics: &StereoIntrinsics,
    cfg: &RansacConfig,
) -> Result<InterframeEstimate, FrontendError> {
    cfg.validate()?;
    let next = k + 1;
    let corr: Vec<Correspondence> = tracks
        .common_tracks(k, next)
        .into_iter()
        .filter_map(|(id, a, b)| {
            let point = camera::triangulate(intrinsics, &a).ok()?;
            let next_point = camera::triangulate(intrinsics, &b).ok()?;
            Some(Correspondence {
                id,
                point,
                next_point,
                next_obs: b.as_vector(),
            })
        })
        .collect();
    let needed = cfg.min_inliers.max(3);
    if corr.len() < needed {
        return Err(FrontendError::InsufficientCorrespondences {
            frame: k,
            next,
            found: corr.len(),
            needed,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed, k));
    let mut best: Option<(Pose, Vec<usize>)> = None;
    for _ in 0..cfg.iterations {
        let i0 = rng.random_range(0..corr.len());
        let mut i1 = rng.random_range(0..corr.len() - 1);
        if i1 >= i0 {
            i1 += 1;
        }
        let (lo, hi) = (i0.min(i1), i0.max(i1));
        let mut i2 = rng.random_range(0..corr.len() - 2);
        if i2 >= lo {
            i2 += 1;
        }
        if i2 >= hi {
            i2 += 1;
        }
        let src = [corr[i0].point, corr[i1].point, corr[i2].point];
        let dst = [corr[i0].next_point, corr[i1].next_point, corr[i2].next_point];
        let Ok(model) = align_three_points(&src, &dst) else {
            continue;
        };
        let inl = inliers_of(intrinsics, &model, &corr, cfg.threshold_px);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some(refine(intrinsics, &corr, model, inl, cfg.threshold_px));
        }
    }
    let best_count = best.as_ref().map_or(0, |(_, b)| b.len());
    let Some((motion, inl)) = best.filter(|(_, b)| b.len() >= cfg.min_inliers) else {
        return Err(FrontendError::NoConsensus {
            frame: k,
            next,
            best: best_count,
            needed: cfg.min_inliers,
        });
    };
    Ok(InterframeEstimate {
        motion,
        inliers: inl.iter().map(|&i| corr[i].id).collect(),
        correspondences: corr.len(),
    })
}
