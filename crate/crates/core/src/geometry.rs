//! Rigid-body transforms on SO(3)/SE(3) and direction representations.
//!
//! Tangent vectors are ordered rotation first: `xi = (omega, rho)`.
//! Pose increments are applied on the left, `T <- exp(xi) * T`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

const SMALL_ANGLE: f64 = 1e-8;

/// Rotations with angle at or above `PI - LOG_SINGULARITY_MARGIN` are rejected by [`se3_log`].
pub const LOG_SINGULARITY_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a rotation (orthonormality error {ortho:.3e}, det {det:.6})")]
    NotARotation { ortho: f64, det: f64 },
    #[error("rotation angle {angle:.9} is too close to pi for the logarithm")]
    LogSingularity { angle: f64 },
    #[error("vector has zero length")]
    ZeroVector,
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// An element of SO(3) stored as an orthonormal matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Accepts `m` if it is orthonormal with determinant +1 to within 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let ortho = (m * m.transpose() - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotARotation { ortho, det });
        }
        Ok(Self(m))
    }

    /// Projects an arbitrary nonsingular matrix onto the closest rotation.
    pub fn from_matrix_orthonormalized(m: Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    pub fn orthonormalized(&self) -> Self {
        Self::from_matrix_orthonormalized(self.0)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        so3_exp(&(axis * (angle / n)))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        so3_log(self).norm()
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.0)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + w * a + w * w * b)
}

/// Rotation vector of `r`, valid over the whole group (angle in `[0, pi]`).
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = r.0;
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let w = vee(&(m - m.transpose()));
    if theta < SMALL_ANGLE {
        return w * (0.5 + theta * theta / 12.0);
    }
    if PI - theta < 1e-4 {
        // Near pi the antisymmetric part vanishes; recover the axis from the symmetric part.
        // (R + R^T)/2 - cos(theta) I = (1 - cos(theta)) a a^T
        let b = ((m + m.transpose()) * 0.5 - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
        let (col, _) = (0..3)
            .map(|i| (i, b[(i, i)]))
            .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
        let mut axis: Vector3<f64> = b.column(col).into();
        axis /= axis.norm();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    w * (theta / (2.0 * theta.sin()))
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let (b, c) = if theta < 1e-5 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + w * b + w * w * c
}

fn so3_left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let c = if theta < 1e-5 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// A rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self::new(r, Vector3::zeros())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Applies only the rotational part, for free vectors such as directions.
    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(v)
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation.compose(&other.rotation),
            self.rotation.rotate(&other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::new(r_inv, -r_inv.rotate(&self.translation))
    }

    /// Left increment `exp(xi) * self`.
    pub fn retract_left(&self, xi: &Vector6<f64>) -> Pose {
        se3_exp(xi).compose(self)
    }

    /// Position of the frame origin in the parent frame, i.e. of the inverse transform.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.inverse().rotate(&self.translation)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.to_quaternion();
        write!(
            f,
            "t=({:.6}, {:.6}, {:.6}) q=({:.6}, {:.6}, {:.6}, {:.6})",
            self.translation.x, self.translation.y, self.translation.z, q.w, q.i, q.j, q.k
        )
    }
}

pub fn transform_point(pose: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    pose.transform_point(p)
}

/// SE(3) exponential of `xi = (omega, rho)`.
pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    let omega = xi.fixed_rows::<3>(0).into_owned();
    let rho = xi.fixed_rows::<3>(3).into_owned();
    Pose::new(so3_exp(&omega), so3_left_jacobian(&omega) * rho)
}

/// Inverse of [`se3_exp`] for rotation angles below `pi - 1e-6`.
pub fn se3_log(pose: &Pose) -> Result<Vector6<f64>, GeometryError> {
    let omega = so3_log(&pose.rotation);
    let angle = omega.norm();
    if angle >= PI - LOG_SINGULARITY_MARGIN {
        return Err(GeometryError::LogSingularity { angle });
    }
    let rho = so3_left_jacobian_inverse(&omega) * pose.translation;
    let mut xi = Vector6::zeros();
    xi.fixed_rows_mut::<3>(0).copy_from(&omega);
    xi.fixed_rows_mut::<3>(3).copy_from(&rho);
    Ok(xi)
}

/// A direction with unit Euclidean norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitVec3(Vector3<f64>);

impl UnitVec3 {
    pub fn new_normalize(v: Vector3<f64>) -> Result<Self, GeometryError> {
        let n = v.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(GeometryError::ZeroVector);
        }
        Ok(Self(v / n))
    }

    /// Wraps `v` without normalizing; the caller guarantees unit norm.
    pub fn new_unchecked(v: Vector3<f64>) -> Self {
        Self(v)
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Vector3<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitVec3) -> f64 {
        self.0.dot(&other.0)
    }

    /// Angle between the two directions in `[0, pi]`.
    pub fn angle_to(&self, other: &UnitVec3) -> f64 {
        self.0.cross(&other.0).norm().atan2(self.0.dot(&other.0))
    }
}

/// Sky direction in a local level frame: compass azimuth (clockwise from
/// North, East = pi/2) and zenith angle measured from Up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AzZen {
    pub azimuth: f64,
    pub zenith: f64,
}

impl AzZen {
    /// Normalizes the azimuth into `[0, 2pi)`; the zenith is kept as given.
    pub fn new(azimuth: f64, zenith: f64) -> Self {
        Self {
            azimuth: wrap_two_pi(azimuth),
            zenith,
        }
    }

    pub fn elevation(&self) -> f64 {
        0.5 * PI - self.zenith
    }
}

/// Result of converting a direction to azimuth/zenith. `degenerate` is set
/// when the direction is vertical and the azimuth is fixed to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AzZenConversion {
    pub angles: AzZen,
    pub degenerate: bool,
}

/// Horizontal norm below which the azimuth is undefined.
pub const AZIMUTH_DEGENERACY_TOL: f64 = 1e-12;

/// ENU unit vector `(sin az sin zen, cos az sin zen, cos zen)`.
pub fn unitvec_from_azzen(a: &AzZen) -> UnitVec3 {
    let (sa, ca) = a.azimuth.sin_cos();
    let (sz, cz) = a.zenith.sin_cos();
    UnitVec3(Vector3::new(sa * sz, ca * sz, cz))
}

pub fn azzen_from_unitvec(v: &UnitVec3) -> AzZenConversion {
    let (e, n, u) = (v.0.x, v.0.y, v.0.z);
    let horizontal = e.hypot(n);
    let zenith = horizontal.atan2(u);
    if horizontal < AZIMUTH_DEGENERACY_TOL {
        return AzZenConversion {
            angles: AzZen {
                azimuth: 0.0,
                zenith,
            },
            degenerate: true,
        };
    }
    AzZenConversion {
        angles: AzZen::new(e.atan2(n), zenith),
        degenerate: false,
    }
}

pub fn wrap_two_pi(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    // rem_euclid can round up to exactly 2pi for tiny negative inputs
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

/// Wraps an angle difference into `[-pi, pi]`.
pub fn wrap_pi(a: f64) -> f64 {
    let w = wrap_two_pi(a + PI) - PI;
    if w < -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pose_close(a: &Pose, b: &Pose, tol: f64) -> bool {
        (a.rotation.matrix() - b.rotation.matrix()).abs().max() < tol
            && (a.translation - b.translation).abs().max() < tol
    }

    #[test]
    fn transform_point_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_point(&Pose::identity(), &p), p);

        let rz = Pose::from_rotation(Rotation::rot_z(PI / 2.0));
        let q = transform_point(&rz, &Vector3::x());
        assert_relative_eq!(q, Vector3::y(), epsilon = 1e-15);

        let t = Pose::from_translation(p);
        assert_eq!(transform_point(&t, &Vector3::zeros()), p);
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(se3_exp(&Vector6::zeros()), Pose::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let xi = Vector6::new(0.0, 0.0, PI / 2.0, 0.0, 0.0, 0.0);
        let pose = se3_exp(&xi);
        // Rodrigues by hand: sin = 1, 1 - cos = 1, so R = I + W + W^2.
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(*pose.rotation.matrix(), expected, epsilon = 1e-15);
        assert_eq!(pose.translation, Vector3::zeros());
    }

    #[test]
    fn log_exp_round_trip_fixed() {
        let xi = Vector6::new(0.1, -0.2, 0.3, 1.0, 2.0, 3.0);
        let back = se3_log(&se3_exp(&xi)).unwrap();
        assert_relative_eq!(back, xi, epsilon = 1e-10);
    }

    #[test]
    fn log_rejects_half_turn() {
        let pose = Pose::from_rotation(Rotation::rot_x(PI));
        assert!(matches!(
            se3_log(&pose),
            Err(GeometryError::LogSingularity { .. })
        ));
        let near = Pose::from_rotation(Rotation::rot_x(PI - 1e-7));
        assert!(se3_log(&near).is_err());
        let ok = Pose::from_rotation(Rotation::rot_x(PI - 1e-5));
        assert!(se3_log(&ok).is_ok());
    }

    #[test]
    fn so3_log_near_pi_recovers_axis() {
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        let angle = PI - 1e-6;
        let r = Rotation::from_axis_angle(&axis, angle);
        let w = so3_log(&r);
        assert_relative_eq!(w, axis * angle, epsilon = 1e-6);
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Rotation::from_matrix(m).is_err());
        let m = Matrix3::identity() * 1.01;
        assert!(Rotation::from_matrix(m).is_err());
    }

    #[test]
    fn orthonormalize_restores_rotation() {
        let r = Rotation::rot_y(0.7).matrix() + Matrix3::repeat(1e-4);
        let fixed = Rotation::from_matrix_orthonormalized(r);
        assert!(Rotation::from_matrix(*fixed.matrix()).is_ok());
    }

    #[test]
    fn azzen_anchors() {
        let north = unitvec_from_azzen(&AzZen::new(0.0, PI / 2.0));
        assert_relative_eq!(*north.as_vector(), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        let up = unitvec_from_azzen(&AzZen::new(1.3, 0.0));
        assert_relative_eq!(*up.as_vector(), Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        let east = unitvec_from_azzen(&AzZen::new(PI / 2.0, PI / 2.0));
        assert_relative_eq!(*east.as_vector(), Vector3::x(), epsilon = 1e-15);

        let conv = azzen_from_unitvec(&UnitVec3::new_unchecked(Vector3::z()));
        assert!(conv.degenerate);
        assert_eq!(conv.angles.azimuth, 0.0);
        assert_eq!(conv.angles.zenith, 0.0);
        let conv = azzen_from_unitvec(&UnitVec3::new_unchecked(-Vector3::z()));
        assert!(conv.degenerate);
        assert_relative_eq!(conv.angles.zenith, PI);
    }

    #[test]
    fn wrap_helpers() {
        assert_relative_eq!(wrap_pi(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-15);
        assert_relative_eq!(wrap_pi(-3.0 * PI / 2.0), PI / 2.0, epsilon = 1e-15);
        assert_eq!(wrap_two_pi(-1e-18), 0.0);
        assert!(wrap_two_pi(-0.1) < 2.0 * PI);
    }

    fn rot_vec() -> impl Strategy<Value = Vector3<f64>> {
        (-1.7f64..1.7, -1.7f64..1.7, -1.7f64..1.7).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    fn any_pose() -> impl Strategy<Value = Pose> {
        (rot_vec(), -10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0)
            .prop_map(|(w, x, y, z)| Pose::new(so3_exp(&w), Vector3::new(x, y, z)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn exp_log_round_trip(w in rot_vec(), x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0) {
            prop_assume!(w.norm() <= 3.0);
            let xi = Vector6::new(w.x, w.y, w.z, x, y, z);
            let back = se3_log(&se3_exp(&xi)).unwrap();
            prop_assert!((back - xi).amax() < 1e-9, "xi {:?} back {:?}", xi, back);
        }

        #[test]
        fn azzen_round_trip(az in 0.0f64..(2.0 * PI), zen in 0.01f64..(PI - 0.01)) {
            let a = AzZen::new(az, zen);
            let back = azzen_from_unitvec(&unitvec_from_azzen(&a));
            prop_assert!(!back.degenerate);
            prop_assert!(wrap_pi(back.angles.azimuth - a.azimuth).abs() < 1e-12);
            prop_assert!((back.angles.zenith - a.zenith).abs() < 1e-12);
            prop_assert!((unitvec_from_azzen(&a).as_vector().norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn compose_inverse_is_identity(p in any_pose()) {
            prop_assert!(pose_close(&p.compose(&p.inverse()), &Pose::identity(), 1e-9));
            prop_assert!(pose_close(&p.inverse().compose(&p), &Pose::identity(), 1e-9));
            prop_assert!(pose_close(&p.inverse().inverse(), &p, 1e-12));
        }

        #[test]
        fn compose_is_associative(a in any_pose(), b in any_pose(), c in any_pose()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(pose_close(&left, &right, 1e-9));
        }

        #[test]
        fn exp_produces_valid_rotation(w in rot_vec()) {
            prop_assert!(Rotation::from_matrix(*so3_exp(&w).matrix()).is_ok());
        }
    }
}
