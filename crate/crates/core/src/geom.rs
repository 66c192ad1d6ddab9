//! Rigid motions in 3D and their twist (exp/log) parameterization.
//!
//! Twists are ordered `(omega, v)`: rotation first, then translation. Updates
//! are applied on the left, `T <- exp(xi) * T`, everywhere in the crate.

use crate::math::{self, hat, Mat3, Mat6, Vec3, Vec6};

/// Rotation angle below which the Rodrigues coefficients use their Taylor
/// expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// `log` refuses rotations whose angle is within this margin of pi.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// Tolerance used by [`RigidTransform::is_valid`].
pub const VALIDITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("rotation angle {angle} is too close to pi for a stable logarithm")]
    AngleNearPi { angle: f64 },
    #[error("rotation is not orthonormal (max deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("transform has non-finite entries")]
    NonFinite,
}

/// Tangent-space coordinates of a rigid motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    /// Rotation part (axis times angle, radians).
    pub omega: Vec3,
    /// Translation part (meters).
    pub v: Vec3,
}

impl Twist {
    pub fn new(omega: Vec3, v: Vec3) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros())
    }

    /// Stacks the twist as `[omega; v]`.
    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }

    pub fn from_vector(x: &Vec6) -> Self {
        Self::new(Vec3::new(x[0], x[1], x[2]), Vec3::new(x[3], x[4], x[5]))
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Element of SE(3): `x -> rotation * x + translation`.
///
/// The rotation is stored as a 3×3 matrix. Construction through the checked
/// constructors guarantees orthonormality and a positive determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

// Coefficients of the Rodrigues-type series, in half-angle forms that avoid
// cancellation for small angles.
struct SeriesCoefficients {
    /// sin(t)/t
    a: f64,
    /// (1 - cos t)/t^2
    b: f64,
    /// (t - sin t)/t^3
    c: f64,
}

fn series(theta: f64) -> SeriesCoefficients {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE {
        SeriesCoefficients {
            a: 1.0 - t2 / 6.0,
            b: 0.5 - t2 / 24.0,
            c: 1.0 / 6.0 - t2 / 120.0,
        }
    } else {
        let half = math::sin(0.5 * theta);
        let s = math::sin(theta);
        SeriesCoefficients {
            a: s / theta,
            b: 2.0 * half * half / t2,
            c: (theta - s) / (t2 * theta),
        }
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform after checking the rotation invariants at
    /// [`VALIDITY_TOL`].
    pub fn from_parts(rotation: Mat3, translation: Vec3) -> Result<Self, GeomError> {
        let t = Self::from_parts_unchecked(rotation, translation);
        t.check(VALIDITY_TOL)?;
        Ok(t)
    }

    /// Builds a transform without validating the rotation. Callers are
    /// responsible for orthonormality.
    pub fn from_parts_unchecked(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Pure rotation about `axis` (need not be normalized) by `angle` radians.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = math::norm(axis);
        if n == 0.0 {
            return Self::identity();
        }
        Self::exp(&Twist::new(axis * (angle / n), Vec3::zeros()))
    }

    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = (math::sin(angle), math::cos(angle));
        #[rustfmt::skip]
        let r = Mat3::new(
            c, -s, 0.0,
            s, c, 0.0,
            0.0, 0.0, 1.0,
        );
        Self::from_parts_unchecked(r, Vec3::zeros())
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotates a direction (normals, displacement vectors).
    #[inline]
    pub fn rotate(&self, d: &Vec3) -> Vec3 {
        self.rotation * d
    }

    /// SE(3) exponential map.
    pub fn exp(xi: &Twist) -> RigidTransform {
        let theta = math::norm(&xi.omega);
        let k = series(theta);
        let w = hat(&xi.omega);
        let w2 = w * w;
        let rotation = Mat3::identity() + w * k.a + w2 * k.b;
        let v = Mat3::identity() + w * k.b + w2 * k.c;
        RigidTransform {
            rotation,
            translation: v * xi.v,
        }
    }

    /// SE(3) logarithm, defined for rotation angles below `pi - NEAR_PI_MARGIN`.
    pub fn log(&self) -> Result<Twist, GeomError> {
        let r = &self.rotation;
        let axis_sin = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        let s = math::norm(&axis_sin);
        let c = 0.5 * (r.trace() - 1.0);
        let theta = math::atan2(s, c);
        if !theta.is_finite() {
            return Err(GeomError::NonFinite);
        }
        if theta >= core::f64::consts::PI - NEAR_PI_MARGIN {
            return Err(GeomError::AngleNearPi { angle: theta });
        }
        let omega = if theta < SMALL_ANGLE {
            axis_sin * (1.0 + theta * theta / 6.0)
        } else {
            axis_sin * (theta / s)
        };
        let w = hat(&omega);
        // V^{-1} = I - W/2 + coef W^2 with coef = (1 - (t/2) cot(t/2)) / t^2
        let coef = if theta < SMALL_ANGLE {
            1.0 / 12.0 + theta * theta / 720.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half * math::cos(half) / math::sin(half)) / (theta * theta)
        };
        let v_inv = Mat3::identity() - w * 0.5 + w * w * coef;
        Ok(Twist::new(omega, v_inv * self.translation))
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let s = 0.5
            * math::norm(&Vec3::new(
                r[(2, 1)] - r[(1, 2)],
                r[(0, 2)] - r[(2, 0)],
                r[(1, 0)] - r[(0, 1)],
            ));
        math::atan2(s, 0.5 * (r.trace() - 1.0))
    }

    /// Largest absolute entry of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity())
            .iter()
            .fold(0.0, |m, x| f64::max(m, math::abs(*x)))
    }

    pub fn check(&self, tol: f64) -> Result<(), GeomError> {
        let finite = self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(GeomError::NonFinite);
        }
        let deviation = f64::max(
            self.orthonormality_error(),
            math::abs(self.rotation.determinant() - 1.0),
        );
        if deviation >= tol {
            return Err(GeomError::NotOrthonormal { deviation });
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.check(VALIDITY_TOL).is_ok()
    }

    /// Replaces the rotation with its closest rotation matrix (polar
    /// decomposition `U V^T`, determinant forced to +1).
    pub fn reorthonormalized(&self) -> RigidTransform {
        RigidTransform {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Adjoint in `(omega, v)` ordering: `exp(Ad * xi) = T exp(xi) T^-1`.
    pub fn adjoint(&self) -> Mat6 {
        let r = &self.rotation;
        let tr = hat(&self.translation) * r;
        let mut ad = Mat6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&tr);
        ad
    }

    /// Homogeneous 4×4 matrix, row-major.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Reads a row-major homogeneous matrix without validation.
    pub fn from_row_major_unchecked(m: &[f64; 16]) -> RigidTransform {
        #[rustfmt::skip]
        let r = Mat3::new(
            m[0], m[1], m[2],
            m[4], m[5], m[6],
            m[8], m[9], m[10],
        );
        RigidTransform::from_parts_unchecked(r, Vec3::new(m[3], m[7], m[11]))
    }
}

/// Closest proper rotation to `m` in the Frobenius sense.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut d = Mat3::identity();
        d[(2, 2)] = -1.0;
        // singular values come sorted descending; flip the weakest direction
        r = u * d * vt;
    }
    r
}

/// Left Jacobian of SE(3) in `(omega, v)` ordering:
/// `exp(xi + d) ~= exp(J(xi) d) exp(xi)`.
pub fn left_jacobian(xi: &Twist) -> Mat6 {
    let theta = math::norm(&xi.omega);
    let k = series(theta);
    let w = hat(&xi.omega);
    let w2 = w * w;
    let j = Mat3::identity() + w * k.b + w2 * k.c;

    let p = hat(&xi.v);
    let t2 = theta * theta;
    // coefficients of the translational coupling block
    let (c2, c3) = if theta < 1e-4 {
        (1.0 / 24.0 - t2 / 720.0, 1.0 / 120.0 - t2 / 2520.0)
    } else {
        let (s, c) = (math::sin(theta), math::cos(theta));
        let t4 = t2 * t2;
        (
            (t2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let wp = w * p;
    let pw = p * w;
    let wpw = wp * w;
    let q = p * 0.5
        + (wp + pw + wpw) * k.c
        + (w2 * p + pw * w - wpw * 3.0) * c2
        + (wpw * w + w * wpw) * c3;

    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out
}
