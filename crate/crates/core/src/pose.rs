//! Rigid-body transform algebra.
//!
//! Rotations are unit quaternions kept in a canonical hemisphere (`w >= 0`, ties
//! broken by the first nonzero vector component being positive), so two equal
//! rotations always compare equal component-wise. Poses compose as homogeneous
//! transforms: `a.compose(&b)` applies `b` first, then `a`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("interpolation parameter {0} outside [0, 1]")]
    ParameterOutOfRange(f64),
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
}

/// Unit quaternion rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl From<Rotation> for [f64; 4] {
    fn from(r: Rotation) -> Self {
        r.wxyz()
    }
}

impl TryFrom<[f64; 4]> for Rotation {
    type Error = PoseError;

    fn try_from(q: [f64; 4]) -> Result<Self, Self::Error> {
        Rotation::from_wxyz(q[0], q[1], q[2], q[3])
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes and canonicalizes an arbitrary quaternion. Input that is
    /// already canonical and unit to within 1e-12 is kept bit for bit, so
    /// stored rotations round-trip exactly.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self, PoseError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(PoseError::DegenerateQuaternion);
        }
        let raw = Self { w, x, y, z };
        // already unit: keep the bits, a sign flip is exact
        if (n - 1.0).abs() <= 1e-12 {
            return Ok(raw.canonical());
        }
        Ok(Self { w: w / n, x: x / n, y: y / n, z: z / n }.canonical())
    }

    fn canonical(self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            self
        }
    }

    fn renormalized(self) -> Self {
        let n = self.norm();
        Self { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }.canonical()
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self { w: c, x: a.x * s, y: a.y * s, z: a.z * s }.renormalized()
    }

    /// Exponential map from a rotation vector (axis scaled by angle, radians).
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    /// Logarithm map; the returned angle lies in `[0, pi]`.
    pub fn to_rotation_vector(&self) -> Vec3 {
        let v = Vec3::new(self.x, self.y, self.z);
        let s = v.norm();
        if s < 1e-300 {
            return Vec3::zeros();
        }
        let angle = 2.0 * s.atan2(self.w);
        v * (angle / s)
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), angle)
    }

    pub fn wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        let (a, b) = (self, other);
        Rotation {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
        .renormalized()
    }

    pub fn inverse(&self) -> Rotation {
        Rotation { w: self.w, x: -self.x, y: -self.y, z: -self.z }.canonical()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let q = Vec3::new(self.x, self.y, self.z);
        let t = 2.0 * q.cross(v);
        v + self.w * t + q.cross(&t)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let Rotation { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Converts an orthonormal matrix (Shepperd's method).
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self, PoseError> {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Self::from_wxyz(w, x, y, z)
    }

    /// Heading angle of the rotated x axis projected on the xy plane.
    pub fn yaw(&self) -> f64 {
        let fx = self.rotate(&Vec3::x());
        fx.y.atan2(fx.x)
    }
}

/// Angle of the relative rotation between `a` and `b`, in `[0, pi]`.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.inverse().compose(b);
    let v = Vec3::new(rel.x, rel.y, rel.z).norm();
    (2.0 * v.atan2(rel.w.abs())).min(PI)
}

/// Rigid transform: rotation followed by translation (meters).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: Rotation::IDENTITY,
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Rotation::IDENTITY, translation: t }
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self { rotation: r, translation: Vec3::zeros() }
    }

    /// Planar placement: position plus heading about world z.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(Rotation::rot_z(yaw), Vec3::new(x, y, z))
    }

    /// `self ∘ other`: apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.translation + self.rotation.rotate(&other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose { rotation: r, translation: -r.rotate(&self.translation) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.translation + self.rotation.rotate(p)
    }

    /// Transform taking `self` to `other`, expressed in `self`'s frame.
    pub fn delta_to(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.to_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `[x, y, z, qw, qx, qy, qz]`.
    pub fn to_array7(&self) -> [f64; 7] {
        let t = &self.translation;
        let q = self.rotation.wxyz();
        [t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
    }

    pub fn from_array7(a: &[f64]) -> Result<Self, PoseError> {
        Ok(Pose {
            rotation: Rotation::from_wxyz(a[3], a[4], a[5], a[6])?,
            translation: Vec3::new(a[0], a[1], a[2]),
        })
    }

    /// Translation lerp plus shortest-arc rotation slerp. Endpoints are returned
    /// unchanged for `u == 0` and `u == 1`.
    pub fn interpolate(&self, other: &Pose, u: f64) -> Result<Pose, PoseError> {
        if !(0.0..=1.0).contains(&u) {
            return Err(PoseError::ParameterOutOfRange(u));
        }
        if u == 0.0 {
            return Ok(*self);
        }
        if u == 1.0 {
            return Ok(*other);
        }
        let translation = self.translation + (other.translation - self.translation) * u;
        let rel = self.rotation.inverse().compose(&other.rotation);
        let step = Rotation::from_rotation_vector(&(rel.to_rotation_vector() * u));
        Ok(Pose { rotation: self.rotation.compose(&step), translation })
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        geodesic_distance(&self.rotation, &other.rotation)
    }

    /// First two rotation-matrix columns: the continuous 6D rotation encoding.
    pub fn rotation_6d(&self) -> [f64; 6] {
        let m = self.rotation.to_matrix();
        [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    const EPS: f64 = crate::tolerance::ALGEBRA;

    fn assert_pose_eq(a: &Pose, b: &Pose) {
        assert!(a.translation_distance(b) < EPS, "{a:?} vs {b:?}");
        assert!(a.rotation_distance(b) < EPS, "{a:?} vs {b:?}");
    }

    #[test]
    fn canonical_hemisphere() {
        let q = Rotation::from_wxyz(-0.5, 0.5, -0.5, 0.5).unwrap();
        assert!(q.wxyz()[0] > 0.0);
        let tie = Rotation::from_wxyz(0.0, -1.0, 0.0, 0.0).unwrap();
        assert_eq!(tie.wxyz(), [0.0, 1.0, 0.0, 0.0]);
        let tie = Rotation::from_wxyz(0.0, 0.0, 0.0, -2.0).unwrap();
        assert_eq!(tie.wxyz(), [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(Rotation::from_wxyz(0.0, 0.0, 0.0, 0.0), Err(PoseError::DegenerateQuaternion));
    }

    #[test]
    fn compose_identity_and_inverse() {
        let t = Pose::new(Rotation::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7), Vec3::new(0.3, -1.0, 2.0));
        assert_pose_eq(&Pose::IDENTITY.compose(&t), &t);
        assert_pose_eq(&t.compose(&t.inverse()), &Pose::IDENTITY);
    }

    #[test]
    fn compose_planar_example() {
        // [Rz90 | (1,0,0)] * [Rz90 | (0,1,0)] = [Rz180 | (1,0,0) + Rz90 (0,1,0)] = [Rz180 | (0,0,0)]
        let a = Pose::new(Rotation::rot_z(FRAC_PI_2), Vec3::new(1.0, 0.0, 0.0));
        let b = Pose::new(Rotation::rot_z(FRAC_PI_2), Vec3::new(0.0, 1.0, 0.0));
        let c = a.compose(&b);
        let oracle = a.to_matrix() * b.to_matrix();
        assert!((c.to_matrix() - oracle).abs().max() < EPS);
        assert_pose_eq(&c, &Pose::from_rotation(Rotation::rot_z(PI)));
        // reversed order lands at (0, 2, 0)
        assert_pose_eq(&b.compose(&a), &Pose::new(Rotation::rot_z(PI), Vec3::new(0.0, 2.0, 0.0)));
    }

    #[test]
    fn inverse_examples() {
        assert_pose_eq(&Pose::IDENTITY.inverse(), &Pose::IDENTITY);
        let t = Pose::from_translation(Vec3::new(1.0, 2.0, 3.0));
        assert_pose_eq(&t.inverse(), &Pose::from_translation(Vec3::new(-1.0, -2.0, -3.0)));
    }

    #[test]
    fn interpolate_examples() {
        let a = Pose::IDENTITY;
        let b = Pose::from_translation(Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(a.interpolate(&b, 0.0).unwrap(), a);
        assert_eq!(a.interpolate(&b, 1.0).unwrap(), b);
        assert_pose_eq(&a.interpolate(&b, 0.5).unwrap(), &Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)));

        let r0 = Pose::from_rotation(Rotation::rot_z(0.0));
        let r90 = Pose::from_rotation(Rotation::rot_z(FRAC_PI_2));
        let mid = r0.interpolate(&r90, 0.5).unwrap();
        assert_pose_eq(&mid, &Pose::from_rotation(Rotation::rot_z(FRAC_PI_2 / 2.0)));

        assert_eq!(a.interpolate(&b, 1.5), Err(PoseError::ParameterOutOfRange(1.5)));
        assert_eq!(a.interpolate(&b, -0.1), Err(PoseError::ParameterOutOfRange(-0.1)));
    }

    #[test]
    fn interpolate_takes_short_arc() {
        let a = Pose::from_rotation(Rotation::rot_z(170f64.to_radians()));
        let b = Pose::from_rotation(Rotation::rot_z(-170f64.to_radians()));
        let mid = a.interpolate(&b, 0.5).unwrap();
        assert!(mid.rotation_distance(&Pose::from_rotation(Rotation::rot_z(PI))) < EPS);
    }

    #[test]
    fn interpolate_antipodal_is_deterministic() {
        let a = Pose::IDENTITY;
        let b = Pose::from_rotation(Rotation::rot_x(PI));
        let m1 = a.interpolate(&b, 0.5).unwrap();
        let m2 = a.interpolate(&b, 0.5).unwrap();
        assert_eq!(m1, m2);
        assert!((m1.rotation_distance(&a) - FRAC_PI_2).abs() < EPS);
        assert!(m1.rotation_distance(&Pose::from_rotation(Rotation::rot_x(FRAC_PI_2))) < EPS);
    }

    #[test]
    fn geodesic_examples() {
        let r = Rotation::from_axis_angle(&Vec3::new(0.2, -0.4, 1.0), 1.1);
        assert!(geodesic_distance(&r, &r) < EPS);
        assert!((geodesic_distance(&Rotation::rot_z(0.0), &Rotation::rot_z(FRAC_PI_2)) - FRAC_PI_2).abs() < EPS);
        // -q is canonicalized back to q
        let [w, x, y, z] = r.wxyz();
        let neg = Rotation::from_wxyz(-w, -x, -y, -z).unwrap();
        assert!(geodesic_distance(&r, &neg) < EPS);
    }

    #[test]
    fn matrix_round_trip() {
        for angle in [0.0, 0.3, 1.7, 3.0, PI] {
            for axis in [Vec3::x(), Vec3::new(1.0, 1.0, 0.0), Vec3::new(-0.3, 0.2, 0.9)] {
                let r = Rotation::from_axis_angle(&axis, angle);
                let back = Rotation::from_matrix(&r.to_matrix()).unwrap();
                assert!(geodesic_distance(&r, &back) < 1e-8, "{axis:?} {angle}");
            }
        }
    }

    #[test]
    fn rotation_vector_round_trip() {
        let v = Vec3::new(0.3, -1.2, 0.5);
        let r = Rotation::from_rotation_vector(&v);
        assert!((r.to_rotation_vector() - v).norm() < EPS);
    }

    #[test]
    fn serde_round_trip() {
        let p = Pose::new(Rotation::from_axis_angle(&Vec3::new(1.0, 0.5, 0.1), 0.9), Vec3::new(0.1, 0.2, 0.3));
        let s = serde_json::to_string(&p).unwrap();
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
    }
}
