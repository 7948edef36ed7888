//! Rigid-body geometry: SE(3) poses with frame bookkeeping, the log/exp maps,
//! and point clouds.
//!
//! Twists are ordered rotation first, `(ωx, ωy, ωz, ρx, ρy, ρz)`, and every
//! 6×6 matrix in the crate (covariances, Jacobians) follows the same order.

use std::fmt;

use nalgebra::{
    Isometry3, Matrix3, Matrix6, Point3, Quaternion, Translation3, UnitQuaternion, Vector3, Vector6,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("frame mismatch: expected `{expected}`, found `{found}`")]
    FrameMismatch { expected: FrameId, found: FrameId },
    #[error("rotation angle {angle} rad is outside the log domain (must be below pi - 1e-6)")]
    LogDomain { angle: f64 },
    #[error("non-finite coordinate in point {index}")]
    NonFinite { index: usize },
}

/// Name of a coordinate frame, e.g. `"s0/map"` or `"s0/v12"`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct FrameId(String);

impl FrameId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    /// Map frame of a session.
    pub fn map(session: &str) -> Self {
        Self(format!("{session}/map"))
    }

    /// Body frame of a pose-graph vertex.
    pub fn vertex(session: &str, id: u64) -> Self {
        Self(format!("{session}/v{id}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FrameId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Element of se(3), rotation part first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist<T: Real = f64>(pub Vector6<T>);

impl<T: Real> Twist<T> {
    pub fn new(rotation: Vector3<T>, translation: Vector3<T>) -> Self {
        Self(Vector6::new(
            rotation.x,
            rotation.y,
            rotation.z,
            translation.x,
            translation.y,
            translation.z,
        ))
    }

    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn rotation(&self) -> Vector3<T> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<T> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> T {
        self.0.norm()
    }
}

/// Rigid transform `parent ← child`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose<T: Real = f64> {
    pub rotation: UnitQuaternion<T>,
    pub translation: Vector3<T>,
    pub parent: FrameId,
    pub child: FrameId,
}

impl<T: Real> Pose<T> {
    pub fn identity(parent: FrameId, child: FrameId) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            parent,
            child,
        }
    }

    pub fn from_isometry(iso: &Isometry3<T>, parent: FrameId, child: FrameId) -> Self {
        Self {
            rotation: iso.rotation,
            translation: iso.translation.vector,
            parent,
            child,
        }
    }

    pub fn isometry(&self) -> Isometry3<T> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    /// Group product `self · other`; requires `self.child == other.parent`.
    pub fn compose(&self, other: &Pose<T>) -> Result<Pose<T>, GeometryError> {
        if self.child != other.parent {
            return Err(GeometryError::FrameMismatch {
                expected: self.child.clone(),
                found: other.parent.clone(),
            });
        }
        let rotation = renormalize(self.rotation * other.rotation);
        Ok(Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
            parent: self.parent.clone(),
            child: other.child.clone(),
        })
    }

    pub fn inverse(&self) -> Pose<T> {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
            parent: self.child.clone(),
            child: self.parent.clone(),
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> T {
        quat_angle(&self.rotation)
    }

    pub fn log(&self) -> Result<Twist<T>, GeometryError> {
        let angle = self.angle();
        if angle >= T::pi() - T::lit(1e-6) {
            return Err(GeometryError::LogDomain {
                angle: angle.as_f64(),
            });
        }
        Ok(Twist(log_iso(&self.isometry())))
    }

    pub fn exp(twist: &Twist<T>, parent: FrameId, child: FrameId) -> Self {
        Self::from_isometry(&exp_iso(&twist.0), parent, child)
    }

    pub fn transform_point(&self, p: &Point3<T>) -> Point3<T> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Relabels the frames without touching the transform.
    pub fn with_frames(mut self, parent: FrameId, child: FrameId) -> Self {
        self.parent = parent;
        self.child = child;
        self
    }

    /// True when transforms agree within `tol` (frames are ignored).
    pub fn approx_eq(&self, other: &Pose<T>, tol: T) -> bool {
        let d = self.isometry().inverse() * other.isometry();
        quat_angle(&d.rotation) <= tol && d.translation.vector.norm() <= tol
    }

    /// `[qw, qx, qy, qz, tx, ty, tz]`, the on-disk layout.
    pub fn to_array(&self) -> [T; 7] {
        let q = self.rotation.quaternion();
        [
            q.w,
            q.i,
            q.j,
            q.k,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_array(a: [T; 7], parent: FrameId, child: FrameId) -> Self {
        let q = UnitQuaternion::new_normalize(Quaternion::new(a[0], a[1], a[2], a[3]));
        Self {
            rotation: q,
            translation: Vector3::new(a[4], a[5], a[6]),
            parent,
            child,
        }
    }
}

pub fn se3_compose<T: Real>(a: &Pose<T>, b: &Pose<T>) -> Result<Pose<T>, GeometryError> {
    a.compose(b)
}

pub fn se3_log<T: Real>(a: &Pose<T>) -> Result<Twist<T>, GeometryError> {
    a.log()
}

pub fn se3_exp<T: Real>(t: &Twist<T>, parent: FrameId, child: FrameId) -> Pose<T> {
    Pose::exp(t, parent, child)
}

/// Applies `p` to every point of `c`; output is expressed in `p.parent`.
pub fn transform_points<T: Real>(
    p: &Pose<T>,
    c: &PointCloud<T>,
) -> Result<PointCloud<T>, GeometryError> {
    if c.frame != p.child {
        return Err(GeometryError::FrameMismatch {
            expected: p.child.clone(),
            found: c.frame.clone(),
        });
    }
    let iso = p.isometry();
    Ok(PointCloud {
        points: c.points.iter().map(|x| iso * x).collect(),
        frame: p.parent.clone(),
    })
}

fn renormalize<T: Real>(q: UnitQuaternion<T>) -> UnitQuaternion<T> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Skew-symmetric matrix with `hat(a) * b == a × b`.
pub fn hat<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Rotation angle in `[0, π]`, accurate for small angles.
pub fn quat_angle<T: Real>(q: &UnitQuaternion<T>) -> T {
    let q = q.quaternion();
    let n = q.imag().norm();
    T::lit(2.0) * n.atan2(q.w.abs())
}

/// Rotation vector of a unit quaternion (angle in `[0, π]`).
pub fn so3_log<T: Real>(q: &UnitQuaternion<T>) -> Vector3<T> {
    let q = q.quaternion();
    // Use the representative with w >= 0 so the angle stays in [0, π].
    let (w, v) = if q.w < T::zero() {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    if n < T::lit(1e-8) {
        // atan2(n, w) / n ≈ 1 / w for tiny n
        return v * (T::lit(2.0) / w);
    }
    v * (T::lit(2.0) * n.atan2(w) / n)
}

pub fn so3_exp<T: Real>(w: &Vector3<T>) -> UnitQuaternion<T> {
    let theta = w.norm();
    let half = theta * T::lit(0.5);
    let sinc_half = if theta < T::small_angle() {
        // sin(θ/2)/θ
        T::lit(0.5) - theta * theta / T::lit(48.0)
    } else {
        half.sin() / theta
    };
    UnitQuaternion::new_unchecked(Quaternion::new(
        half.cos(),
        w.x * sinc_half,
        w.y * sinc_half,
        w.z * sinc_half,
    ))
}

/// SO(3) left Jacobian; also the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (b, c) = if theta < T::small_angle() {
        (
            T::lit(0.5) - theta2 / T::lit(24.0),
            T::lit(1.0 / 6.0) - theta2 / T::lit(120.0),
        )
    } else {
        (
            {
                let s = (theta * T::lit(0.5)).sin();
                T::lit(2.0) * s * s / theta2
            },
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let wx = hat(w);
    Matrix3::identity() + wx * b + wx * wx * c
}

pub fn so3_left_jacobian_inv<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let d = if theta < T::small_angle() {
        T::lit(1.0 / 12.0) + theta2 / T::lit(720.0)
    } else {
        // (1 - (θ/2)·cot(θ/2)) / θ², avoiding the cancellation in 1 - cos θ
        let half = theta * T::lit(0.5);
        (T::one() - half * half.cos() / half.sin()) / theta2
    };
    let wx = hat(w);
    Matrix3::identity() - wx * T::lit(0.5) + wx * wx * d
}

/// Log map on raw isometries, without the domain check of [`Pose::log`].
pub fn log_iso<T: Real>(iso: &Isometry3<T>) -> Vector6<T> {
    let w = so3_log(&iso.rotation);
    let rho = so3_left_jacobian_inv(&w) * iso.translation.vector;
    Vector6::new(w.x, w.y, w.z, rho.x, rho.y, rho.z)
}

pub fn exp_iso<T: Real>(xi: &Vector6<T>) -> Isometry3<T> {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let rho = Vector3::new(xi[3], xi[4], xi[5]);
    let t = so3_left_jacobian(&w) * rho;
    Isometry3::from_parts(Translation3::from(t), so3_exp(&w))
}

/// Adjoint of `iso` acting on rotation-first twists: `T·exp(ξ)·T⁻¹ = exp(Ad_T ξ)`.
pub fn adjoint<T: Real>(iso: &Isometry3<T>) -> Matrix6<T> {
    let r = iso.rotation.to_rotation_matrix().into_inner();
    let t = iso.translation.vector;
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(hat(&t) * r));
    ad
}

/// Coupling block of the SE(3) left Jacobian (Barfoot's `Q(ρ, φ)`).
fn se3_q_block<T: Real>(w: &Vector3<T>, rho: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (c1, c2, c3) = if theta < T::lit(1e-2) {
        (
            T::lit(1.0 / 6.0) - theta2 / T::lit(120.0),
            T::lit(1.0 / 24.0) - theta2 / T::lit(720.0),
            T::lit(1.0 / 120.0) - theta2 / T::lit(2520.0),
        )
    } else {
        let (s, c) = (theta.sin(), theta.cos());
        let theta3 = theta2 * theta;
        (
            (theta - s) / theta3,
            (theta2 + T::lit(2.0) * c - T::lit(2.0)) / (T::lit(2.0) * theta2 * theta2),
            (T::lit(2.0) * theta - T::lit(3.0) * s + theta * c) / (T::lit(2.0) * theta2 * theta3),
        )
    };
    let wx = hat(w);
    let px = hat(rho);
    let wp = wx * px;
    let pw = px * wx;
    let wpw = wp * wx;
    px * T::lit(0.5)
        + (wp + pw + wpw) * c1
        + (wx * wp + pw * wx - wpw * T::lit(3.0)) * c2
        + (wpw * wx + wx * wpw) * c3
}

/// Inverse of the SE(3) right Jacobian: `log(exp(ξ)·exp(δ)) ≈ ξ + Jr⁻¹(ξ)·δ`.
pub fn se3_right_jacobian_inv<T: Real>(xi: &Vector6<T>) -> Matrix6<T> {
    // Jr(ξ) = Jl(−ξ)
    let w = -Vector3::new(xi[0], xi[1], xi[2]);
    let rho = -Vector3::new(xi[3], xi[4], xi[5]);
    let j_inv = so3_left_jacobian_inv(&w);
    let q = se3_q_block(&w, &rho);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-(j_inv * q * j_inv)));
    out
}

/// A set of 3D points expressed in one frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud<T: Real = f64> {
    pub points: Vec<Point3<T>>,
    pub frame: FrameId,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point3<T>>, frame: FrameId) -> Self {
        Self { points, frame }
    }

    pub fn empty(frame: FrameId) -> Self {
        Self {
            points: Vec::new(),
            frame,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        match self
            .points
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            Some(index) => Err(GeometryError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn aabb(&self) -> Option<Aabb<T>> {
        let mut it = self.points.iter();
        let first = *it.next()?;
        let mut bb = Aabb {
            min: first,
            max: first,
        };
        for p in it {
            bb.extend(p);
        }
        Some(bb)
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<T: Real = f64> {
    pub min: Point3<T>,
    pub max: Point3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn extend(&mut self, p: &Point3<T>) {
        for i in 0..3 {
            if p[i] < self.min[i] {
                self.min[i] = p[i];
            }
            if p[i] > self.max[i] {
                self.max[i] = p[i];
            }
        }
    }

    pub fn union(&self, other: &Aabb<T>) -> Aabb<T> {
        let mut out = *self;
        out.extend(&other.min);
        out.extend(&other.max);
        out
    }

    pub fn contains(&self, p: &Point3<T>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Box of `iso · self`, i.e. the AABB of the eight transformed corners.
    pub fn transformed(&self, iso: &Isometry3<T>) -> Aabb<T> {
        let mut out: Option<Aabb<T>> = None;
        for i in 0..8 {
            let c = Point3::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            );
            let p = iso * c;
            match out.as_mut() {
                Some(bb) => bb.extend(&p),
                None => out = Some(Aabb { min: p, max: p }),
            }
        }
        out.expect("eight corners")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn f(s: &str) -> FrameId {
        FrameId::new(s)
    }

    fn trans(x: f64, y: f64, z: f64, p: &str, c: &str) -> Pose {
        let mut t = Pose::identity(f(p), f(c));
        t.translation = Vector3::new(x, y, z);
        t
    }

    fn rot_z(angle: f64, p: &str, c: &str) -> Pose {
        let mut t = Pose::identity(f(p), f(c));
        t.rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle);
        t
    }

    #[test]
    fn compose_identity() {
        let a = Pose::<f64>::identity(f("a"), f("b"));
        let b = Pose::<f64>::identity(f("b"), f("c"));
        let c = a.compose(&b).unwrap();
        assert!(c.approx_eq(&Pose::identity(f("a"), f("c")), 0.0));
        assert_eq!(c.parent, f("a"));
        assert_eq!(c.child, f("c"));
    }

    #[test]
    fn compose_translations_commute() {
        let c = trans(1.0, 0.0, 0.0, "a", "b")
            .compose(&trans(0.0, 2.0, 0.0, "b", "c"))
            .unwrap();
        assert_eq!(c.translation, Vector3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn compose_rotation_then_translation() {
        let c = rot_z(FRAC_PI_2, "a", "b")
            .compose(&trans(1.0, 0.0, 0.0, "b", "c"))
            .unwrap();
        assert!((c.translation - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((c.angle() - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn compose_rejects_frame_mismatch() {
        let err = trans(1.0, 0.0, 0.0, "a", "b")
            .compose(&trans(0.0, 1.0, 0.0, "x", "c"))
            .unwrap_err();
        assert!(matches!(err, GeometryError::FrameMismatch { .. }));
    }

    #[test]
    fn log_of_identity_and_translation() {
        let id = Pose::<f64>::identity(f("a"), f("b"));
        assert_eq!(id.log().unwrap().0, Vector6::zeros());
        let t = trans(0.1, 0.0, 0.0, "a", "b").log().unwrap();
        assert_eq!(t.0, Vector6::new(0.0, 0.0, 0.0, 0.1, 0.0, 0.0));
    }

    #[test]
    fn log_exp_roundtrip_rotz30_trans() {
        let p = rot_z(30f64.to_radians(), "a", "b")
            .compose(&trans(0.2, 0.0, 0.0, "b", "c"))
            .unwrap();
        let back = Pose::exp(&p.log().unwrap(), f("a"), f("c"));
        assert!(back.approx_eq(&p, 1e-9));
    }

    #[test]
    fn log_rejects_half_turn() {
        let p = rot_z(std::f64::consts::PI, "a", "b");
        assert!(matches!(p.log(), Err(GeometryError::LogDomain { .. })));
    }

    #[test]
    fn transform_points_cases() {
        let c = PointCloud::new(vec![Point3::new(0.3, -1.0, 2.0)], f("b"));
        let same = transform_points(&Pose::identity(f("a"), f("b")), &c).unwrap();
        assert_eq!(same.points, c.points);
        assert_eq!(same.frame, f("a"));

        let up = transform_points(
            &trans(0.0, 0.0, 1.0, "a", "b"),
            &PointCloud::new(vec![Point3::origin()], f("b")),
        )
        .unwrap();
        assert_eq!(up.points[0], Point3::new(0.0, 0.0, 1.0));

        let r = transform_points(
            &rot_z(FRAC_PI_2, "a", "b"),
            &PointCloud::new(vec![Point3::new(1.0, 0.0, 0.0)], f("b")),
        )
        .unwrap();
        assert!((r.points[0] - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-12);

        assert!(transform_points(&rot_z(0.1, "a", "x"), &c).is_err());
    }

    #[test]
    fn roundtrip_f32() {
        let xi = Vector6::new(0.1f32, -0.2, 0.3, 1.0, 2.0, -0.5);
        let back = log_iso(&exp_iso(&xi));
        assert!((back - xi).norm() < 1e-5);
    }

    #[test]
    fn adjoint_conjugation() {
        let t = exp_iso(&Vector6::new(0.3, -0.1, 0.7, 1.0, -2.0, 0.5));
        let xi = Vector6::new(0.05, 0.02, -0.04, 0.1, 0.2, 0.3);
        let lhs = t * exp_iso(&xi) * t.inverse();
        let rhs = exp_iso(&(adjoint(&t) * xi));
        assert!((log_iso(&(lhs.inverse() * rhs))).norm() < 1e-12);
    }

    #[test]
    fn right_jacobian_inverse_matches_finite_difference() {
        let xi = Vector6::new(0.4, -0.3, 0.9, 0.5, -1.2, 2.0);
        let e = exp_iso(&xi);
        let jinv = se3_right_jacobian_inv(&xi);
        let h = 1e-6;
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = log_iso(&(e * exp_iso(&d)));
            let minus = log_iso(&(e * exp_iso(&(-d))));
            let col = (plus - minus) / (2.0 * h);
            assert!((col - jinv.column(k)).norm() < 1e-7, "column {k}");
        }
    }

    fn arb_twist(max_angle: f64) -> impl Strategy<Value = Vector6<f64>> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            0.0..max_angle,
            prop::array::uniform3(-5.0f64..5.0),
        )
            .prop_map(|(axis, angle, t)| {
                let a = Vector3::from(axis);
                let a = if a.norm() < 1e-3 {
                    Vector3::x()
                } else {
                    a.normalize()
                };
                let w = a * angle;
                Vector6::new(w.x, w.y, w.z, t[0], t[1], t[2])
            })
    }

    fn pose_of(xi: &Vector6<f64>, p: &str, c: &str) -> Pose {
        Pose::from_isometry(&exp_iso(xi), f(p), f(c))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn log_exp_roundtrip(xi in arb_twist(3.0)) {
            let p = pose_of(&xi, "a", "b");
            let back = Pose::exp(&p.log().unwrap(), f("a"), f("b"));
            prop_assert!(back.approx_eq(&p, 1e-9));
        }
    }

    proptest! {
        #[test]
        fn group_axioms(a in arb_twist(3.0), b in arb_twist(3.0), c in arb_twist(3.0)) {
            let (a, b, c) = (pose_of(&a, "w", "x"), pose_of(&b, "x", "y"), pose_of(&c, "y", "z"));
            let left = a.compose(&b).unwrap().compose(&c).unwrap();
            let right = a.compose(&b.compose(&c).unwrap()).unwrap();
            prop_assert!(left.approx_eq(&right, 1e-9));
            prop_assert!(a.inverse().inverse().approx_eq(&a, 1e-9));
            let id = a.compose(&a.inverse()).unwrap();
            prop_assert!(id.approx_eq(&Pose::identity(f("w"), f("w")), 1e-9));
            let r = a.rotation.to_rotation_matrix().into_inner();
            prop_assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn transform_points_inverse_roundtrip(
            xi in arb_twist(3.0),
            pts in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..20),
        ) {
            let p = pose_of(&xi, "a", "b");
            let c = PointCloud::new(pts.iter().map(|q| Point3::from(*q)).collect(), f("b"));
            let there = transform_points(&p, &c).unwrap();
            let back = transform_points(&p.inverse(), &there).unwrap();
            prop_assert_eq!(&back.frame, &c.frame);
            for (x, y) in back.points.iter().zip(&c.points) {
                prop_assert!((x - y).norm() < 1e-9);
            }
        }
    }
}
