//! Rigid transforms, pinhole intrinsics and point projection.
//!
//! Camera convention used throughout the crate: +Z forward, +X right, +Y down.
//! A [`Pose`] maps points from its local frame into the parent frame
//! (`x_parent = R * x_local + t`); camera poses are therefore camera-to-world.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points closer to the image plane than this are rejected by [`project`].
pub const MIN_PROJECT_DEPTH: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth {0} is not in front of the camera")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// SE(3) rigid transform stored as a unit quaternion plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        let mut rotation = rotation;
        rotation.renormalize();
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw (possibly unnormalized) quaternion in `w, x, y, z` order.
    pub fn from_wxyz(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let rotation = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Self::new(rotation, translation)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Rotation from a scaled axis via the exponential map.
    pub fn from_scaled_axis(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(exp_so3(axis_angle), translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Applies the inverse transform without materializing it.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn normalize(&mut self) {
        self.rotation.renormalize();
    }

    /// Rotation angle of the relative rotation, radians.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Left update in the tangent space used by the pose optimizer:
    /// `R <- Exp(omega) R`, `t <- t + nu` with `delta = (omega, nu)`.
    pub fn retract_left(&self, delta: &Vector6<f64>) -> Pose {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let nu = Vector3::new(delta[3], delta[4], delta[5]);
        Pose::new(exp_so3(omega) * self.rotation, self.translation + nu)
    }
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::new(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

pub fn inverse(a: &Pose) -> Pose {
    let r_inv = a.rotation.inverse();
    Pose::new(r_inv, -(r_inv * a.translation))
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        compose(&self, &rhs)
    }
}

/// Exponential map of a scaled rotation axis.
pub fn exp_so3(omega: Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(omega)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pinhole intrinsics in pixels. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`;
/// its sample point is the center `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("empty image".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Intrinsics for an image downsampled by an integer factor.
    pub fn downscaled(&self, factor: usize) -> Intrinsics {
        let f = factor as f64;
        Intrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// Projects a camera-frame point to `(u, v, depth)`.
pub fn project(point: &Vector3<f64>, k: &Intrinsics) -> Result<(f64, f64, f64), GeometryError> {
    if point.z <= MIN_PROJECT_DEPTH {
        return Err(GeometryError::NonPositiveDepth(point.z));
    }
    let inv_z = 1.0 / point.z;
    Ok((
        k.fx * point.x * inv_z + k.cx,
        k.fy * point.y * inv_z + k.cy,
        point.z,
    ))
}

/// Inverse of [`project`] for a known depth.
pub fn backproject(u: f64, v: f64, depth: f64, k: &Intrinsics) -> Vector3<f64> {
    Vector3::new(
        (u - k.cx) / k.fx * depth,
        (v - k.cy) / k.fy * depth,
        depth,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let q = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let t = Vector3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        );
        Pose::from_wxyz(q, t)
    }

    fn pose_close(a: &Pose, b: &Pose, tol: f64) -> bool {
        a.rotation.angle_to(&b.rotation) < tol && (a.translation - b.translation).norm() < tol
    }

    #[test]
    fn identity_is_neutral_for_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_pose(&mut rng);
        assert!(pose_close(&compose(&Pose::identity(), &t), &t, 1e-12));
        assert!(pose_close(&compose(&t, &inverse(&t)), &Pose::identity(), 1e-9));
        assert!(pose_close(&compose(&inverse(&t), &t), &Pose::identity(), 1e-9));
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let got = compose(&a, &b).to_matrix();
            let want = a.to_matrix() * b.to_matrix();
            assert!((got - want).abs().max() < 1e-12);
        }
    }

    #[test]
    fn inverse_matches_matrix_inverse() {
        assert!(pose_close(&inverse(&Pose::identity()), &Pose::identity(), 0.0 + 1e-15));
        let t = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(inverse(&t).translation, Vector3::new(-1.0, -2.0, -3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let got = inverse(&a).to_matrix();
            let want = a.to_matrix().try_inverse().unwrap();
            assert!((got - want).abs().max() < 1e-12);
        }
    }

    #[test]
    fn project_examples() {
        let k = Intrinsics::new(100.0, 100.0, 320.0, 240.0, 640, 480).unwrap();
        let (u, v, d) = project(&Vector3::new(0.0, 0.0, 1.0), &k).unwrap();
        assert_eq!((u, v, d), (320.0, 240.0, 1.0));
        let (u, _, _) = project(&Vector3::new(1.0, 0.0, 2.0), &k).unwrap();
        assert_eq!(u, 370.0);
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, 0.0), &k),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(project(&Vector3::new(0.0, 0.0, -1.0), &k).is_err());
    }

    #[test]
    fn project_matches_homogeneous_oracle() {
        let k = Intrinsics::new(525.0, 517.0, 319.5, 239.5, 640, 480).unwrap();
        let kmat = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.1..10.0),
            );
            let h = kmat * p;
            let (u, v, d) = project(&p, &k).unwrap();
            // Relative: pixel coordinates reach 1e4 near the camera plane.
            assert_relative_eq!(u, h.x / h.z, epsilon = 1e-12, max_relative = 1e-12);
            assert_relative_eq!(v, h.y / h.z, epsilon = 1e-12, max_relative = 1e-12);
            assert_abs_diff_eq!(d, p.z, epsilon = 1e-12);
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn retract_left_applies_world_frame_update() {
        let p = Pose::from_scaled_axis(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 0.0, 0.0));
        let d = Vector6::new(0.0, 0.0, 0.5, 0.1, 0.0, 0.0);
        let q = p.retract_left(&d);
        let want_r = exp_so3(Vector3::new(0.0, 0.0, 0.5)) * p.rotation;
        assert!(q.rotation.angle_to(&want_r) < 1e-12);
        assert_abs_diff_eq!(q.translation.x, 1.1, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn rotation_matrix_is_orthonormal(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-3);
            let p = Pose::from_wxyz([w, x, y, z], Vector3::zeros());
            prop_assert!((p.rotation.norm() - 1.0).abs() < 1e-9);
            let r = p.rotation_matrix();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn compose_is_associative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let l = compose(&compose(&a, &b), &c);
            let r = compose(&a, &compose(&b, &c));
            prop_assert!(pose_close(&l, &r, 1e-9));
        }

        #[test]
        fn project_backproject_roundtrip(u in 0.0f64..640.0, v in 0.0f64..480.0, depth in 0.1f64..100.0) {
            let k = Intrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).unwrap();
            let p = backproject(u, v, depth, &k);
            let (u2, v2, d2) = project(&p, &k).unwrap();
            prop_assert!((u - u2).abs() < 1e-9 && (v - v2).abs() < 1e-9 && (depth - d2).abs() < 1e-9);
        }
    }
}
