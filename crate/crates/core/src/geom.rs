//! SE(3) pose algebra, pinhole camera model, and patch reprojection.
//!
//! Poses are world-to-camera transforms stored as a unit quaternion plus a
//! translation. Tangent vectors are laid out `[rho(3), theta(3)]` with the
//! translational part first; optimization applies left-multiplied exponential
//! increments, `T <- exp(xi) * T`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

/// World-to-camera rigid transform: `p_cam = R * p_world + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
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
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Transform a world point into the camera frame.
    #[inline]
    pub fn transform(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: UnitQuaternion::new_normalize(
                (self.rotation * other.rotation).into_inner(),
            ),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// Relative transform mapping frame-`self` coordinates into frame-`other`
    /// coordinates: `other ∘ self⁻¹`.
    pub fn relative_to(&self, other: &Pose) -> Pose {
        other.compose(&self.inverse())
    }

    #[inline]
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Left-multiplied tangent update: `exp(xi) ∘ self`, with renormalized
    /// rotation.
    pub fn left_update(&self, xi: &Vector6<f64>) -> Pose {
        se3_exp(xi).compose(self)
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|x| x.is_finite())
            && self.rotation.coords.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential via Rodrigues, returned as a unit quaternion.
fn so3_exp(theta: &Vector3<f64>) -> UnitQuaternion<f64> {
    let angle = theta.norm();
    if angle < 1e-12 {
        // First-order quaternion; renormalization absorbs the truncation.
        UnitQuaternion::new_normalize(Quaternion::new(
            1.0,
            0.5 * theta.x,
            0.5 * theta.y,
            0.5 * theta.z,
        ))
    } else {
        let axis = theta / angle;
        let (s, c) = (0.5 * angle).sin_cos();
        UnitQuaternion::new_normalize(Quaternion::new(c, s * axis.x, s * axis.y, s * axis.z))
    }
}

/// Left Jacobian of SO(3): `V(θ) = I + (1-cosθ)/θ² [θ]ₓ + (θ-sinθ)/θ³ [θ]ₓ²`.
fn so3_left_jacobian(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle2 = theta.norm_squared();
    let hat = skew(theta);
    if angle2 < 1e-16 {
        Matrix3::identity() + 0.5 * hat + (hat * hat) / 6.0
    } else {
        let angle = angle2.sqrt();
        let a = (1.0 - angle.cos()) / angle2;
        let b = (angle - angle.sin()) / (angle2 * angle);
        Matrix3::identity() + a * hat + b * (hat * hat)
    }
}

fn so3_left_jacobian_inv(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle2 = theta.norm_squared();
    let hat = skew(theta);
    if angle2 < 1e-16 {
        Matrix3::identity() - 0.5 * hat + (hat * hat) / 12.0
    } else {
        let angle = angle2.sqrt();
        let half = 0.5 * angle;
        // cot expansion: 1/θ² - (1/2θ)·cot(θ/2)
        let b = (1.0 - half * (half.cos() / half.sin()) ) / angle2;
        Matrix3::identity() - 0.5 * hat + b * (hat * hat)
    }
}

/// Exponential map se(3) -> SE(3). Twist layout `[rho, theta]`.
///
/// Panics on non-finite input; callers must guard optimizer steps.
pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    assert!(
        xi.iter().all(|x| x.is_finite()),
        "se3_exp: non-finite twist rejected"
    );
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let theta = Vector3::new(xi[3], xi[4], xi[5]);
    Pose {
        rotation: so3_exp(&theta),
        translation: so3_left_jacobian(&theta) * rho,
    }
}

/// Logarithm map SE(3) -> se(3), inverse of [`se3_exp`] for `‖θ‖ < π`.
pub fn se3_log(pose: &Pose) -> Vector6<f64> {
    let theta = match pose.rotation.axis_angle() {
        Some((axis, angle)) => axis.into_inner() * angle,
        None => Vector3::zeros(),
    };
    let rho = so3_left_jacobian_inv(&theta) * pose.translation;
    Vector6::new(rho.x, rho.y, rho.z, theta.x, theta.y, theta.z)
}

/// Pinhole camera intrinsics, pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
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

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside image {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Project a camera-frame point; no visibility check.
    #[inline]
    pub fn project(&self, p_cam: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Ray direction with unit z, so depth along it equals camera-frame z.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// A square patch carried by its center pixel and inverse depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchHomogeneous {
    pub u: f64,
    pub v: f64,
    /// Inverse depth, 1/meters; valid patches have `d > 0`.
    pub d: f64,
}

/// Result of reprojecting a patch into another frame.
#[derive(Clone, Copy, Debug)]
pub struct ReprojectedPatch {
    pub u: f64,
    pub v: f64,
    /// Inverse depth of the patch center in the target frame.
    pub inv_depth: f64,
}

/// Reproject the patch center from frame `i` into frame `j`.
///
/// Implements the unproject-transform-project chain
/// `K · T_j · T_i⁻¹ · K⁻¹ · [u, v, 1, d]` in a form linear in the inverse
/// depth: with `x̃ = K⁻¹(u,v,1)` and `T_j T_i⁻¹ = (R, t)`, the transformed
/// homogeneous point is `[R x̃ + d t, d]` and the pixel follows by projection.
pub fn reproject_patch(
    patch: &PatchHomogeneous,
    pose_i: &Pose,
    pose_j: &Pose,
    k: &Intrinsics,
) -> Result<ReprojectedPatch> {
    debug_assert!(patch.d > 0.0, "patch inverse depth must be positive");
    let rel = pose_i.relative_to(pose_j);
    let x_tilde = k.unproject(patch.u, patch.v);
    let q = rel.rotation * x_tilde + patch.d * rel.translation;
    if q.z <= 0.0 {
        return Err(Error::BehindCamera { z: q.z / patch.d });
    }
    Ok(ReprojectedPatch {
        u: k.fx * q.x / q.z + k.cx,
        v: k.fy * q.y / q.z + k.cy,
        inv_depth: patch.d / q.z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_twist(rng: &mut impl Rng, scale: f64) -> Vector6<f64> {
        Vector6::from_fn(|_, _| rng.gen_range(-scale..scale))
    }

    fn test_intrinsics() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn exp_of_zero_twist_is_identity() {
        let pose = se3_exp(&Vector6::zeros());
        assert_relative_eq!(pose.translation.norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(pose.rotation.angle(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn exp_of_pure_z_rotation() {
        // Rodrigues closed form: quaternion (cos π/4, 0, 0, sin π/4).
        let xi = Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2);
        let pose = se3_exp(&xi);
        let q = pose.rotation.quaternion();
        assert_relative_eq!(q.w, (PI / 4.0).cos(), epsilon = 1e-12);
        assert_relative_eq!(q.i, 0.0, epsilon = 1e-12);
        assert_relative_eq!(q.j, 0.0, epsilon = 1e-12);
        assert_relative_eq!(q.k, (PI / 4.0).sin(), epsilon = 1e-12);
        assert_relative_eq!(pose.translation.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let xi = random_twist(&mut rng, 0.57); // ‖ξ‖ < 1
            let back = se3_log(&se3_exp(&xi));
            assert_relative_eq!(xi, back, epsilon = 1e-9);
        }
    }

    #[test]
    #[should_panic(expected = "non-finite twist")]
    fn exp_rejects_non_finite() {
        let xi = Vector6::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0);
        let _ = se3_exp(&xi);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = se3_exp(&random_twist(&mut rng, 1.0));
            let id = p.compose(&p.inverse());
            assert!(id.translation.norm() < 1e-9);
            assert!(id.rotation.angle() < 1e-9);
            assert_relative_eq!(p.rotation.norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let a = se3_exp(&random_twist(&mut rng, 1.0));
            let b = se3_exp(&random_twist(&mut rng, 1.0));
            let c = se3_exp(&random_twist(&mut rng, 1.0));
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            assert!((left.translation - right.translation).norm() < 1e-9);
            assert!(left.rotation.angle_to(&right.rotation) < 1e-9);
        }
    }

    #[test]
    fn reproject_identity_pose_pair_is_identity() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pose = se3_exp(&random_twist(&mut rng, 0.5));
        for _ in 0..50 {
            let patch = PatchHomogeneous {
                u: rng.gen_range(0.0..100.0),
                v: rng.gen_range(0.0..100.0),
                d: rng.gen_range(0.1..5.0),
            };
            let r = reproject_patch(&patch, &pose, &pose, &k).unwrap();
            assert_relative_eq!(r.u, patch.u, epsilon = 1e-9);
            assert_relative_eq!(r.v, patch.v, epsilon = 1e-9);
            assert_relative_eq!(r.inv_depth, patch.d, epsilon = 1e-9);
        }
    }

    #[test]
    fn reproject_forward_translation_halves_depth() {
        // On-axis point at 1 m; camera j is 0.5 m further along the optical
        // axis, so the point sits at 0.5 m in frame j.
        let k = test_intrinsics();
        let pose_i = Pose::identity();
        // Moving the camera +0.5 m along +z maps p_cam_j = p_cam_i - 0.5 e_z.
        let pose_j = Pose::new(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, -0.5));
        let patch = PatchHomogeneous {
            u: 50.0,
            v: 50.0,
            d: 1.0,
        };
        let r = reproject_patch(&patch, &pose_i, &pose_j, &k).unwrap();
        assert_relative_eq!(r.u, 50.0, epsilon = 1e-12);
        assert_relative_eq!(r.v, 50.0, epsilon = 1e-12);
        assert_relative_eq!(r.inv_depth, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn reproject_x_translation_shifts_u_by_fx_t_d() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let t = rng.gen_range(-0.2..0.2);
            let patch = PatchHomogeneous {
                u: rng.gen_range(20.0..80.0),
                v: rng.gen_range(20.0..80.0),
                d: rng.gen_range(0.2..2.0),
            };
            let pose_i = Pose::identity();
            // Camera shifted +t along its x axis: p_j = p_i - t e_x.
            let pose_j = Pose::new(UnitQuaternion::identity(), Vector3::new(-t, 0.0, 0.0));
            let r = reproject_patch(&patch, &pose_i, &pose_j, &k).unwrap();
            assert_relative_eq!(r.u - patch.u, -k.fx * t * patch.d, epsilon = 1e-9);
            assert_relative_eq!(r.v, patch.v, epsilon = 1e-9);
        }
    }

    #[test]
    fn reproject_round_trip_recovers_pixel() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let pose_i = se3_exp(&random_twist(&mut rng, 0.2));
            let pose_j = se3_exp(&random_twist(&mut rng, 0.2));
            let patch = PatchHomogeneous {
                u: rng.gen_range(10.0..90.0),
                v: rng.gen_range(10.0..90.0),
                d: rng.gen_range(0.2..1.0),
            };
            let Ok(fwd) = reproject_patch(&patch, &pose_i, &pose_j, &k) else {
                continue;
            };
            let back = reproject_patch(
                &PatchHomogeneous {
                    u: fwd.u,
                    v: fwd.v,
                    d: fwd.inv_depth,
                },
                &pose_j,
                &pose_i,
                &k,
            )
            .unwrap();
            assert_relative_eq!(back.u, patch.u, epsilon = 1e-6);
            assert_relative_eq!(back.v, patch.v, epsilon = 1e-6);
        }
    }

    #[test]
    fn reproject_behind_camera_errors() {
        let k = test_intrinsics();
        let pose_i = Pose::identity();
        // Camera j 2 m ahead; a point at 1 m lands behind it.
        let pose_j = Pose::new(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, -2.0));
        let patch = PatchHomogeneous {
            u: 50.0,
            v: 50.0,
            d: 1.0,
        };
        assert!(matches!(
            reproject_patch(&patch, &pose_i, &pose_j, &k),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(-1.0, 100.0, 50.0, 50.0, 100, 100).is_err());
        assert!(Intrinsics::new(100.0, 100.0, 120.0, 50.0, 100, 100).is_err());
        assert!(Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).is_ok());
    }
}
