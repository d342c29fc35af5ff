//! Delta parallel robot geometry.
//!
//! Each arm `i` is mounted at angle `gamma_i` around the base z axis. With the
//! end-effector radius folded into the base radius, the passive forearm of arm
//! `i` constrains the end-effector position `P` to a sphere of radius `L`:
//!
//! ```text
//! x² + y² + z² + a_i x + b_i y + c_i z + d_i = 0
//! a_i = 2 (R - r + l cos θ_i) cos γ_i
//! b_i = 2 (R - r + l cos θ_i) sin γ_i
//! c_i = 2 l sin θ_i
//! d_i = l² - L² + (R - r)² + 2 (R - r) l cos θ_i
//! ```
//!
//! Forward kinematics intersects the three spheres, inverse kinematics solves
//! each arm's `A cos θ + B sin θ + C = 0` through the tan-half-angle
//! substitution. Lengths are millimetres, angles radians, `z` is negative below
//! the base plane.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::scalar::Scalar;

/// End-effector position in the robot base frame.
pub type EefPose<T = f64> = Vec3<T>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("forearm spheres have no common point")]
    NoIntersection,
    #[error("sphere centres are collinear or coincident")]
    Degenerate,
    #[error("pose unreachable for arm {arm}")]
    Unreachable { arm: usize },
    #[error("arm {arm} is at a singular configuration")]
    Singular { arm: usize },
    #[error("invalid robot parameters: {0}")]
    InvalidParams(String),
}

/// Geometric model of the delta robot plus its joint limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaParams<T = f64> {
    /// `R`, base joint circle radius.
    pub base_radius: T,
    /// `r`, end-effector joint circle radius.
    pub eef_radius: T,
    /// `l`, actuated upper arm.
    pub arm_length: T,
    /// `L`, passive forearm (parallelogram) length.
    pub forearm_length: T,
    /// Arm mounting angles around the base z axis.
    pub gamma: [T; 3],
    /// Gearbox reduction, carried for completeness.
    pub reduction_ratio: T,
    pub theta_min: T,
    pub theta_max: T,
}

impl<T: Scalar> DeltaParams<T> {
    /// THL delta robot: R = 150, r = 54, l = 260, L = 820 mm, 25:1 gearboxes.
    pub fn thl() -> Self {
        let third = T::lit(2.0) * T::PI() / T::lit(3.0);
        Self {
            base_radius: T::lit(150.0),
            eef_radius: T::lit(54.0),
            arm_length: T::lit(260.0),
            forearm_length: T::lit(820.0),
            gamma: [T::zero(), third, third + third],
            reduction_ratio: T::lit(25.0),
            theta_min: T::lit(DEFAULT_THETA_MIN),
            theta_max: T::lit(DEFAULT_THETA_MAX),
        }
    }

    pub fn with_limits(mut self, theta_min: T, theta_max: T) -> Self {
        self.theta_min = theta_min;
        self.theta_max = theta_max;
        self
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let bad = |m: &str| Err(KinematicsError::InvalidParams(m.to_owned()));
        let lengths = [
            self.base_radius,
            self.eef_radius,
            self.arm_length,
            self.forearm_length,
        ];
        if lengths.iter().any(|v| !v.is_finite() || *v <= T::zero()) {
            return bad("all lengths must be positive and finite");
        }
        if self.forearm_length <= self.arm_length {
            return bad("forearm must be longer than the arm");
        }
        if self.base_radius <= self.eef_radius {
            return bad("base radius must exceed end-effector radius");
        }
        if !(self.theta_min < self.theta_max) {
            return bad("joint limits must satisfy theta_min < theta_max");
        }
        Ok(())
    }

    fn radial_offset(&self) -> T {
        self.base_radius - self.eef_radius
    }

    /// Centre of arm `i`'s forearm sphere, i.e. the elbow shifted by `r`.
    pub fn sphere_center(&self, arm: usize, theta: T) -> Vec3<T> {
        let k = self.radial_offset() + self.arm_length * theta.cos();
        let (sg, cg) = self.gamma[arm].sin_cos();
        Vec3::new(-k * cg, -k * sg, -self.arm_length * theta.sin())
    }

    /// `(a_i, b_i, c_i, d_i)` of the sphere constraint for arm `i`.
    pub fn constraint_coefficients(&self, arm: usize, theta: T) -> [T; 4] {
        let two = T::lit(2.0);
        let (st, ct) = theta.sin_cos();
        let (sg, cg) = self.gamma[arm].sin_cos();
        let ro = self.radial_offset();
        let l = self.arm_length;
        let k = ro + l * ct;
        [
            two * k * cg,
            two * k * sg,
            two * l * st,
            l * l - self.forearm_length * self.forearm_length + ro * ro + two * ro * l * ct,
        ]
    }
}

pub const DEFAULT_THETA_MIN: f64 = -0.6;
pub const DEFAULT_THETA_MAX: f64 = 1.5;

/// Actuated arm angles, measured from the base plane, positive downward.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointAngles<T = f64> {
    pub theta: [T; 3],
}

impl<T: Scalar> JointAngles<T> {
    pub const fn new(t1: T, t2: T, t3: T) -> Self {
        Self { theta: [t1, t2, t3] }
    }

    pub fn uniform(t: T) -> Self {
        Self::new(t, t, t)
    }

    pub fn within_limits(&self, params: &DeltaParams<T>) -> bool {
        self.theta
            .iter()
            .all(|t| t.is_finite() && *t >= params.theta_min && *t <= params.theta_max)
    }

    pub fn max_abs_diff(&self, o: &Self) -> T {
        (0..3).fold(T::zero(), |m, i| m.max((self.theta[i] - o.theta[i]).abs()))
    }
}

/// Intersects the three forearm spheres and returns the lower solution.
pub fn forward_kinematics<T: Scalar>(
    params: &DeltaParams<T>,
    joints: &JointAngles<T>,
) -> Result<EefPose<T>, KinematicsError> {
    let p1 = params.sphere_center(0, joints.theta[0]);
    let p2 = params.sphere_center(1, joints.theta[1]);
    let p3 = params.sphere_center(2, joints.theta[2]);
    let radius = params.forearm_length;

    let d12 = p2 - p1;
    let d = d12.norm();
    if d <= T::tiny() * radius {
        return Err(KinematicsError::Degenerate);
    }
    let ex = d12 * (T::one() / d);
    let d13 = p3 - p1;
    let i = ex.dot(d13);
    let ey_raw = d13 - ex * i;
    let ey_len = ey_raw.norm();
    if ey_len <= T::tiny() * radius {
        return Err(KinematicsError::Degenerate);
    }
    let ey = ey_raw * (T::one() / ey_len);
    let ez = ex.cross(ey);
    let j = ey.dot(d13);

    // equal radii: the radical planes simplify
    let two = T::lit(2.0);
    let x = d / two;
    let y = (i * i + j * j) / (two * j) - (i / j) * x;
    let z_sq = radius * radius - x * x - y * y;
    if z_sq < T::zero() {
        // tolerate round-off on tangent configurations
        if z_sq < -(T::tiny() * radius * radius) {
            return Err(KinematicsError::NoIntersection);
        }
    }
    let z = z_sq.max(T::zero()).sqrt();
    let base = p1 + ex * x + ey * y;
    let a = base + ez * z;
    let b = base - ez * z;
    Ok(if a.z <= b.z { a } else { b })
}

/// Left-hand side of the three sphere constraints evaluated at `pose`.
pub fn constraint_residual<T: Scalar>(
    params: &DeltaParams<T>,
    joints: &JointAngles<T>,
    pose: &EefPose<T>,
) -> [T; 3] {
    let sq = pose.dot(*pose);
    let mut out = [T::zero(); 3];
    for (arm, r) in out.iter_mut().enumerate() {
        let [a, b, c, d] = params.constraint_coefficients(arm, joints.theta[arm]);
        *r = sq + a * pose.x + b * pose.y + c * pose.z + d;
    }
    out
}

/// `(A, B, C)` of `A cos θ + B sin θ + C = 0` for arm `i` at `pose`.
fn arm_equation<T: Scalar>(params: &DeltaParams<T>, arm: usize, pose: &EefPose<T>) -> [T; 3] {
    let two = T::lit(2.0);
    let (sg, cg) = params.gamma[arm].sin_cos();
    let l = params.arm_length;
    let ro = params.radial_offset();
    let u = pose.x * cg + pose.y * sg;
    let a = two * l * (u + ro);
    let b = two * l * pose.z;
    let c = pose.dot(*pose) + two * ro * u + l * l
        - params.forearm_length * params.forearm_length
        + ro * ro;
    [a, b, c]
}

/// Elbow-out joint angles placing the end-effector at `pose`.
///
/// Uses the root `t = (-B - √(A² + B² - C²)) / (C - A)` of the tan-half-angle
/// quadratic. Below the base (`B < 0`) the algebraically equal form
/// `(A + C) / (√(A² + B² - C²) - B)` is evaluated instead; it has no
/// cancellation and reduces to the linear root when `C = A`.
///
/// The result is not checked against the joint limits; see [`is_reachable`].
pub fn inverse_kinematics<T: Scalar>(
    params: &DeltaParams<T>,
    pose: &EefPose<T>,
) -> Result<JointAngles<T>, KinematicsError> {
    if !pose.is_finite() {
        return Err(KinematicsError::Unreachable { arm: 0 });
    }
    let mut theta = [T::zero(); 3];
    for (arm, out) in theta.iter_mut().enumerate() {
        let [a, b, c] = arm_equation(params, arm, pose);
        let disc = a * a + b * b - c * c;
        if disc < T::zero() {
            return Err(KinematicsError::Unreachable { arm });
        }
        let root = disc.sqrt();
        let t = if b <= T::zero() {
            let den = root - b;
            if den == T::zero() {
                return Err(KinematicsError::Singular { arm });
            }
            (a + c) / den
        } else {
            let den = c - a;
            if den.abs() <= T::tiny() * (a.abs() + b.abs() + c.abs()) {
                // linear fallback of the degenerate quadratic
                -(a + c) / (T::lit(2.0) * b)
            } else {
                (-b - root) / den
            }
        };
        if !t.is_finite() {
            return Err(KinematicsError::Singular { arm });
        }
        *out = T::lit(2.0) * t.atan();
    }
    Ok(JointAngles { theta })
}

/// True when inverse kinematics succeeds and the angles respect the limits.
pub fn is_reachable<T: Scalar>(params: &DeltaParams<T>, pose: &EefPose<T>) -> bool {
    inverse_kinematics(params, pose).is_ok_and(|j| j.within_limits(params))
}

/// Mass properties of the THL robot links. Carried as data; nothing here
/// simulates dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkInertia {
    pub mass_kg: f64,
    /// Principal moments `[Ixx, Iyy, Izz]` in kg·m².
    pub inertia: [f64; 3],
}

pub const THL_BASE: LinkInertia = LinkInertia {
    mass_kg: 13.74,
    inertia: [0.0018120034, 0.0, 0.0018120034],
};
pub const THL_ARM: LinkInertia = LinkInertia {
    mass_kg: 0.44,
    inertia: [0.0001447401, 0.015154084, 0.0152228384],
};
pub const THL_FOREARM: LinkInertia = LinkInertia {
    mass_kg: 0.2,
    inertia: [0.016870159, 0.0000088926, 0.0168698215],
};
pub const THL_ELBOW_WRIST: LinkInertia = LinkInertia {
    mass_kg: 0.05,
    inertia: [0.0000365556, 0.0000019483, 0.0000364106],
};
pub const THL_END_EFFECTOR: LinkInertia = LinkInertia {
    mass_kg: 0.51,
    inertia: [0.0000679006, 0.0, 0.0000679006],
};

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn thl() -> DeltaParams<f64> {
        DeltaParams::thl()
    }

    #[test]
    fn symmetric_zero_pose() {
        // z = -sqrt(820² - 356²)
        let expected = -(820.0f64 * 820.0 - 356.0 * 356.0).sqrt();
        let p = forward_kinematics(&thl(), &JointAngles::uniform(0.0)).unwrap();
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.z, expected, epsilon = 1e-9);
        assert_abs_diff_eq!(p.z, -738.691, epsilon = 1e-3);
    }

    #[test]
    fn symmetric_vertical_arms() {
        // z = -l - sqrt(L² - (R - r)²)
        let expected = -260.0 - (820.0f64 * 820.0 - 96.0 * 96.0).sqrt();
        let p = forward_kinematics(&thl(), &JointAngles::uniform(std::f64::consts::FRAC_PI_2))
            .unwrap();
        assert_abs_diff_eq!(p.z, expected, epsilon = 1e-9);
        assert_abs_diff_eq!(p.z, -1074.361, epsilon = 1e-3);
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_angles_stay_on_axis() {
        for t in [-0.5, -0.1, 0.3, 0.9, 1.4] {
            let p = forward_kinematics(&thl(), &JointAngles::uniform(t)).unwrap();
            assert!(p.x.abs() < 1e-9 && p.y.abs() < 1e-9, "t={t}: {p:?}");
        }
    }

    #[test]
    fn ik_of_symmetric_pose() {
        let z = -(820.0f64 * 820.0 - 356.0 * 356.0).sqrt();
        let j = inverse_kinematics(&thl(), &Vec3::new(0.0, 0.0, z)).unwrap();
        assert!(j.max_abs_diff(&JointAngles::uniform(0.0)) < 1e-12);
        let j = inverse_kinematics(&thl(), &Vec3::new(0.0, 0.0, -738.691)).unwrap();
        assert!(j.max_abs_diff(&JointAngles::uniform(0.0)) < 1e-5);
    }

    #[test]
    fn far_pose_is_unreachable() {
        let pose = Vec3::new(0.0, 0.0, -2000.0);
        assert!(matches!(
            inverse_kinematics(&thl(), &pose),
            Err(KinematicsError::Unreachable { .. })
        ));
        assert!(!is_reachable(&thl(), &pose));
    }

    #[test]
    fn reachability_examples() {
        assert!(is_reachable(&thl(), &Vec3::new(0.0, 0.0, -738.691)));
        assert!(!is_reachable(&thl(), &Vec3::new(0.0, 0.0, 0.0)));
    }

    #[test]
    fn residual_at_base_origin_is_d() {
        // d = 260² - 820² + 96² + 2·96·260
        let r = constraint_residual(&thl(), &JointAngles::uniform(0.0), &Vec3::zero());
        for v in r {
            assert_abs_diff_eq!(v, -545_664.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn residual_shift_in_z() {
        let p = thl();
        let j = JointAngles::new(0.2, 0.5, -0.1);
        let pose = forward_kinematics(&p, &j).unwrap();
        let base = constraint_residual(&p, &j, &pose);
        let shifted = constraint_residual(&p, &j, &(pose + Vec3::new(0.0, 0.0, 1.0)));
        for arm in 0..3 {
            let c = p.constraint_coefficients(arm, j.theta[arm])[2];
            let expected = 2.0 * pose.z + 1.0 + c;
            assert_abs_diff_eq!(shifted[arm] - base[arm], expected, epsilon = 1e-6);
            assert!(shifted[arm].abs() > 1.0);
        }
    }

    #[test]
    fn degenerate_geometry_is_reported() {
        let mut p = thl();
        p.gamma = [0.0, 0.0, 0.0];
        assert_eq!(
            forward_kinematics(&p, &JointAngles::uniform(0.0)),
            Err(KinematicsError::Degenerate)
        );
    }

    #[test]
    fn no_intersection_is_reported() {
        let mut p = thl();
        p.forearm_length = 300.0;
        p.arm_length = 100.0;
        p.base_radius = 900.0;
        assert_eq!(
            forward_kinematics(&p, &JointAngles::uniform(0.0)),
            Err(KinematicsError::NoIntersection)
        );
    }

    #[test]
    fn params_validation() {
        assert!(thl().validate().is_ok());
        let mut p = thl();
        p.forearm_length = 200.0;
        assert!(p.validate().is_err());
        let mut p = thl();
        p.eef_radius = 200.0;
        assert!(p.validate().is_err());
        let mut p = thl();
        p.arm_length = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn single_precision_agrees() {
        let p32 = DeltaParams::<f32>::thl();
        let pose = forward_kinematics(&p32, &JointAngles::uniform(0.0f32)).unwrap();
        assert!((pose.z + 738.691).abs() < 0.05);
        let j = inverse_kinematics(&p32, &pose).unwrap();
        assert!(j.max_abs_diff(&JointAngles::uniform(0.0)) < 1e-3);
    }

    fn in_limits() -> impl Strategy<Value = JointAngles<f64>> {
        let r = DEFAULT_THETA_MIN..=DEFAULT_THETA_MAX;
        (r.clone(), r.clone(), r).prop_map(|(a, b, c)| JointAngles::new(a, b, c))
    }

    proptest! {
        #[test]
        fn fk_satisfies_constraints(j in in_limits()) {
            let p = thl();
            let pose = forward_kinematics(&p, &j).unwrap();
            for r in constraint_residual(&p, &j, &pose) {
                prop_assert!(r.abs() < 1e-6, "residual {r}");
            }
            prop_assert!(pose.z < 0.0);
        }

        #[test]
        fn ik_inverts_fk(j in in_limits()) {
            let p = thl();
            let pose = forward_kinematics(&p, &j).unwrap();
            let back = inverse_kinematics(&p, &pose).unwrap();
            prop_assert!(back.max_abs_diff(&j) < 1e-9);
        }

        #[test]
        fn rotation_permutes_arms(j in in_limits()) {
            let p = thl();
            let pose = forward_kinematics(&p, &j).unwrap();
            let rotated = pose.rotate_z(2.0 * std::f64::consts::PI / 3.0);
            let a = inverse_kinematics(&p, &pose).unwrap();
            let b = inverse_kinematics(&p, &rotated).unwrap();
            for i in 0..3 {
                prop_assert!((b.theta[i] - a.theta[(i + 2) % 3]).abs() < 1e-9);
            }
        }

        #[test]
        fn fk_is_lipschitz(j in in_limits(), arm in 0usize..3) {
            let p = thl();
            let mut k = j;
            k.theta[arm] += 1e-6;
            let a = forward_kinematics(&p, &j).unwrap();
            let b = forward_kinematics(&p, &k).unwrap();
            prop_assert!(a.distance(b) < 10.0 * (260.0 + 820.0) * 1e-6);
        }
    }
}
