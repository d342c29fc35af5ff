//! Pi-shaped pick-and-place paths and piecewise cubic interpolation.
//!
//! A path is four Cartesian waypoints: pick, two lifted intermediates and
//! place. Each axis is interpolated independently by cubic segments
//!
//! ```text
//! q_k(t) = a_k0 + a_k1 (t - t_k) + a_k2 (t - t_k)² + a_k3 (t - t_k)³
//! ```
//!
//! that hit the knot positions and the prescribed knot velocities, with the
//! robot at rest at both ends. The Cartesian spline is then sampled and mapped
//! to joint space through inverse kinematics.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::kinematics::{forward_kinematics, inverse_kinematics, DeltaParams, JointAngles};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("curvature factor {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("vertical offset must be positive, got {0}")]
    NonPositiveOffset(f64),
    #[error("segment duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("time {t} outside trajectory domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("waypoint {index} is outside the robot workspace")]
    UnreachableWaypoint { index: usize },
    #[error("spline sample at t = {t} s leaves the robot workspace")]
    UnreachableSample { t: f64 },
    #[error("invalid knots: {0}")]
    InvalidKnots(String),
    #[error("sampling step must be positive and not exceed the duration")]
    InvalidTimeStep,
    #[error("csv output failed: {0}")]
    Csv(String),
}

fn f<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Four-point lift/transfer/lower path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiPath<T = f64> {
    pub pick: Vec3<T>,
    pub place: Vec3<T>,
    pub h: T,
    pub alpha: T,
    /// `pick, P1', P2', place` after the curvature adjustment.
    pub waypoints: [Vec3<T>; 4],
}

impl<T: Scalar> PiPath<T> {
    /// The unadjusted corners `pick, pick + h, place + h, place`.
    pub fn raw_corners(&self) -> [Vec3<T>; 4] {
        let lift = Vec3::new(T::zero(), T::zero(), self.h);
        [self.pick, self.pick + lift, self.place + lift, self.place]
    }
}

/// Lifts both ends by `h` and pulls the two intermediates toward their
/// midpoint by `alpha`.
pub fn build_pi_path<T: Scalar>(
    pick: Vec3<T>,
    place: Vec3<T>,
    h: T,
    alpha: T,
) -> Result<PiPath<T>, TrajectoryError> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(TrajectoryError::InvalidAlpha(f(alpha)));
    }
    if !(h > T::zero()) || !h.is_finite() {
        return Err(TrajectoryError::NonPositiveOffset(f(h)));
    }
    let lift = Vec3::new(T::zero(), T::zero(), h);
    let p1 = pick + lift;
    let p2 = place + lift;
    let mid = (p1 + p2) * T::lit(0.5);
    Ok(PiPath {
        pick,
        place,
        h,
        alpha,
        waypoints: [pick, p1.lerp(mid, alpha), p2.lerp(mid, alpha), place],
    })
}

/// Knot velocities for one axis: zero at both ends, the mean of the adjacent
/// slopes in between, and zero where the slopes change sign (or one is flat).
pub fn intermediate_velocities<T: Scalar>(positions: &[T], times: &[T]) -> Vec<T> {
    let n = positions.len();
    let mut v = vec![T::zero(); n];
    for k in 1..n.saturating_sub(1) {
        let left = (positions[k] - positions[k - 1]) / (times[k] - times[k - 1]);
        let right = (positions[k + 1] - positions[k]) / (times[k + 1] - times[k]);
        if left * right > T::zero() {
            v[k] = (left + right) * T::lit(0.5);
        }
    }
    v
}

/// `(a_0, a_1, a_2, a_3)` of the cubic joining `(q0, v0)` to `(q1, v1)` in
/// `duration` seconds.
pub fn cubic_coefficients<T: Scalar>(
    q0: T,
    q1: T,
    v0: T,
    v1: T,
    duration: T,
) -> Result<[T; 4], TrajectoryError> {
    if !(duration > T::zero()) {
        return Err(TrajectoryError::NonPositiveDuration(f(duration)));
    }
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let a2 = (three * (q1 - q0) / duration - two * v0 - v1) / duration;
    let a3 = (two * (q0 - q1) / duration + v0 + v1) / (duration * duration);
    Ok([q0, v0, a2, a3])
}

/// Position, velocity and acceleration at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianState<T = f64> {
    pub position: Vec3<T>,
    pub velocity: Vec3<T>,
    pub acceleration: Vec3<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicSegment<T = f64> {
    pub t_start: T,
    pub duration: T,
    /// Coefficients per Cartesian axis.
    pub coeffs: [[T; 4]; 3],
}

impl<T: Scalar> CubicSegment<T> {
    fn eval(&self, t: T) -> CartesianState<T> {
        let s = t - self.t_start;
        let two = T::lit(2.0);
        let three = T::lit(3.0);
        let six = T::lit(6.0);
        let mut p = [T::zero(); 3];
        let mut v = [T::zero(); 3];
        let mut a = [T::zero(); 3];
        for axis in 0..3 {
            let [c0, c1, c2, c3] = self.coeffs[axis];
            p[axis] = c0 + s * (c1 + s * (c2 + s * c3));
            v[axis] = c1 + s * (two * c2 + three * c3 * s);
            a[axis] = two * c2 + six * c3 * s;
        }
        CartesianState {
            position: Vec3::from_axes(p),
            velocity: Vec3::from_axes(v),
            acceleration: Vec3::from_axes(a),
        }
    }
}

/// Per-axis cubic spline through Cartesian knots, at rest at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseCubicTrajectory<T = f64> {
    pub knot_times: Vec<T>,
    pub knots: Vec<Vec3<T>>,
    pub knot_velocities: Vec<Vec3<T>>,
    pub segments: Vec<CubicSegment<T>>,
}

impl<T: Scalar> PiecewiseCubicTrajectory<T> {
    /// Builds the spline using [`intermediate_velocities`] on each axis.
    pub fn through(knot_times: Vec<T>, knots: Vec<Vec3<T>>) -> Result<Self, TrajectoryError> {
        if knots.len() < 2 || knots.len() != knot_times.len() {
            return Err(TrajectoryError::InvalidKnots(format!(
                "{} knots with {} times",
                knots.len(),
                knot_times.len()
            )));
        }
        for w in knot_times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(TrajectoryError::InvalidKnots(
                    "knot times must be strictly increasing".into(),
                ));
            }
        }
        let mut vel = [Vec::new(), Vec::new(), Vec::new()];
        for (axis, v) in vel.iter_mut().enumerate() {
            let q: Vec<T> = knots.iter().map(|p| p.axis(axis)).collect();
            *v = intermediate_velocities(&q, &knot_times);
        }
        let knot_velocities: Vec<Vec3<T>> = (0..knots.len())
            .map(|k| Vec3::new(vel[0][k], vel[1][k], vel[2][k]))
            .collect();
        Self::with_velocities(knot_times, knots, knot_velocities)
    }

    /// Builds the spline from explicit knot velocities.
    pub fn with_velocities(
        knot_times: Vec<T>,
        knots: Vec<Vec3<T>>,
        knot_velocities: Vec<Vec3<T>>,
    ) -> Result<Self, TrajectoryError> {
        if knot_velocities.len() != knots.len() {
            return Err(TrajectoryError::InvalidKnots("velocity count mismatch".into()));
        }
        let mut segments = Vec::with_capacity(knots.len() - 1);
        for k in 0..knots.len() - 1 {
            let duration = knot_times[k + 1] - knot_times[k];
            let mut coeffs = [[T::zero(); 4]; 3];
            for (axis, c) in coeffs.iter_mut().enumerate() {
                *c = cubic_coefficients(
                    knots[k].axis(axis),
                    knots[k + 1].axis(axis),
                    knot_velocities[k].axis(axis),
                    knot_velocities[k + 1].axis(axis),
                    duration,
                )?;
            }
            segments.push(CubicSegment {
                t_start: knot_times[k],
                duration,
                coeffs,
            });
        }
        Ok(Self {
            knot_times,
            knots,
            knot_velocities,
            segments,
        })
    }

    pub fn start_time(&self) -> T {
        self.knot_times[0]
    }

    pub fn end_time(&self) -> T {
        *self.knot_times.last().unwrap()
    }

    fn check_domain(&self, t: T) -> Result<(), TrajectoryError> {
        if t >= self.start_time() && t <= self.end_time() {
            Ok(())
        } else {
            Err(TrajectoryError::OutOfDomain {
                t: f(t),
                start: f(self.start_time()),
                end: f(self.end_time()),
            })
        }
    }

    /// Evaluates the segment starting at or before `t`. At an interior knot
    /// this is the right-hand segment, so knots are reproduced exactly.
    pub fn eval(&self, t: T) -> Result<CartesianState<T>, TrajectoryError> {
        self.check_domain(t)?;
        if t == self.end_time() {
            let last = self.segments.len() - 1;
            let mut s = self.segments[last].eval(t);
            s.position = self.knots[last + 1];
            s.velocity = self.knot_velocities[last + 1];
            return Ok(s);
        }
        let k = self
            .knot_times
            .partition_point(|&kt| kt <= t)
            .saturating_sub(1)
            .min(self.segments.len() - 1);
        Ok(self.segments[k].eval(t))
    }

    /// Like [`eval`](Self::eval) but takes the left-hand segment at knots.
    pub fn eval_left(&self, t: T) -> Result<CartesianState<T>, TrajectoryError> {
        self.check_domain(t)?;
        let k = self
            .knot_times
            .partition_point(|&kt| kt < t)
            .saturating_sub(1)
            .min(self.segments.len() - 1);
        Ok(self.segments[k].eval(t))
    }
}

/// Knot times from `0` to `total_time`, proportional to the Euclidean length
/// of each leg. Legs shorter than `1e-3` of the total receive that share.
pub fn allocate_knot_times<T: Scalar>(waypoints: &[Vec3<T>], total_time: T) -> Vec<T> {
    let legs: Vec<T> = waypoints.windows(2).map(|w| w[0].distance(w[1])).collect();
    let min_share = T::lit(1e-3);
    let n = legs.len();
    let mut share = vec![T::zero(); n];
    let mut fixed = vec![false; n];
    // fix the short legs, then spread what is left over the others; repeat
    // because rescaling can push another leg under the minimum
    loop {
        let free_len = (0..n)
            .filter(|&i| !fixed[i])
            .fold(T::zero(), |s, i| s + legs[i]);
        let fixed_count = T::from_usize(fixed.iter().filter(|&&x| x).count()).unwrap();
        let free_share = T::one() - fixed_count * min_share;
        let free_count = T::from_usize(fixed.iter().filter(|&&x| !x).count()).unwrap();
        let mut changed = false;
        for i in 0..n {
            if fixed[i] {
                share[i] = min_share;
                continue;
            }
            share[i] = if free_len > T::zero() {
                free_share * legs[i] / free_len
            } else {
                free_share / free_count
            };
            if share[i] < min_share {
                fixed[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut times = Vec::with_capacity(n + 1);
    let mut acc = T::zero();
    times.push(acc);
    for s in &share[..n - 1] {
        acc = acc + *s * total_time;
        times.push(acc);
    }
    times.push(total_time);
    times
}

/// Cartesian spline through the path waypoints over `total_time` seconds.
pub fn cartesian_spline<T: Scalar>(
    path: &PiPath<T>,
    total_time: T,
) -> Result<PiecewiseCubicTrajectory<T>, TrajectoryError> {
    if !(total_time > T::zero()) {
        return Err(TrajectoryError::NonPositiveDuration(f(total_time)));
    }
    let waypoints = if path.pick == path.place {
        // nothing to transfer: hold position instead of lifting
        [path.pick; 4]
    } else {
        path.waypoints
    };
    let times = allocate_knot_times(&waypoints, total_time);
    PiecewiseCubicTrajectory::through(times, waypoints.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSample<T = f64> {
    pub t: T,
    pub position: Vec3<T>,
    pub velocity: Vec3<T>,
    pub joints: JointAngles<T>,
    pub joint_velocities: [T; 3],
}

/// Uniformly sampled joint-space trajectory with its Cartesian reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrajectory<T = f64> {
    pub dt: T,
    pub samples: Vec<JointSample<T>>,
}

impl<T: Scalar> JointTrajectory<T> {
    pub fn duration(&self) -> T {
        self.samples.last().map_or(T::zero(), |s| s.t)
    }

    /// Latest sample at or before `t`, clamped to the trajectory ends.
    pub fn sample_at(&self, t: T) -> &JointSample<T> {
        if t <= T::zero() {
            return &self.samples[0];
        }
        let i = (t / self.dt).floor().to_usize().unwrap_or(usize::MAX);
        &self.samples[i.min(self.samples.len() - 1)]
    }

    /// Largest distance between the forward kinematics of the commanded joints
    /// and the Cartesian reference.
    pub fn max_tracking_error(&self, params: &DeltaParams<T>) -> T {
        self.samples.iter().fold(T::zero(), |m, s| {
            match forward_kinematics(params, &s.joints) {
                Ok(p) => m.max(p.distance(s.position)),
                Err(_) => T::infinity(),
            }
        })
    }

    /// CSV with columns `t, x, y, z, vx, vy, vz, th1, th2, th3`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrajectoryError> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| TrajectoryError::Csv(e.to_string());
        w.write_record(["t", "x", "y", "z", "vx", "vy", "vz", "th1", "th2", "th3"])
            .map_err(err)?;
        for s in &self.samples {
            let row = [
                s.t,
                s.position.x,
                s.position.y,
                s.position.z,
                s.velocity.x,
                s.velocity.y,
                s.velocity.z,
                s.joints.theta[0],
                s.joints.theta[1],
                s.joints.theta[2],
            ];
            w.write_record(row.iter().map(|v| f(*v).to_string()))
                .map_err(err)?;
        }
        w.flush().map_err(|e| TrajectoryError::Csv(e.to_string()))
    }
}

/// Samples the Cartesian spline of `path` every `dt` seconds and converts each
/// sample to joint space. Joint velocities are central differences, with the
/// robot treated as stationary before the start and after the end.
pub fn plan_pick_place<T: Scalar>(
    params: &DeltaParams<T>,
    path: &PiPath<T>,
    total_time: T,
    dt: T,
) -> Result<JointTrajectory<T>, TrajectoryError> {
    if !(dt > T::zero()) || dt > total_time {
        return Err(TrajectoryError::InvalidTimeStep);
    }
    for (index, w) in path.waypoints.iter().enumerate() {
        if !crate::kinematics::is_reachable(params, w) {
            return Err(TrajectoryError::UnreachableWaypoint { index });
        }
    }
    let spline = cartesian_spline(path, total_time)?;
    let steps = (total_time / dt - T::lit(1e-9)).ceil().to_usize().unwrap_or(0);
    let mut samples = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = (T::from_usize(i).unwrap() * dt).min(total_time);
        let state = spline.eval(t)?;
        let joints = inverse_kinematics(params, &state.position)
            .ok()
            .filter(|j| j.within_limits(params))
            .ok_or(TrajectoryError::UnreachableSample { t: f(t) })?;
        samples.push(JointSample {
            t,
            position: state.position,
            velocity: state.velocity,
            joints,
            joint_velocities: [T::zero(); 3],
        });
    }
    let n = samples.len();
    for i in 0..n {
        let (lo, t_lo) = if i == 0 {
            (samples[0].joints, samples[0].t - dt)
        } else {
            (samples[i - 1].joints, samples[i - 1].t)
        };
        let (hi, t_hi) = if i + 1 == n {
            (samples[i].joints, samples[i].t + dt)
        } else {
            (samples[i + 1].joints, samples[i + 1].t)
        };
        let span = t_hi - t_lo;
        for a in 0..3 {
            samples[i].joint_velocities[a] = (hi.theta[a] - lo.theta[a]) / span;
        }
    }
    Ok(JointTrajectory { dt, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    fn reference_path() -> PiPath<f64> {
        build_pi_path(v(-200.0, 0.0, -900.0), v(200.0, 0.0, -900.0), 100.0, 0.77).unwrap()
    }

    #[test]
    fn alpha_zero_keeps_corners() {
        let p = build_pi_path(v(-200.0, 10.0, -900.0), v(150.0, 0.0, -880.0), 80.0, 0.0).unwrap();
        assert_eq!(p.waypoints, p.raw_corners());
    }

    #[test]
    fn alpha_one_collapses_intermediates() {
        let p = build_pi_path(v(-200.0, 0.0, -900.0), v(200.0, 40.0, -900.0), 100.0, 1.0).unwrap();
        assert_eq!(p.waypoints[1], p.waypoints[2]);
        assert_eq!(p.waypoints[1], v(0.0, 20.0, -800.0));
    }

    #[test]
    fn alpha_blend_example() {
        let p = reference_path();
        assert_abs_diff_eq!(p.waypoints[1].x, -46.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.waypoints[2].x, 46.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.waypoints[1].z, -800.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.waypoints[2].z, -800.0, epsilon = 1e-12);
    }

    #[test]
    fn path_argument_errors() {
        let a = v(0.0, 0.0, -900.0);
        assert!(matches!(
            build_pi_path(a, a, 100.0, 1.5),
            Err(TrajectoryError::InvalidAlpha(_))
        ));
        assert!(matches!(
            build_pi_path(a, a, 100.0, -0.1),
            Err(TrajectoryError::InvalidAlpha(_))
        ));
        assert!(matches!(
            build_pi_path(a, a, 0.0, 0.5),
            Err(TrajectoryError::NonPositiveOffset(_))
        ));
    }

    #[test]
    fn velocity_heuristic_examples() {
        let t = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(intermediate_velocities(&[0.0, 1.0, 2.0, 3.0], &t), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(intermediate_velocities(&[0.0, 1.0, 0.0], &t[..3]), vec![0.0, 0.0, 0.0]);
        assert_eq!(intermediate_velocities(&[0.0, 1.0, 3.0], &t[..3]), vec![0.0, 1.5, 0.0]);
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(cubic_coefficients(0.0, 1.0, 0.0, 0.0, 1.0).unwrap(), [0.0, 0.0, 3.0, -2.0]);
        assert_eq!(cubic_coefficients(4.0, 4.0, 0.0, 0.0, 2.5).unwrap(), [4.0, 0.0, 0.0, 0.0]);
        assert_eq!(cubic_coefficients(0.0, 1.0, 1.0, 1.0, 1.0).unwrap(), [0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            cubic_coefficients(0.0, 1.0, 0.0, 0.0, 0.0),
            Err(TrajectoryError::NonPositiveDuration(_))
        ));
    }

    #[test]
    fn smoothstep_midpoint() {
        let traj = PiecewiseCubicTrajectory::through(
            vec![0.0, 1.0],
            vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)],
        )
        .unwrap();
        let s = traj.eval(0.5).unwrap();
        assert_abs_diff_eq!(s.position.x, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.velocity.x, 1.5, epsilon = 1e-15);
        assert!(matches!(traj.eval(1.5), Err(TrajectoryError::OutOfDomain { .. })));
        assert!(matches!(traj.eval(-0.1), Err(TrajectoryError::OutOfDomain { .. })));
    }

    #[test]
    fn boundary_rest_and_knots() {
        let path = reference_path();
        let spline = cartesian_spline(&path, 1.0).unwrap();
        let start = spline.eval(0.0).unwrap();
        let end = spline.eval(1.0).unwrap();
        assert_eq!(start.position, path.pick);
        assert_eq!(start.velocity, Vec3::zero());
        assert_eq!(end.velocity, Vec3::zero());
        assert!(end.position.max_abs_diff(path.place) < 1e-12);
        for (k, t) in spline.knot_times.iter().enumerate() {
            let p = spline.eval(*t).unwrap().position;
            assert!(p.max_abs_diff(spline.knots[k]) <= 1e-12);
        }
    }

    #[test]
    fn knot_times_proportional_to_distance() {
        let pts = [v(0.0, 0.0, 0.0), v(3.0, 0.0, 0.0), v(3.0, 1.0, 0.0)];
        let t = allocate_knot_times(&pts, 2.0);
        assert_abs_diff_eq!(t[1], 1.5, epsilon = 1e-12);
        assert_eq!(t[2], 2.0);
        let pts = [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(2.0, 0.0, 0.0)];
        let t = allocate_knot_times(&pts, 1.0);
        assert_abs_diff_eq!(t[2] - t[1], 1e-3, epsilon = 1e-15);
        assert_abs_diff_eq!(t[1], 0.4995, epsilon = 1e-12);
    }

    #[test]
    fn pick_equals_place_holds_still() {
        let params = DeltaParams::thl();
        let a = v(10.0, -20.0, -850.0);
        let path = build_pi_path(a, a, 100.0, 0.77).unwrap();
        let traj = plan_pick_place(&params, &path, 1.0, 0.01).unwrap();
        let first = traj.samples[0];
        for s in &traj.samples {
            assert_eq!(s.position, a);
            assert_eq!(s.joints, first.joints);
            assert_eq!(s.joint_velocities, [0.0; 3]);
        }
    }

    #[test]
    fn reference_plan_shape() {
        let params = DeltaParams::thl();
        let traj = plan_pick_place(&params, &reference_path(), 1.0, 1e-3).unwrap();
        assert_eq!(traj.samples.len(), 1001);
        let first = traj.samples.first().unwrap();
        let last = traj.samples.last().unwrap();
        assert_eq!(first.velocity, Vec3::zero());
        assert_eq!(last.velocity, Vec3::zero());
        for w in [first.joint_velocities, last.joint_velocities] {
            for v in w {
                assert!(v.abs() < 1e-2, "{v}");
            }
        }
        assert!(traj.max_tracking_error(&params) < 1e-6);
    }

    #[test]
    fn unreachable_waypoint() {
        let params = DeltaParams::thl();
        let path = build_pi_path(v(0.0, 0.0, -900.0), v(900.0, 0.0, -900.0), 100.0, 0.5).unwrap();
        assert!(matches!(
            plan_pick_place(&params, &path, 1.0, 0.01),
            Err(TrajectoryError::UnreachableWaypoint { index: 2 })
        ));
    }

    #[test]
    fn csv_layout() {
        let params = DeltaParams::thl();
        let traj = plan_pick_place(&params, &reference_path(), 1.0, 0.25).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x,y,z,vx,vy,vz,th1,th2,th3");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("0,-200,0,-900,0,0,0,"));
    }

    fn reachable_point() -> impl Strategy<Value = Vec3<f64>> {
        (-200.0..200.0f64, -200.0..200.0f64, -950.0..-800.0f64).prop_map(|(x, y, z)| v(x, y, z))
    }

    proptest! {
        #[test]
        fn c1_continuity(a in reachable_point(), b in reachable_point(), alpha in 0.0..=1.0f64) {
            let path = build_pi_path(a, b, 100.0, alpha).unwrap();
            let spline = cartesian_spline(&path, 1.0).unwrap();
            for &t in &spline.knot_times[1..spline.knot_times.len() - 1] {
                let l = spline.eval_left(t).unwrap();
                let r = spline.eval(t).unwrap();
                prop_assert!(l.velocity.max_abs_diff(r.velocity) <= 1e-9);
                prop_assert!(l.position.max_abs_diff(r.position) <= 1e-9);
            }
        }

        #[test]
        fn time_reversal(a in reachable_point(), b in reachable_point()) {
            let fwd = cartesian_spline(&build_pi_path(a, b, 100.0, 0.77).unwrap(), 1.0).unwrap();
            let rev = cartesian_spline(&build_pi_path(b, a, 100.0, 0.77).unwrap(), 1.0).unwrap();
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                let p = fwd.eval(t).unwrap().position;
                let q = rev.eval(1.0 - t).unwrap().position;
                prop_assert!(p.max_abs_diff(q) < 1e-9, "t={t} {p:?} {q:?}");
            }
        }
    }
}
