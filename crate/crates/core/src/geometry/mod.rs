//! SE(3) algebra, trajectory sampling, ego-frame conversion, box projection
//! and rectangle-based occlusion accounting.

mod occlusion;

pub use occlusion::{
    occlusion_fraction, occlusion_from_boxes, project_box, rect_union_area, PlacedBox, Rect,
};

use crate::scene::{Pose, Trajectory};
use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

/// `a ∘ b`: apply `b` first, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let q = a.rotation.quaternion() * b.rotation.quaternion();
    Pose {
        rotation: UnitQuaternion::new_normalize(q),
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn inverse(p: &Pose) -> Pose {
    let r = p.rotation.inverse();
    Pose {
        rotation: r,
        translation: -(r * p.translation),
    }
}

/// Vehicle pose expressed in the ego frame: `inverse(ego) ∘ vehicle`.
pub fn ego_frame_pose(ego: &Pose, vehicle: &Pose) -> Pose {
    compose(&inverse(ego), vehicle)
}

/// Shortest-arc spherical interpolation; `t = 0` gives `a`, `t = 1` gives `b`.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let qa = a.quaternion();
    let mut qb = *b.quaternion();
    let mut dot = qa.coords.dot(&qb.coords);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    if dot > 1.0 - 1e-12 {
        let q = Quaternion::from(qa.coords * (1.0 - t) + qb.coords * t);
        return UnitQuaternion::new_normalize(q);
    }
    let theta = dot.min(1.0).acos();
    let s = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / s;
    let wb = (t * theta).sin() / s;
    UnitQuaternion::new_normalize(Quaternion::from(qa.coords * wa + qb.coords * wb))
}

/// Pose at time `t`: linear in translation, slerp in rotation, clamped to the
/// first and last samples.
///
/// Panics on an empty trajectory.
pub fn sample_trajectory(traj: &Trajectory, t: f64) -> Pose {
    let s = &traj.samples;
    assert!(!s.is_empty(), "sample_trajectory on empty trajectory {}", traj.asset_id);
    if t <= s[0].time {
        return s[0].pose;
    }
    let last = s[s.len() - 1];
    if t >= last.time {
        return last.pose;
    }
    // first index with time > t; t is strictly inside so 1 <= hi < len
    let hi = s.partition_point(|x| x.time <= t);
    let (a, b) = (&s[hi - 1], &s[hi]);
    if t == a.time {
        return a.pose;
    }
    let u = (t - a.time) / (b.time - a.time);
    Pose {
        rotation: slerp(&a.pose.rotation, &b.pose.rotation, u),
        translation: a.pose.translation * (1.0 - u) + b.pose.translation * u,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDistanceWeights {
    pub rotation_weight: f64,
}

impl Default for PoseDistanceWeights {
    fn default() -> Self {
        Self {
            rotation_weight: 0.1,
        }
    }
}

/// `‖p_a − p_b‖₂ + w · ‖R_a − R_b‖_F`.
pub fn pose_distance(a: &Pose, b: &Pose, w: PoseDistanceWeights) -> f64 {
    let dt = (a.translation - b.translation).norm();
    let dr = (a.rotation_matrix() - b.rotation_matrix()).norm();
    dt + w.rotation_weight * dr
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Pose, b: &Pose, tol: f64) -> bool {
        let dq = a.rotation.quaternion().coords.dot(&b.rotation.quaternion().coords).abs();
        (a.translation - b.translation).norm() < tol && (1.0 - dq) < tol
    }

    prop_compose! {
        fn arb_pose()(axis in prop::array::uniform3(-1.0f64..1.0), angle in -3.0f64..3.0,
                      t in prop::array::uniform3(-50.0f64..50.0)) -> Pose {
            let ax = Vector3::from(axis);
            let rot = if ax.norm() < 1e-3 { UnitQuaternion::identity() } else {
                UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(ax), angle)
            };
            Pose::new(rot, Vector3::from(t))
        }
    }

    #[test]
    fn compose_examples() {
        let p = Pose::from_yaw(0.7, Vector3::new(1.0, -2.0, 3.0));
        assert!(close(&compose(&Pose::identity(), &p), &p, 1e-12));
        assert!(close(&compose(&p, &inverse(&p)), &Pose::identity(), 1e-9));
        let c = compose(&Pose::from_translation(1.0, 0.0, 0.0), &Pose::from_translation(0.0, 2.0, 0.0));
        assert_eq!(c.translation, Vector3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(inverse(&Pose::identity()), Pose::identity());
        let inv = inverse(&Pose::from_translation(3.0, 0.0, 0.0));
        assert_eq!(inv.translation, Vector3::new(-3.0, 0.0, 0.0));
    }

    #[test]
    fn ego_frame_examples() {
        let e = Pose::from_yaw(0.3, Vector3::new(4.0, 1.0, 0.0));
        assert!(close(&ego_frame_pose(&e, &e), &Pose::identity(), 1e-12));
        let v = Pose::from_yaw(-1.1, Vector3::new(7.0, 2.0, 0.5));
        assert!(close(&ego_frame_pose(&Pose::identity(), &v), &v, 1e-12));
        let d = ego_frame_pose(&Pose::from_translation(5.0, 0.0, 0.0), &Pose::from_translation(7.0, 0.0, 0.0));
        assert!((d.translation - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn sample_trajectory_examples() {
        use crate::scene::TimedPose;
        let traj = Trajectory::new(
            "a",
            vec![
                TimedPose { time: 0.0, pose: Pose::from_yaw(0.0, Vector3::zeros()) },
                TimedPose { time: 1.0, pose: Pose::from_yaw(FRAC_PI_2, Vector3::new(2.0, 0.0, 0.0)) },
            ],
        );
        assert_eq!(sample_trajectory(&traj, 1.0), traj.samples[1].pose);
        assert_eq!(sample_trajectory(&traj, 0.0), traj.samples[0].pose);
        let mid = sample_trajectory(&traj, 0.5);
        assert!((mid.translation - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((mid.yaw() - FRAC_PI_2 / 2.0).abs() < 1e-12);
        // clamping
        assert_eq!(sample_trajectory(&traj, -3.0), traj.samples[0].pose);
        assert_eq!(sample_trajectory(&traj, 9.0), traj.samples[1].pose);
    }

    #[test]
    fn slerp_takes_short_arc_for_antipodal_sign() {
        let a = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.1);
        let b = UnitQuaternion::new_unchecked(-*UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.3).quaternion());
        let m = slerp(&a, &b, 0.5);
        let yaw = Pose::new(m, Vector3::zeros()).yaw();
        assert!((yaw - 0.2).abs() < 1e-12);
    }

    #[test]
    fn pose_distance_examples() {
        let w = PoseDistanceWeights::default();
        let p = Pose::from_yaw(0.4, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(pose_distance(&p, &p, w), 0.0);
        let d = pose_distance(&Pose::identity(), &Pose::from_translation(1.0, 0.0, 0.0), w);
        assert!((d - 1.0).abs() < 1e-15);
        // ‖R_z(θ) − I‖_F = 2√2·sin(θ/2) = 2 at 90°
        let d = pose_distance(&Pose::identity(), &Pose::from_yaw(FRAC_PI_2, Vector3::zeros()), w);
        assert!((d - 0.2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn group_laws(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = compose(&compose(&a, &b), &c);
            let right = compose(&a, &compose(&b, &c));
            prop_assert!(close(&left, &right, 1e-9));
            prop_assert!(close(&compose(&Pose::identity(), &a), &a, 1e-12));
            prop_assert!(close(&compose(&a, &Pose::identity()), &a, 1e-12));
            prop_assert!(close(&compose(&inverse(&a), &a), &Pose::identity(), 1e-9));
            prop_assert!(close(&inverse(&inverse(&a)), &a, 1e-9));
        }

        #[test]
        fn pose_distance_symmetry_and_translation_triangle(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let w = PoseDistanceWeights::default();
            prop_assert!((pose_distance(&a, &b, w) - pose_distance(&b, &a, w)).abs() < 1e-12);
            prop_assert!(pose_distance(&a, &a, w).abs() < 1e-12);
            let t = PoseDistanceWeights { rotation_weight: 0.0 };
            prop_assert!(pose_distance(&a, &c, t) <= pose_distance(&a, &b, t) + pose_distance(&b, &c, t) + 1e-9);
        }

        #[test]
        fn sampling_is_continuous(a in arb_pose(), b in arb_pose(), c in arb_pose(), t in 0.0f64..2.0) {
            use crate::scene::TimedPose;
            let traj = Trajectory::new("x", vec![
                TimedPose { time: 0.0, pose: a },
                TimedPose { time: 1.0, pose: b },
                TimedPose { time: 2.0, pose: c },
            ]);
            let eps = 1e-7;
            let p = sample_trajectory(&traj, t);
            let q = sample_trajectory(&traj, t + eps);
            prop_assert!((p.translation - q.translation).norm() < 1e-3);
            prop_assert!(p.rotation.angle_to(&q.rotation) < 1e-3);
        }
    }
}
