use crate::geometry::{compose, sample_trajectory};
use crate::scene::{BoundingBox3D, Pose, Scene};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Two assets whose boxes overlap at `time`. `id_a < id_b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub time: f64,
    pub id_a: String,
    pub id_b: String,
}

/// Separating-axis test for two oriented boxes given in world space.
/// Boxes that only touch do not overlap.
pub fn obb_overlap(a: &BoundingBox3D, pose_a: &Pose, b: &BoundingBox3D, pose_b: &Pose) -> bool {
    let wa = compose(pose_a, &a.center_pose);
    let wb = compose(pose_b, &b.center_pose);
    let ra: Matrix3<f64> = wa.rotation_matrix();
    let rb: Matrix3<f64> = wb.rotation_matrix();
    let (ha, hb) = (a.half_extents(), b.half_extents());
    let d = wb.translation - wa.translation;

    let radius = |r: &Matrix3<f64>, h: &Vector3<f64>, axis: &Vector3<f64>| -> f64 {
        (0..3).map(|i| h[i] * r.column(i).dot(axis).abs()).sum()
    };
    let separated = |axis: Vector3<f64>| -> bool {
        let n = axis.norm();
        if n < 1e-9 {
            return false;
        }
        let axis = axis / n;
        d.dot(&axis).abs() >= radius(&ra, &ha, &axis) + radius(&rb, &hb, &axis)
    };
    for i in 0..3 {
        if separated(ra.column(i).into_owned()) || separated(rb.column(i).into_owned()) {
            return false;
        }
    }
    for i in 0..3 {
        for j in 0..3 {
            if separated(ra.column(i).cross(&rb.column(j))) {
                return false;
            }
        }
    }
    true
}

/// Every (timeline instant, asset pair) whose boxes overlap, sorted by time
/// then ids.
pub fn check_conflicts(scene: &Scene) -> Vec<Conflict> {
    let mut placed: Vec<(&str, &BoundingBox3D, &crate::scene::Trajectory)> = scene
        .assets
        .iter()
        .filter_map(|a| Some((a.id.as_str(), &a.bbox, scene.trajectory(&a.id)?)))
        .filter(|(_, _, t)| !t.samples.is_empty())
        .collect();
    placed.sort_by(|x, y| x.0.cmp(y.0));
    let mut out = Vec::new();
    for &t in &scene.timeline {
        let poses: Vec<Pose> = placed.iter().map(|(_, _, tr)| sample_trajectory(tr, t)).collect();
        for i in 0..placed.len() {
            for j in i + 1..placed.len() {
                if obb_overlap(placed[i].1, &poses[i], placed[j].1, &poses[j]) {
                    out.push(Conflict {
                        time: t,
                        id_a: placed[i].0.to_string(),
                        id_b: placed[j].0.to_string(),
                    });
                }
            }
        }
    }
    out
}
