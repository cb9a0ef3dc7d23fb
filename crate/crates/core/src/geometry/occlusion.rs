use super::{compose, inverse, sample_trajectory};
use crate::scene::{AssetClass, BoundingBox3D, CameraModel, Pose, Scene};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)` in continuous pixel
/// coordinates (pixel `i` spans `[i, i+1)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        !(self.x1 > self.x0 && self.y1 > self.y0)
    }

    pub fn intersect(&self, o: &Rect) -> Rect {
        Rect::new(
            self.x0.max(o.x0),
            self.y0.max(o.y0),
            self.x1.min(o.x1),
            self.y1.min(o.y1),
        )
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn iou(&self, o: &Rect) -> f64 {
        let inter = self.intersect(o).area();
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Exact area of a union of rectangles by coordinate compression.
pub fn rect_union_area(rects: &[Rect]) -> f64 {
    let rects: Vec<&Rect> = rects.iter().filter(|r| !r.is_empty()).collect();
    if rects.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r.x0, r.x1]).collect();
    let mut ys: Vec<f64> = rects.iter().flat_map(|r| [r.y0, r.y1]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut area = 0.0;
    for xw in xs.windows(2) {
        let cx = (xw[0] + xw[1]) / 2.0;
        for yw in ys.windows(2) {
            let cy = (yw[0] + yw[1]) / 2.0;
            if rects.iter().any(|r| r.x0 <= cx && cx < r.x1 && r.y0 <= cy && cy < r.y1) {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area
}

const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1), (2, 3), (4, 5), (6, 7),
    (0, 2), (1, 3), (4, 6), (5, 7),
    (0, 4), (1, 5), (2, 6), (3, 7),
];

/// Pixel-space bounding rectangle of a posed box, clipped to the image.
///
/// Box edges are clipped against the near plane before projection. Returns
/// `None` if nothing of the box lies in front of the near plane or the
/// rectangle misses the image.
pub fn project_box(
    bbox: &BoundingBox3D,
    world_pose: &Pose,
    ego: &Pose,
    cam: &CameraModel,
    rig: &Pose,
) -> Option<Rect> {
    let cam_from_world = inverse(&compose(ego, rig));
    let pts: Vec<Vector3<f64>> = bbox
        .corners()
        .iter()
        .map(|c| cam_from_world.transform_point(&world_pose.transform_point(c)))
        .collect();
    let mut visible: Vec<Vector3<f64>> = pts.iter().filter(|p| p.z >= cam.near).copied().collect();
    for (a, b) in BOX_EDGES {
        let (pa, pb) = (pts[a], pts[b]);
        if (pa.z >= cam.near) != (pb.z >= cam.near) {
            let u = (cam.near - pa.z) / (pb.z - pa.z);
            let mut p = pa + (pb - pa) * u;
            p.z = cam.near;
            visible.push(p);
        }
    }
    if visible.is_empty() {
        return None;
    }
    let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &visible {
        let u = cam.fx * p.x / p.z + cam.cx;
        let v = cam.fy * p.y / p.z + cam.cy;
        r.x0 = r.x0.min(u);
        r.x1 = r.x1.max(u);
        r.y0 = r.y0.min(v);
        r.y1 = r.y1.max(v);
    }
    let r = r.intersect(&Rect::new(0.0, 0.0, cam.width as f64, cam.height as f64));
    (!r.is_empty()).then_some(r)
}

/// A box in world space at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedBox {
    pub id: String,
    pub bbox: BoundingBox3D,
    pub world_pose: Pose,
}

impl PlacedBox {
    fn camera_depth(&self, cam_from_world: &Pose) -> f64 {
        let center = self.world_pose.transform_point(&self.bbox.center_pose.translation);
        cam_from_world.transform_point(&center).z
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OcclusionError {
    #[error("instance {0} not found")]
    UnknownInstance(String),
    #[error("instance {0} does not project into the image")]
    NotVisible(String),
}

/// Fraction of `target`'s projected rectangle covered by the union of the
/// rectangles of `others` whose box centers are nearer to the camera.
pub fn occlusion_from_boxes(
    target: &PlacedBox,
    others: &[PlacedBox],
    ego: &Pose,
    cam: &CameraModel,
    rig: &Pose,
) -> Result<f64, OcclusionError> {
    let rect = project_box(&target.bbox, &target.world_pose, ego, cam, rig)
        .ok_or_else(|| OcclusionError::NotVisible(target.id.clone()))?;
    let cam_from_world = inverse(&compose(ego, rig));
    let depth = target.camera_depth(&cam_from_world);
    let covers: Vec<Rect> = others
        .iter()
        .filter(|o| o.id != target.id && o.camera_depth(&cam_from_world) < depth)
        .filter_map(|o| project_box(&o.bbox, &o.world_pose, ego, cam, rig))
        .map(|r| r.intersect(&rect))
        .collect();
    Ok((rect_union_area(&covers) / rect.area()).clamp(0.0, 1.0))
}

/// Occlusion of vehicle `instance` by the other vehicles of `scene` at time `t`.
pub fn occlusion_fraction(
    scene: &Scene,
    t: f64,
    instance: &str,
    cam: &CameraModel,
    rig: &Pose,
) -> Result<f64, OcclusionError> {
    let place = |id: &str| -> Option<PlacedBox> {
        let a = scene.asset(id)?;
        let traj = scene.trajectory(id)?;
        Some(PlacedBox {
            id: a.id.clone(),
            bbox: a.bbox,
            world_pose: sample_trajectory(traj, t),
        })
    };
    let target = place(instance).ok_or_else(|| OcclusionError::UnknownInstance(instance.into()))?;
    let others: Vec<PlacedBox> = scene
        .assets
        .iter()
        .filter(|a| a.klass == AssetClass::Vehicle && a.id != instance)
        .filter_map(|a| place(&a.id))
        .collect();
    let ego = sample_trajectory(&scene.ego, t);
    occlusion_from_boxes(&target, &others, &ego, cam, rig)
}
