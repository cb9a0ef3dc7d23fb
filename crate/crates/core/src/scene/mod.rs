//! Scene-domain types: poses, trajectories, splat fields, meshes, assets and
//! rendered frame buffers, plus their on-disk formats.

mod frames;
mod io;
mod ply;
mod validate;

pub use frames::{export_png, load_frames, save_frames, FramesError};
pub(crate) use frames::frame_to_rgb8;
pub use io::{load_scene, save_scene, SceneIoError, MANIFEST_FILE};
pub use ply::{import_splats_ply, parse_splats_ply, write_splats_ply, PlyError};
pub use validate::{validate_frames, validate_masks, validate_scene, Violation, ViolationCode};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Rigid transform: rotation as a unit quaternion, translation in meters.
///
/// A pose maps points from its local frame into the parent frame:
/// `p_parent = R * p_local + t`.
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
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::new(x, y, z))
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation,
        )
    }

    /// Builds a pose from raw `(w, x, y, z)` components without normalizing.
    /// Used by loaders so that `validate_scene` can report bad quaternions.
    pub fn from_raw(wxyz: [f64; 4], translation: [f64; 3]) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self::new(
            UnitQuaternion::new_unchecked(q),
            Vector3::new(translation[0], translation[1], translation[2]),
        )
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Heading about +z, assuming an upright pose.
    pub fn yaw(&self) -> f64 {
        let fwd = self.rotation * Vector3::x();
        fwd.y.atan2(fwd.x)
    }

    pub fn is_finite(&self) -> bool {
        self.wxyz().iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            rotation: self.wxyz(),
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        Ok(Pose::from_raw(r.rotation, r.translation))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub time: f64,
    pub pose: Pose,
}

pub const EGO_ID: &str = "ego";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub asset_id: String,
    pub samples: Vec<TimedPose>,
}

impl Trajectory {
    pub fn new(asset_id: impl Into<String>, samples: Vec<TimedPose>) -> Self {
        Self {
            asset_id: asset_id.into(),
            samples,
        }
    }

    /// A trajectory that stays at `pose` for every time in `times`.
    pub fn stationary(asset_id: impl Into<String>, pose: Pose, times: &[f64]) -> Self {
        Self::new(
            asset_id,
            times.iter().map(|&time| TimedPose { time, pose }).collect(),
        )
    }

    /// Constant-velocity straight motion from `start` to `end` over `times`,
    /// heading fixed to `yaw`.
    pub fn linear(
        asset_id: impl Into<String>,
        start: Vector3<f64>,
        end: Vector3<f64>,
        yaw: f64,
        times: &[f64],
    ) -> Self {
        let t0 = times.first().copied().unwrap_or(0.0);
        let t1 = times.last().copied().unwrap_or(0.0);
        let span = (t1 - t0).max(f64::MIN_POSITIVE);
        Self::new(
            asset_id,
            times
                .iter()
                .map(|&time| {
                    let a = if times.len() > 1 { (time - t0) / span } else { 0.0 };
                    TimedPose {
                        time,
                        pose: Pose::from_yaw(yaw, start + (end - start) * a),
                    }
                })
                .collect(),
        )
    }

    pub fn start_time(&self) -> f64 {
        self.samples.first().map_or(0.0, |s| s.time)
    }

    pub fn end_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.time)
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.time).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Same camera with every intrinsic and the resolution multiplied by `k`.
    pub fn scaled(&self, k: u32) -> Self {
        let f = k as f64;
        Self {
            fx: self.fx * f,
            fy: self.fy * f,
            cx: self.cx * f,
            cy: self.cy * f,
            width: self.width * k,
            height: self.height * k,
            ..*self
        }
    }
}

/// Rig pose for a forward-looking camera mounted `height` meters above the
/// ego origin. Camera axes: x right, y down, z forward; ego axes: x forward,
/// y left, z up.
pub fn forward_camera_rig(height: f64) -> Pose {
    let m = Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    );
    let rot = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m));
    Pose::new(rot, Vector3::new(0.0, 0.0, height))
}

/// One anisotropic 3D gaussian. `sh` is coefficient-major: coefficient `k`
/// of channel `c` lives at `sh[3 * k + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub sh: Vec<f64>,
}

pub fn sh_coeff_count(degree: u8) -> usize {
    let l = degree as usize + 1;
    l * l
}

impl GaussianPrimitive {
    /// Degree-0 primitive with the given base color (pre-offset colors in [0,1]).
    pub fn solid(mean: Vector3<f64>, scale: Vector3<f64>, opacity: f64, rgb: [f64; 3]) -> Self {
        Self {
            mean,
            scale,
            rotation: UnitQuaternion::identity(),
            opacity,
            sh: rgb.iter().map(|c| (c - 0.5) / crate::raster::SH_C0).collect(),
        }
    }

    pub fn dc(&self) -> [f64; 3] {
        [self.sh[0], self.sh[1], self.sh[2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldFrame {
    World,
    AssetLocal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    pub primitives: Vec<GaussianPrimitive>,
    pub frame: FieldFrame,
    pub sh_degree: u8,
    /// Permits an empty primitive list (background only).
    pub allow_empty: bool,
}

impl GaussianField {
    pub fn new(primitives: Vec<GaussianPrimitive>, frame: FieldFrame, sh_degree: u8) -> Self {
        Self {
            primitives,
            frame,
            sh_degree,
            allow_empty: false,
        }
    }

    pub fn empty(frame: FieldFrame) -> Self {
        Self {
            primitives: Vec::new(),
            frame,
            sh_degree: 0,
            allow_empty: true,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub vertex_colors: Vec<[f64; 3]>,
}

impl TriangleMesh {
    /// Axis-aligned box mesh centered at the origin with a single color.
    pub fn cuboid(length: f64, width: f64, height: f64, color: [f64; 3]) -> Self {
        let (hx, hy, hz) = (length / 2.0, width / 2.0, height / 2.0);
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            vertices.push(Vector3::new(
                if i & 1 == 0 { -hx } else { hx },
                if i & 2 == 0 { -hy } else { hy },
                if i & 4 == 0 { -hz } else { hz },
            ));
        }
        let triangles = vec![
            [0, 2, 6], [0, 6, 4], // -x
            [1, 5, 7], [1, 7, 3], // +x
            [0, 4, 5], [0, 5, 1], // -y
            [2, 3, 7], [2, 7, 6], // +y
            [0, 1, 3], [0, 3, 2], // -z
            [4, 6, 7], [4, 7, 5], // +z
        ];
        Self {
            vertices,
            triangles,
            vertex_colors: vec![color; 8],
        }
    }

    /// Cuboid whose front (+x) top edge is pulled back by `taper` of the
    /// length, giving a shape that is not symmetric under a half-turn yaw.
    pub fn wedge(length: f64, width: f64, height: f64, taper: f64, color: [f64; 3]) -> Self {
        let mut m = Self::cuboid(length, width, height, color);
        for v in &mut m.vertices {
            if v.x > 0.0 && v.z > 0.0 {
                v.x -= taper * length;
            }
        }
        m
    }

    /// Flat rectangle in the z = 0 plane spanning `[x0,x1] × [y0,y1]`.
    pub fn plane(x0: f64, x1: f64, y0: f64, y1: f64, color: [f64; 3]) -> Self {
        Self {
            vertices: vec![
                Vector3::new(x0, y0, 0.0),
                Vector3::new(x1, y0, 0.0),
                Vector3::new(x1, y1, 0.0),
                Vector3::new(x0, y1, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            vertex_colors: vec![color; 4],
        }
    }

    /// Axis-aligned bounds `(min, max)`; `None` for a mesh without vertices.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox3D {
    /// (length, width, height) in meters along the box-local x, y, z axes.
    pub size: [f64; 3],
    pub center_pose: Pose,
}

impl BoundingBox3D {
    pub fn new(length: f64, width: f64, height: f64) -> Self {
        Self {
            size: [length, width, height],
            center_pose: Pose::identity(),
        }
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        Vector3::new(self.size[0], self.size[1], self.size[2]) * 0.5
    }

    /// Corner points in the box's parent frame.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let h = self.half_extents();
        std::array::from_fn(|i| {
            let local = Vector3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            );
            self.center_pose.transform_point(&local)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetClass {
    Vehicle,
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidAsset {
    pub id: String,
    pub klass: AssetClass,
    pub splats: Option<GaussianField>,
    pub mesh: Option<TriangleMesh>,
    /// Box in the asset-local frame (x forward, y left, z up, origin at center).
    pub bbox: BoundingBox3D,
    pub lidar_point_counts: Option<Vec<u32>>,
}

impl RigidAsset {
    /// Vehicle asset backed by a single-color cuboid mesh matching its box.
    pub fn cuboid_vehicle(id: impl Into<String>, size: [f64; 3], color: [f64; 3]) -> Self {
        Self {
            id: id.into(),
            klass: AssetClass::Vehicle,
            splats: None,
            mesh: Some(TriangleMesh::cuboid(size[0], size[1], size[2], color)),
            bbox: BoundingBox3D::new(size[0], size[1], size[2]),
            lidar_point_counts: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub background: GaussianField,
    pub assets: Vec<RigidAsset>,
    /// One trajectory per asset, matched by `asset_id`.
    pub trajectories: Vec<Trajectory>,
    pub ego: Trajectory,
    pub camera: CameraModel,
    /// Pose of the camera in the ego frame: `world_from_camera = ego ∘ rig`.
    pub rig: Pose,
    pub timeline: Vec<f64>,
}

impl Scene {
    pub fn asset(&self, id: &str) -> Option<&RigidAsset> {
        self.assets.iter().find(|a| a.id == id)
    }

    pub fn asset_index(&self, id: &str) -> Option<usize> {
        self.assets.iter().position(|a| a.id == id)
    }

    pub fn trajectory(&self, id: &str) -> Option<&Trajectory> {
        if id == EGO_ID {
            return Some(&self.ego);
        }
        self.trajectories.iter().find(|t| t.asset_id == id)
    }

    pub fn trajectory_mut(&mut self, id: &str) -> Option<&mut Trajectory> {
        if id == EGO_ID {
            return Some(&mut self.ego);
        }
        self.trajectories.iter_mut().find(|t| t.asset_id == id)
    }

    /// World-from-camera pose at time `t`.
    pub fn camera_pose(&self, t: f64) -> Pose {
        crate::geometry::compose(&crate::geometry::sample_trajectory(&self.ego, t), &self.rig)
    }
}

/// One rendered frame. Pixel `(x, y)` lives at index `y * width + x`; RGB is
/// interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    /// Index into `FrameSequence::instance_labels`, or [`NO_INSTANCE`].
    pub instance: Vec<u32>,
}

pub const NO_INSTANCE: u32 = u32::MAX;

impl Frame {
    pub fn filled(width: u32, height: u32, color: [f64; 3], depth: f64) -> Self {
        let n = width as usize * height as usize;
        let mut rgb = Vec::with_capacity(n * 3);
        for _ in 0..n {
            rgb.extend_from_slice(&color);
        }
        Self {
            rgb,
            depth: vec![depth; n],
            instance: vec![NO_INSTANCE; n],
        }
    }

    pub fn pixel(&self, idx: usize) -> [f64; 3] {
        [self.rgb[3 * idx], self.rgb[3 * idx + 1], self.rgb[3 * idx + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub width: u32,
    pub height: u32,
    pub frames: Vec<Frame>,
    pub times: Vec<f64>,
    pub instance_labels: Vec<String>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn label_index(&self, id: &str) -> Option<u32> {
        self.instance_labels.iter().position(|l| l == id).map(|i| i as u32)
    }

    /// Mean absolute RGB difference against `other`; `None` on shape mismatch.
    pub fn mean_abs_diff(&self, other: &FrameSequence) -> Option<f64> {
        if self.width != other.width || self.height != other.height || self.len() != other.len() {
            return None;
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (a, b) in self.frames.iter().zip(&other.frames) {
            for (x, y) in a.rgb.iter().zip(&b.rgb) {
                sum += (x - y).abs();
                n += 1;
            }
        }
        Some(if n == 0 { 0.0 } else { sum / n as f64 })
    }
}

/// Per-frame binary masks keyed by instance id.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMaskSequence {
    pub width: u32,
    pub height: u32,
    pub masks: Vec<BTreeMap<String, Vec<bool>>>,
}

impl InstanceMaskSequence {
    /// Masks of every labeled instance visible in each frame.
    pub fn from_frames(seq: &FrameSequence) -> Self {
        let masks = seq
            .frames
            .iter()
            .map(|f| {
                let mut per: BTreeMap<String, Vec<bool>> = BTreeMap::new();
                for (i, &id) in f.instance.iter().enumerate() {
                    if id == NO_INSTANCE {
                        continue;
                    }
                    let Some(label) = seq.instance_labels.get(id as usize) else {
                        continue;
                    };
                    per.entry(label.clone())
                        .or_insert_with(|| vec![false; f.instance.len()])[i] = true;
                }
                per
            })
            .collect();
        Self {
            width: seq.width,
            height: seq.height,
            masks,
        }
    }

    pub fn mask(&self, frame: usize, id: &str) -> Option<&Vec<bool>> {
        self.masks.get(frame)?.get(id)
    }

    /// Union of all instance masks in `frame`.
    pub fn union(&self, frame: usize) -> Vec<bool> {
        let n = self.width as usize * self.height as usize;
        let mut out = vec![false; n];
        if let Some(m) = self.masks.get(frame) {
            for mask in m.values() {
                for (o, &v) in out.iter_mut().zip(mask) {
                    *o |= v;
                }
            }
        }
        out
    }
}
