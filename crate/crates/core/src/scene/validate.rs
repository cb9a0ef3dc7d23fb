use super::*;
use std::collections::BTreeSet;
use std::fmt;

/// Splat blobs store f32, so primitive quaternions are only unit to f32 precision.
const PRIMITIVE_QUAT_TOL: f64 = 1e-6;
const POSE_QUAT_TOL: f64 = 1e-9;
const ASSET_EXTENT_SLACK: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationCode {
    PoseNotUnit,
    PoseNonFinite,
    TrajectoryEmpty,
    TrajectoryTimesNotIncreasing,
    CameraFocalNonPositive,
    CameraClipRange,
    CameraSize,
    PrimitiveScaleNonPositive,
    PrimitiveOpacityRange,
    PrimitiveShLength,
    PrimitiveRotationNotUnit,
    PrimitiveNonFinite,
    FieldEmpty,
    FieldDegreeRange,
    FieldFrameMismatch,
    MeshIndexOutOfRange,
    MeshNonFinite,
    MeshColorCount,
    BoxSizeNonPositive,
    AssetNoGeometry,
    AssetGeometryOutsideBox,
    AssetDuplicateId,
    AssetMissingTrajectory,
    TrajectoryDuplicate,
    TrajectoryOrphan,
    EgoMissing,
    TimelineEmpty,
    TimelineNotIncreasing,
    FrameDimensionMismatch,
    FrameNegativeDepth,
    MaskDimensionMismatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub code: ViolationCode,
    /// Location of the offending value, e.g. `assets[2].mesh.triangles[5]`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}: {}", self.code, self.path, self.message)
    }
}

#[derive(Default)]
struct Sink(Vec<Violation>);

impl Sink {
    fn push(&mut self, code: ViolationCode, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Violation {
            code,
            path: path.into(),
            message: message.into(),
        });
    }
}

fn check_pose(s: &mut Sink, pose: &Pose, path: &str) {
    if !pose.is_finite() {
        s.push(ViolationCode::PoseNonFinite, path, "non-finite pose component");
        return;
    }
    let n = pose.rotation.quaternion().norm();
    if (n - 1.0).abs() > POSE_QUAT_TOL {
        s.push(ViolationCode::PoseNotUnit, path, format!("quaternion norm {n}"));
    }
}

fn check_trajectory(s: &mut Sink, traj: &Trajectory, path: &str) {
    if traj.samples.is_empty() {
        s.push(ViolationCode::TrajectoryEmpty, path, "no samples");
    }
    for (i, w) in traj.samples.windows(2).enumerate() {
        if !(w[1].time > w[0].time) {
            s.push(
                ViolationCode::TrajectoryTimesNotIncreasing,
                format!("{path}.samples[{}]", i + 1),
                format!("time {} after {}", w[1].time, w[0].time),
            );
        }
    }
    for (i, sample) in traj.samples.iter().enumerate() {
        check_pose(s, &sample.pose, &format!("{path}.samples[{i}].pose"));
    }
}

fn check_camera(s: &mut Sink, cam: &CameraModel) {
    if !(cam.fx > 0.0 && cam.fy > 0.0) {
        s.push(ViolationCode::CameraFocalNonPositive, "camera", "fx and fy must be positive");
    }
    if !(cam.near > 0.0 && cam.near < cam.far) {
        s.push(ViolationCode::CameraClipRange, "camera", "require 0 < near < far");
    }
    if cam.width < 1 || cam.height < 1 {
        s.push(ViolationCode::CameraSize, "camera", "width and height must be at least 1");
    }
}

fn check_field(s: &mut Sink, field: &GaussianField, expected: FieldFrame, path: &str) {
    if field.frame != expected {
        s.push(
            ViolationCode::FieldFrameMismatch,
            path,
            format!("expected {expected:?} frame, found {:?}", field.frame),
        );
    }
    if field.sh_degree > 3 {
        s.push(ViolationCode::FieldDegreeRange, path, "sh degree above 3");
    }
    if field.is_empty() && !field.allow_empty {
        s.push(ViolationCode::FieldEmpty, path, "empty field not flagged as empty");
    }
    let want = sh_coeff_count(field.sh_degree.min(3)) * 3;
    for (i, g) in field.primitives.iter().enumerate() {
        let p = format!("{path}.primitives[{i}]");
        let finite = g.mean.iter().chain(g.scale.iter()).all(|v| v.is_finite())
            && g.rotation.quaternion().coords.iter().all(|v| v.is_finite())
            && g.opacity.is_finite()
            && g.sh.iter().all(|v| v.is_finite());
        if !finite {
            s.push(ViolationCode::PrimitiveNonFinite, &p, "non-finite parameter");
            continue;
        }
        if g.scale.iter().any(|&v| v <= 0.0) {
            s.push(ViolationCode::PrimitiveScaleNonPositive, &p, "scale must be positive");
        }
        if !(0.0..=1.0).contains(&g.opacity) {
            s.push(ViolationCode::PrimitiveOpacityRange, &p, format!("opacity {}", g.opacity));
        }
        if g.sh.len() != want {
            s.push(
                ViolationCode::PrimitiveShLength,
                &p,
                format!("{} sh values, degree {} needs {want}", g.sh.len(), field.sh_degree),
            );
        }
        let n = g.rotation.quaternion().norm();
        if (n - 1.0).abs() > PRIMITIVE_QUAT_TOL {
            s.push(ViolationCode::PrimitiveRotationNotUnit, &p, format!("quaternion norm {n}"));
        }
    }
}

fn check_mesh(s: &mut Sink, mesh: &TriangleMesh, path: &str) {
    let nv = mesh.vertices.len();
    if mesh.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
        s.push(ViolationCode::MeshNonFinite, path, "non-finite vertex");
    }
    if mesh.vertex_colors.len() != nv {
        s.push(
            ViolationCode::MeshColorCount,
            path,
            format!("{} colors for {nv} vertices", mesh.vertex_colors.len()),
        );
    }
    for (i, t) in mesh.triangles.iter().enumerate() {
        if t.iter().any(|&v| v as usize >= nv) {
            s.push(
                ViolationCode::MeshIndexOutOfRange,
                format!("{path}.triangles[{i}]"),
                format!("index out of range for {nv} vertices"),
            );
        }
    }
}

fn check_asset(s: &mut Sink, a: &RigidAsset, path: &str) {
    if a.bbox.size.iter().any(|&v| !(v > 0.0)) {
        s.push(ViolationCode::BoxSizeNonPositive, format!("{path}.box"), "box size must be positive");
    }
    check_pose(s, &a.bbox.center_pose, &format!("{path}.box.center_pose"));
    if a.splats.is_none() && a.mesh.is_none() {
        s.push(ViolationCode::AssetNoGeometry, path, "asset has neither splats nor mesh");
    }
    if let Some(f) = &a.splats {
        check_field(s, f, FieldFrame::AssetLocal, &format!("{path}.splats"));
    }
    if let Some(m) = &a.mesh {
        check_mesh(s, m, &format!("{path}.mesh"));
    }
    let limit = a.bbox.half_extents() * ASSET_EXTENT_SLACK;
    let inv = crate::geometry::inverse(&a.bbox.center_pose);
    let outside = |p: &Vector3<f64>| {
        let q = inv.transform_point(p);
        (0..3).any(|k| q[k].abs() > limit[k])
    };
    let mesh_out = a.mesh.as_ref().is_some_and(|m| m.vertices.iter().any(outside));
    let splat_out = a
        .splats
        .as_ref()
        .is_some_and(|f| f.primitives.iter().any(|g| outside(&g.mean)));
    if mesh_out || splat_out {
        s.push(
            ViolationCode::AssetGeometryOutsideBox,
            path,
            "geometry extends beyond 1.5x the box extents",
        );
    }
}

/// Checks every scene invariant; an empty list means the scene is valid.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut s = Sink::default();
    check_camera(&mut s, &scene.camera);
    check_pose(&mut s, &scene.rig, "rig");
    check_field(&mut s, &scene.background, FieldFrame::World, "background");

    if scene.timeline.is_empty() {
        s.push(ViolationCode::TimelineEmpty, "timeline", "no frame times");
    }
    for (i, w) in scene.timeline.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            s.push(
                ViolationCode::TimelineNotIncreasing,
                format!("timeline[{}]", i + 1),
                format!("time {} does not follow {}", w[1], w[0]),
            );
        }
    }

    if scene.ego.samples.is_empty() || scene.ego.asset_id != EGO_ID {
        s.push(ViolationCode::EgoMissing, "ego_trajectory", "ego trajectory missing");
    }
    check_trajectory(&mut s, &scene.ego, "ego_trajectory");

    let mut ids = BTreeSet::new();
    for (i, a) in scene.assets.iter().enumerate() {
        let path = format!("assets[{i}]");
        if !ids.insert(a.id.as_str()) || a.id == EGO_ID {
            s.push(ViolationCode::AssetDuplicateId, &path, format!("duplicate id {:?}", a.id));
        }
        check_asset(&mut s, a, &path);
        match scene.trajectories.iter().filter(|t| t.asset_id == a.id).count() {
            0 => s.push(
                ViolationCode::AssetMissingTrajectory,
                &path,
                format!("asset {:?} has no trajectory", a.id),
            ),
            1 => {}
            n => s.push(
                ViolationCode::TrajectoryDuplicate,
                &path,
                format!("asset {:?} has {n} trajectories", a.id),
            ),
        }
    }
    for (i, t) in scene.trajectories.iter().enumerate() {
        let path = format!("trajectories[{i}]");
        if !ids.contains(t.asset_id.as_str()) {
            s.push(
                ViolationCode::TrajectoryOrphan,
                &path,
                format!("trajectory for unknown asset {:?}", t.asset_id),
            );
        }
        check_trajectory(&mut s, t, &path);
    }
    s.0
}

/// Checks a frame sequence: shared dimensions and non-negative depth.
pub fn validate_frames(seq: &FrameSequence) -> Vec<Violation> {
    let mut s = Sink::default();
    let n = seq.pixel_count();
    if seq.times.len() != seq.frames.len() {
        s.push(ViolationCode::FrameDimensionMismatch, "times", "one time per frame required");
    }
    for (i, f) in seq.frames.iter().enumerate() {
        let path = format!("frames[{i}]");
        if f.rgb.len() != 3 * n || f.depth.len() != n || f.instance.len() != n {
            s.push(ViolationCode::FrameDimensionMismatch, &path, "buffer sizes disagree");
        }
        if f.depth.iter().any(|d| d.is_nan() || *d < 0.0) {
            s.push(ViolationCode::FrameNegativeDepth, &path, "negative depth");
        }
    }
    s.0
}

/// Checks that masks line up with the frames they describe.
pub fn validate_masks(masks: &InstanceMaskSequence, seq: &FrameSequence) -> Vec<Violation> {
    let mut s = Sink::default();
    if masks.width != seq.width || masks.height != seq.height || masks.masks.len() != seq.len() {
        s.push(ViolationCode::MaskDimensionMismatch, "masks", "mask shape differs from frames");
    }
    let n = seq.pixel_count();
    for (i, m) in masks.masks.iter().enumerate() {
        for (id, mask) in m {
            if mask.len() != n {
                s.push(ViolationCode::MaskDimensionMismatch, format!("masks[{i}].{id}"), "wrong size");
            }
        }
    }
    s.0
}
