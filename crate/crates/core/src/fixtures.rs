//! Procedurally generated scenes that ship with the library.

use crate::scene::{
    forward_camera_rig, AssetClass, BoundingBox3D, CameraModel, FieldFrame, GaussianField, GaussianPrimitive, Pose,
    RigidAsset, Scene, Trajectory, TriangleMesh, EGO_ID,
};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EXAMPLE_SEED: u64 = 20_240_917;

pub fn example_camera() -> CameraModel {
    CameraModel {
        fx: 40.0,
        fy: 40.0,
        cx: 32.0,
        cy: 24.0,
        width: 64,
        height: 48,
        near: 0.1,
        far: 120.0,
    }
}

pub fn example_timeline() -> Vec<f64> {
    (0..8).map(|i| i as f64 * 0.25).collect()
}

/// A vehicle carrying both a splat cluster and a cuboid mesh of the same
/// box, so it can be drawn either way.
pub fn splat_vehicle(id: &str, size: [f64; 3], color: [f64; 3], rng: &mut ChaCha8Rng) -> RigidAsset {
    let mut asset = RigidAsset::cuboid_vehicle(id, size, color);
    let [l, w, h] = size;
    let mut prims = Vec::new();
    for ix in 0..3 {
        for iy in 0..2 {
            for iz in 0..2 {
                let mean = Vector3::new(
                    (ix as f64 - 1.0) * l / 3.0,
                    (iy as f64 - 0.5) * w / 2.0,
                    (iz as f64 - 0.5) * h / 2.0,
                );
                let jitter: f64 = rng.random_range(-0.05..0.05);
                let rgb = color.map(|c| (c + jitter).clamp(0.02, 0.98));
                prims.push(GaussianPrimitive::solid(
                    mean,
                    Vector3::new(l / 5.0, w / 4.0, h / 4.0),
                    0.9,
                    rgb,
                ));
            }
        }
    }
    asset.splats = Some(GaussianField::new(prims, FieldFrame::AssetLocal, 0));
    asset.lidar_point_counts = Some((0..example_timeline().len()).map(|_| rng.random_range(50..400)).collect());
    asset
}

/// Road plane as an `Other`-class mesh-only asset.
pub fn road_asset() -> RigidAsset {
    RigidAsset {
        id: "road".into(),
        klass: AssetClass::Other,
        splats: None,
        mesh: Some(TriangleMesh::plane(-40.0, 40.0, -7.0, 7.0, [0.32, 0.32, 0.34])),
        bbox: BoundingBox3D {
            size: [80.0, 14.0, 0.02],
            center_pose: Pose::from_translation(0.0, 0.0, -0.01),
        },
        lidar_point_counts: None,
    }
}

/// Roadside background: two rows of blobs flanking the road plus a few far
/// ones ahead, all degree 1 so view dependence is exercised.
pub fn example_background(rng: &mut ChaCha8Rng) -> GaussianField {
    let mut prims = Vec::new();
    for side in [-1.0, 1.0] {
        for i in 0..14 {
            let x = 14.0 + i as f64 * 3.5 + rng.random_range(-0.5..0.5);
            let y = side * (8.5 + rng.random_range(0.0..2.0));
            let z = rng.random_range(0.5..4.0);
            let rgb = [
                rng.random_range(0.15..0.45),
                rng.random_range(0.35..0.75),
                rng.random_range(0.15..0.45),
            ];
            let mut g = GaussianPrimitive::solid(
                Vector3::new(x, y, z),
                Vector3::new(rng.random_range(0.8..1.8), rng.random_range(0.6..1.2), rng.random_range(0.8..2.0)),
                rng.random_range(0.6..0.95),
                rgb,
            );
            g.rotation = UnitQuaternion::from_euler_angles(0.0, 0.0, rng.random_range(-0.6..0.6));
            g.sh.extend((0..9).map(|_| rng.random_range(-0.08..0.08)));
            prims.push(g);
        }
    }
    for i in 0..8 {
        let mut g = GaussianPrimitive::solid(
            Vector3::new(70.0, -21.0 + 6.0 * i as f64, rng.random_range(3.0..9.0)),
            Vector3::new(1.0, 3.0, 3.0),
            0.8,
            [0.55, 0.65, 0.85],
        );
        g.sh.extend((0..9).map(|_| rng.random_range(-0.05..0.05)));
        prims.push(g);
    }
    GaussianField::new(prims, FieldFrame::World, 1)
}

/// The bundled example: 36 background splats, two splat-and-mesh vehicles
/// (one ahead in the ego lane, one oncoming), and a road plane mesh.
pub fn example_scene() -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(EXAMPLE_SEED);
    let times = example_timeline();
    let background = example_background(&mut rng);
    let lead = splat_vehicle("car_lead", [4.5, 1.9, 1.5], [0.75, 0.12, 0.1], &mut rng);
    let oncoming = splat_vehicle("car_oncoming", [4.2, 1.8, 1.4], [0.1, 0.2, 0.7], &mut rng);
    let span = times[times.len() - 1];
    let trajectories = vec![
        Trajectory::linear("car_lead", Vector3::new(14.0, 0.0, 0.75), Vector3::new(14.0 + 6.0 * span, 0.0, 0.75), 0.0, &times),
        Trajectory::linear(
            "car_oncoming",
            Vector3::new(34.0, 3.5, 0.7),
            Vector3::new(34.0 - 8.0 * span, 3.5, 0.7),
            std::f64::consts::PI,
            &times,
        ),
        Trajectory::stationary("road", Pose::from_translation(30.0, 0.0, 0.0), &times),
    ];
    Scene {
        id: "example".into(),
        background,
        assets: vec![lead, oncoming, road_asset()],
        trajectories,
        ego: Trajectory::linear(EGO_ID, Vector3::zeros(), Vector3::new(5.0 * span, 0.0, 0.0), 0.0, &times),
        camera: example_camera(),
        rig: forward_camera_rig(1.5),
        timeline: times,
    }
}

/// Scene with no assets and an empty background, for building test cases.
pub fn empty_scene(camera: CameraModel, timeline: Vec<f64>) -> Scene {
    let mut background = GaussianField::empty(FieldFrame::World);
    background.allow_empty = true;
    Scene {
        id: "empty".into(),
        background,
        assets: Vec::new(),
        trajectories: Vec::new(),
        ego: Trajectory::stationary(EGO_ID, Pose::identity(), &timeline),
        camera,
        rig: forward_camera_rig(0.0),
        timeline,
    }
}
