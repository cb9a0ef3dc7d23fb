//! Tile-parallel software renderer: gaussian splat projection and
//! front-to-back alpha blending, z-buffered mesh rasterization, and depth
//! composition of both into RGB, depth and instance-id frames.

mod mesh;
mod sh;

pub use mesh::{rasterize_mesh, rasterize_mesh_into};
pub use sh::{sh_basis, sh_basis_with_grad, sh_eval, sh_eval_raw, SH_C0};
pub(crate) use sh::normalize_jacobian;

use crate::geometry::{compose, inverse, sample_trajectory};
use crate::scene::{
    CameraModel, Frame, FrameSequence, GaussianField, GaussianPrimitive, Pose, Scene, NO_INSTANCE,
};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Added to the projected covariance diagonal, in px².
pub const DEFAULT_DILATION: f64 = 0.3;
pub const TRANSMITTANCE_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub sh_degree_used: u8,
    /// Splat footprint radius in standard deviations.
    pub gaussian_cutoff: f64,
    pub background_color: [f64; 3],
    pub tile_size: u32,
    pub dilation: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sh_degree_used: 3,
            gaussian_cutoff: 3.0,
            background_color: [0.0; 3],
            tile_size: 16,
            dilation: DEFAULT_DILATION,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment {
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    /// Label index, or [`NO_INSTANCE`] for background.
    pub instance: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// `R·diag(s)²·Rᵀ` with `R` from `rot` normalized.
pub fn covariance3d(scale: &Vector3<f64>, rot: &nalgebra::Quaternion<f64>) -> Matrix3<f64> {
    let r = quat_to_matrix(&rot.coords.normalize());
    let m = r * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Rotation matrix of a unit quaternion given as `[x, y, z, w]` coords.
pub(crate) fn quat_to_matrix(q: &nalgebra::Vector4<f64>) -> Matrix3<f64> {
    let (x, y, z, w) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub(crate) fn project_with(
    mean: &Vector3<f64>,
    cov3: &Matrix3<f64>,
    cam_from_local: &Pose,
    cam: &CameraModel,
    dilation: f64,
) -> Option<Projection> {
    let t = cam_from_local.transform_point(mean);
    if !(t.z >= cam.near) {
        return None;
    }
    let w = cam_from_local.rotation_matrix();
    let (iz, iz2) = (1.0 / t.z, 1.0 / (t.z * t.z));
    let j = nalgebra::Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * t.x * iz2, 0.0, cam.fy * iz, -cam.fy * t.y * iz2);
    let jw = j * w;
    let cov2d = jw * cov3 * jw.transpose() + Matrix2::identity() * dilation;
    Some(Projection {
        mean2d: Vector2::new(cam.fx * t.x * iz + cam.cx, cam.fy * t.y * iz + cam.cy),
        cov2d,
        depth: t.z,
    })
}

/// Projects one splat; `None` when its center is nearer than `cam.near`.
pub fn project_gaussian(g: &GaussianPrimitive, cam_from_world: &Pose, cam: &CameraModel) -> Option<Projection> {
    let cov3 = covariance3d(&g.scale, g.rotation.quaternion());
    project_with(&g.mean, &cov3, cam_from_world, cam, DEFAULT_DILATION)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blend {
    pub color: [f64; 3],
    /// Accumulated weight `1 − T`.
    pub alpha_total: f64,
    pub depth_front: f64,
    pub instance: u32,
}

/// Front-to-back blend of depth-sorted fragments over `background`.
///
/// Stops once transmittance drops below [`TRANSMITTANCE_EPS`]; the remaining
/// transmittance weights the background. `depth_front` and `instance` come
/// from the first fragment with alpha ≥ 0.5, else `far` and [`NO_INSTANCE`].
pub fn blend_pixel(frags: &[Fragment], background: [f64; 3], far: f64) -> Blend {
    debug_assert!(
        frags.windows(2).all(|w| w[0].depth <= w[1].depth),
        "fragments must be sorted by depth"
    );
    let mut color = [0.0; 3];
    let mut t = 1.0;
    let mut depth_front = far;
    let mut instance = NO_INSTANCE;
    let mut found = false;
    for f in frags {
        let w = f.alpha * t;
        for c in 0..3 {
            color[c] += f.color[c] * w;
        }
        if !found && f.alpha >= 0.5 {
            found = true;
            depth_front = f.depth;
            instance = f.instance;
        }
        t *= 1.0 - f.alpha;
        if t < TRANSMITTANCE_EPS {
            break;
        }
    }
    for c in 0..3 {
        color[c] += background[c] * t;
    }
    Blend {
        color,
        alpha_total: 1.0 - t,
        depth_front,
        instance,
    }
}

/// Inserts each pixel's opaque mesh fragment into its sorted gaussian list,
/// after any gaussian fragments at the same depth.
pub fn composite(gauss: &[Vec<Fragment>], mesh: &[Option<Fragment>]) -> Vec<Vec<Fragment>> {
    gauss
        .iter()
        .zip(mesh)
        .map(|(g, m)| {
            let mut out = g.clone();
            if let Some(m) = m {
                let at = out.partition_point(|f| f.depth <= m.depth);
                out.insert(at, *m);
            }
            out
        })
        .collect()
}

/// One projected splat ready for blending.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Splat2D {
    pub mean: Vector2<f64>,
    /// Inverse 2D covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub instance: u32,
    /// Source field (index into the plan's field list) and primitive.
    pub field: u32,
    pub prim: u32,
    /// Inclusive pixel bounds of the cutoff ellipse.
    pub px: (i64, i64),
    pub py: (i64, i64),
}

/// A field placed in the camera for one frame.
pub(crate) struct PlacedField<'a> {
    pub field: &'a GaussianField,
    pub cam_from_local: Pose,
    pub cam_center_local: Vector3<f64>,
    pub instance: u32,
}

/// Everything needed to shade any pixel of one frame.
pub(crate) struct FramePlan<'a> {
    pub cam: CameraModel,
    pub fields: Vec<PlacedField<'a>>,
    /// Sorted by (depth, field, prim).
    pub splats: Vec<Splat2D>,
    pub tile: u32,
    pub tiles_x: u32,
    /// Per tile, indices into `splats` in ascending order.
    pub bins: Vec<Vec<u32>>,
    pub mesh: Vec<Option<Fragment>>,
    pub cutoff2: f64,
}

impl FramePlan<'_> {
    pub fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (u32, u32)> + '_ {
        let tx = tile as u32 % self.tiles_x;
        let ty = tile as u32 / self.tiles_x;
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        let x1 = (x0 + self.tile).min(self.cam.width);
        let y1 = (y0 + self.tile).min(self.cam.height);
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    /// Alpha of splat `s` at the center of pixel `(x, y)`, or `None` outside
    /// the cutoff.
    #[inline]
    pub fn alpha_at(&self, s: &Splat2D, x: u32, y: u32) -> Option<f64> {
        let dx = x as f64 + 0.5 - s.mean.x;
        let dy = y as f64 + 0.5 - s.mean.y;
        let [a, b, c] = s.conic;
        let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if q > self.cutoff2 {
            return None;
        }
        Some(s.opacity * (-0.5 * q).exp())
    }

    /// Fragments of pixel `(x, y)` in blend order, up to the point where
    /// transmittance falls below [`TRANSMITTANCE_EPS`]. The second element
    /// is the splat index, or `None` for the mesh fragment.
    pub fn pixel_fragments(&self, tile: usize, x: u32, y: u32, out: &mut Vec<(Fragment, Option<u32>)>) {
        out.clear();
        let mut mesh = self.mesh[(y * self.cam.width + x) as usize];
        let mut t = 1.0;
        let mut push = |f: Fragment, idx: Option<u32>, out: &mut Vec<_>| -> bool {
            out.push((f, idx));
            t *= 1.0 - f.alpha;
            t < TRANSMITTANCE_EPS
        };
        for &i in &self.bins[tile] {
            let s = &self.splats[i as usize];
            let Some(alpha) = self.alpha_at(s, x, y) else { continue };
            if let Some(m) = mesh {
                if m.depth < s.depth {
                    mesh = None;
                    if push(m, None, out) {
                        return;
                    }
                }
            }
            let f = Fragment {
                depth: s.depth,
                color: s.color,
                alpha,
                instance: s.instance,
            };
            if push(f, Some(i), out) {
                return;
            }
        }
        if let Some(m) = mesh {
            push(m, None, out);
        }
    }
}

fn conic_of(cov: &Matrix2<f64>) -> Option<[f64; 3]> {
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) {
        return None;
    }
    Some([cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det])
}

/// Fields (background first, then asset splats in scene order) placed at
/// time `t`, and the composed mesh buffer for assets drawn as meshes.
pub(crate) fn place_scene<'a>(scene: &'a Scene, t: f64) -> (Vec<PlacedField<'a>>, Vec<Option<Fragment>>) {
    let cam_from_world = inverse(&scene.camera_pose(t));
    let cam_center_world = scene.camera_pose(t).translation;
    let mut fields = vec![PlacedField {
        field: &scene.background,
        cam_from_local: cam_from_world,
        cam_center_local: cam_center_world,
        instance: NO_INSTANCE,
    }];
    let mut mesh = vec![None; scene.camera.pixel_count()];
    for (label, asset) in scene.assets.iter().enumerate() {
        let Some(traj) = scene.trajectory(&asset.id) else { continue };
        if traj.samples.is_empty() {
            continue;
        }
        let world_from_local = sample_trajectory(traj, t);
        let cam_from_local = compose(&cam_from_world, &world_from_local);
        match (&asset.splats, &asset.mesh) {
            (Some(f), _) => fields.push(PlacedField {
                field: f,
                cam_from_local,
                cam_center_local: inverse(&world_from_local).transform_point(&cam_center_world),
                instance: label as u32,
            }),
            (None, Some(m)) => rasterize_mesh_into(&mut mesh, m, &cam_from_local, &scene.camera, label as u32),
            (None, None) => {}
        }
    }
    (fields, mesh)
}

pub(crate) fn plan_frame<'a>(
    cam: &CameraModel,
    fields: Vec<PlacedField<'a>>,
    mesh: Vec<Option<Fragment>>,
    config: &RenderConfig,
) -> FramePlan<'a> {
    let cutoff2 = config.gaussian_cutoff * config.gaussian_cutoff;
    let (w, h) = (cam.width as i64, cam.height as i64);
    let mut splats = Vec::new();
    for (fi, pf) in fields.iter().enumerate() {
        let degree = config.sh_degree_used.min(pf.field.sh_degree);
        for (pi, g) in pf.field.primitives.iter().enumerate() {
            let cov3 = covariance3d(&g.scale, g.rotation.quaternion());
            let Some(p) = project_with(&g.mean, &cov3, &pf.cam_from_local, cam, config.dilation) else {
                continue;
            };
            if p.depth > cam.far {
                continue;
            }
            let Some(conic) = conic_of(&p.cov2d) else { continue };
            let rx = config.gaussian_cutoff * p.cov2d[(0, 0)].sqrt();
            let ry = config.gaussian_cutoff * p.cov2d[(1, 1)].sqrt();
            let px = (((p.mean2d.x - rx - 0.5).ceil() as i64).max(0), ((p.mean2d.x + rx - 0.5).floor() as i64).min(w - 1));
            let py = (((p.mean2d.y - ry - 0.5).ceil() as i64).max(0), ((p.mean2d.y + ry - 0.5).floor() as i64).min(h - 1));
            if px.0 > px.1 || py.0 > py.1 {
                continue;
            }
            let dir = (g.mean - pf.cam_center_local).normalize();
            splats.push(Splat2D {
                mean: p.mean2d,
                conic,
                depth: p.depth,
                color: sh_eval(&g.sh, &dir, degree),
                opacity: g.opacity,
                instance: pf.instance,
                field: fi as u32,
                prim: pi as u32,
                px,
                py,
            });
        }
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.field.cmp(&b.field)).then(a.prim.cmp(&b.prim)));
    let tile = config.tile_size.max(1);
    let tiles_x = cam.width.div_ceil(tile);
    let tiles_y = cam.height.div_ceil(tile);
    let mut bins = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    let ts = tile as i64;
    for (i, s) in splats.iter().enumerate() {
        for ty in s.py.0 / ts..=s.py.1 / ts {
            for tx in s.px.0 / ts..=s.px.1 / ts {
                bins[(ty * tiles_x as i64 + tx) as usize].push(i as u32);
            }
        }
    }
    FramePlan {
        cam: *cam,
        fields,
        splats,
        tile,
        tiles_x,
        bins,
        mesh,
        cutoff2,
    }
}

/// Shades every pixel of a plan; tiles run in parallel and write disjoint
/// pixels, so the result does not depend on scheduling.
pub(crate) fn shade_plan(plan: &FramePlan, config: &RenderConfig) -> Frame {
    let cam = &plan.cam;
    let tiles: Vec<Vec<(usize, Blend)>> = (0..plan.bins.len())
        .into_par_iter()
        .map(|tile| {
            let mut buf = Vec::new();
            let mut frags = Vec::new();
            let mut out = Vec::new();
            for (x, y) in plan.tile_pixels(tile) {
                plan.pixel_fragments(tile, x, y, &mut buf);
                frags.clear();
                frags.extend(buf.iter().map(|(f, _)| *f));
                let b = blend_pixel(&frags, config.background_color, cam.far);
                out.push(((y * cam.width + x) as usize, b));
            }
            out
        })
        .collect();
    let mut frame = Frame::filled(cam.width, cam.height, config.background_color, cam.far);
    for (idx, b) in tiles.into_iter().flatten() {
        frame.rgb[3 * idx..3 * idx + 3].copy_from_slice(&b.color);
        frame.depth[idx] = b.depth_front;
        frame.instance[idx] = b.instance;
    }
    frame
}

/// Renders the scene at time `t` from the ego camera (`ego(t) ∘ rig`).
///
/// Assets with splats are drawn as splats; assets with only a mesh are drawn
/// as opaque meshes composited by depth.
pub fn render_frame(scene: &Scene, t: f64, config: &RenderConfig) -> Frame {
    let (fields, mesh) = place_scene(scene, t);
    let plan = plan_frame(&scene.camera, fields, mesh, config);
    shade_plan(&plan, config)
}

/// [`render_frame`] at every timeline instant. Instance labels are the asset
/// ids in scene order.
pub fn render_sequence(scene: &Scene, config: &RenderConfig) -> FrameSequence {
    FrameSequence {
        width: scene.camera.width,
        height: scene.camera.height,
        frames: scene.timeline.iter().map(|&t| render_frame(scene, t, config)).collect(),
        times: scene.timeline.clone(),
        instance_labels: scene.assets.iter().map(|a| a.id.clone()).collect(),
    }
}
