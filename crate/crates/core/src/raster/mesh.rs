use super::Fragment;
use crate::geometry::compose;
use crate::scene::{CameraModel, Pose, TriangleMesh, NO_INSTANCE};
use nalgebra::Vector3;

#[derive(Clone, Copy)]
struct ClipVert {
    p: Vector3<f64>,
    color: [f64; 3],
}

fn lerp(a: &ClipVert, b: &ClipVert, t: f64) -> ClipVert {
    let mut color = [0.0; 3];
    for (c, o) in color.iter_mut().enumerate() {
        *o = a.color[c] + (b.color[c] - a.color[c]) * t;
    }
    ClipVert {
        p: a.p + (b.p - a.p) * t,
        color,
    }
}

/// Sutherland–Hodgman against `z >= near` in camera space.
fn clip_near(tri: [ClipVert; 3], near: f64) -> Vec<ClipVert> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = &tri[i];
        let b = &tri[(i + 1) % 3];
        let (ina, inb) = (a.p.z >= near, b.p.z >= near);
        if ina {
            out.push(*a);
        }
        if ina != inb {
            let t = (near - a.p.z) / (b.p.z - a.p.z);
            let mut v = lerp(a, b, t);
            v.p.z = near;
            out.push(v);
        }
    }
    out
}

/// Writes the mesh into a per-pixel z-buffer of opaque fragments. Closer
/// fragments replace farther ones; on equal depth the earlier write stays.
pub fn rasterize_mesh_into(
    buffer: &mut [Option<Fragment>],
    mesh: &TriangleMesh,
    cam_from_local: &Pose,
    cam: &CameraModel,
    instance: u32,
) {
    let (w, h) = (cam.width as i64, cam.height as i64);
    debug_assert_eq!(buffer.len(), cam.pixel_count());
    let verts: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| cam_from_local.transform_point(v)).collect();
    for tri in &mesh.triangles {
        let cv = tri.map(|i| ClipVert {
            p: verts[i as usize],
            color: mesh.vertex_colors[i as usize],
        });
        let poly = clip_near(cv, cam.near);
        if poly.len() < 3 {
            continue;
        }
        let screen: Vec<(f64, f64, f64)> = poly
            .iter()
            .map(|v| (cam.fx * v.p.x / v.p.z + cam.cx, cam.fy * v.p.y / v.p.z + cam.cy, 1.0 / v.p.z))
            .collect();
        for k in 1..poly.len() - 1 {
            let idx = [0, k, k + 1];
            let s = idx.map(|i| screen[i]);
            let area = (s[1].0 - s[0].0) * (s[2].1 - s[0].1) - (s[2].0 - s[0].0) * (s[1].1 - s[0].1);
            if area.abs() < 1e-12 || !area.is_finite() {
                continue;
            }
            let xmin = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let xmax = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let ymin = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let ymax = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let x0 = ((xmin - 0.5).ceil() as i64).max(0);
            let x1 = ((xmax - 0.5).floor() as i64).min(w - 1);
            let y0 = ((ymin - 0.5).ceil() as i64).max(0);
            let y1 = ((ymax - 0.5).floor() as i64).min(h - 1);
            for py in y0..=y1 {
                let fy = py as f64 + 0.5;
                for px in x0..=x1 {
                    let fx = px as f64 + 0.5;
                    let edge = |a: (f64, f64, f64), b: (f64, f64, f64)| (b.0 - a.0) * (fy - a.1) - (fx - a.0) * (b.1 - a.1);
                    let b0 = edge(s[1], s[2]) / area;
                    let b1 = edge(s[2], s[0]) / area;
                    let b2 = edge(s[0], s[1]) / area;
                    if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                        continue;
                    }
                    let inv_z = b0 * s[0].2 + b1 * s[1].2 + b2 * s[2].2;
                    let depth = 1.0 / inv_z;
                    if !(depth >= cam.near) || depth > cam.far {
                        continue;
                    }
                    let slot = &mut buffer[(py * w + px) as usize];
                    if slot.is_some_and(|f| f.depth <= depth) {
                        continue;
                    }
                    let wts = [b0 * s[0].2 * depth, b1 * s[1].2 * depth, b2 * s[2].2 * depth];
                    let mut color = [0.0; 3];
                    for (c, o) in color.iter_mut().enumerate() {
                        *o = (0..3).map(|j| wts[j] * poly[idx[j]].color[c]).sum::<f64>().clamp(0.0, 1.0);
                    }
                    *slot = Some(Fragment {
                        depth,
                        color,
                        alpha: 1.0,
                        instance,
                    });
                }
            }
        }
    }
}

/// Z-buffered, perspective-correct fill of `mesh` placed at `world_pose`.
/// Back faces are drawn; every fragment is opaque.
pub fn rasterize_mesh(
    mesh: &TriangleMesh,
    world_pose: &Pose,
    cam_from_world: &Pose,
    cam: &CameraModel,
) -> Vec<Option<Fragment>> {
    let mut buf = vec![None; cam.pixel_count()];
    rasterize_mesh_into(&mut buf, mesh, &compose(cam_from_world, world_pose), cam, NO_INSTANCE);
    buf
}
