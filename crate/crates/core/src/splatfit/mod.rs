//! Differentiable photometric refitting of a scene's splat fields and
//! construction of degraded/clean training pairs.

mod pairs;

pub use pairs::{
    build_cycle_pairs, build_mesh_pairs, lighting_jitter, load_pairs, save_pairs, substitution_plan, PairError,
    Provenance, TrainingPair,
};

use crate::raster::{
    normalize_jacobian, place_scene, plan_frame, quat_to_matrix, sh_basis_with_grad, FramePlan, RenderConfig,
};
use crate::scene::{FrameSequence, Scene};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Mean,
    ShDc,
    Opacity,
    Scale,
    Rotation,
}

impl ParamClass {
    pub const ALL: [ParamClass; 5] = [Self::Mean, Self::ShDc, Self::Opacity, Self::Scale, Self::Rotation];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub optimized: BTreeSet<ParamClass>,
    pub render: RenderConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            step_size: 10.0,
            optimized: [ParamClass::Mean, ParamClass::ShDc, ParamClass::Opacity].into(),
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("targets are {got_w}x{got_h}x{got_n}, renders are {want_w}x{want_h}x{want_n}")]
    DimensionMismatch {
        got_w: u32,
        got_h: u32,
        got_n: usize,
        want_w: u32,
        want_h: u32,
        want_n: usize,
    },
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("invalid fit config: {0}")]
    BadConfig(String),
}

/// Which scene field a block of parameters belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldSlot {
    Background,
    Asset(usize),
}

#[derive(Clone, Debug, PartialEq)]
struct FieldBlock {
    slot: FieldSlot,
    offset: usize,
    count: usize,
    sh_len: usize,
}

/// Flat parameter vector over every splat field of a scene.
///
/// Per primitive: mean (3), scale (3), rotation `w, x, y, z` (4, not
/// necessarily unit), opacity (1), then all SH coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatParams {
    pub values: Vec<f64>,
    blocks: Vec<FieldBlock>,
}

const MEAN: usize = 0;
const SCALE: usize = 3;
const ROT: usize = 6;
const OPACITY: usize = 10;
const SH: usize = 11;

impl SplatParams {
    pub fn from_scene(scene: &Scene) -> Self {
        let mut values = Vec::new();
        let mut blocks = Vec::new();
        let fields = std::iter::once((FieldSlot::Background, Some(&scene.background)))
            .chain(scene.assets.iter().enumerate().map(|(i, a)| (FieldSlot::Asset(i), a.splats.as_ref())));
        for (slot, field) in fields {
            let Some(field) = field else { continue };
            let sh_len = 3 * crate::scene::sh_coeff_count(field.sh_degree);
            blocks.push(FieldBlock {
                slot,
                offset: values.len(),
                count: field.primitives.len(),
                sh_len,
            });
            for g in &field.primitives {
                values.extend(g.mean.iter());
                values.extend(g.scale.iter());
                values.extend(g.rotation.quaternion().coords.iter().cycle().skip(3).take(4));
                values.push(g.opacity);
                values.extend(g.sh.iter());
            }
        }
        Self { values, blocks }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn stride(b: &FieldBlock) -> usize {
        SH + b.sh_len
    }

    /// Copy of `scene` with these parameters written into its fields.
    /// Rotations are normalized on the way in.
    pub fn apply(&self, scene: &Scene) -> Scene {
        let mut out = scene.clone();
        for b in &self.blocks {
            let field = match b.slot {
                FieldSlot::Background => &mut out.background,
                FieldSlot::Asset(i) => out.assets[i].splats.as_mut().expect("layout matches scene"),
            };
            let stride = Self::stride(b);
            for (k, g) in field.primitives.iter_mut().enumerate() {
                let p = &self.values[b.offset + k * stride..b.offset + (k + 1) * stride];
                g.mean = Vector3::new(p[MEAN], p[MEAN + 1], p[MEAN + 2]);
                g.scale = Vector3::new(p[SCALE], p[SCALE + 1], p[SCALE + 2]);
                g.rotation = UnitQuaternion::new_normalize(Quaternion::new(p[ROT], p[ROT + 1], p[ROT + 2], p[ROT + 3]));
                g.opacity = p[OPACITY];
                g.sh.copy_from_slice(&p[SH..]);
            }
        }
        out
    }

    /// Indices of every parameter in `class`.
    pub fn indices(&self, class: ParamClass) -> Vec<usize> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let stride = Self::stride(b);
            for k in 0..b.count {
                let base = b.offset + k * stride;
                let r = match class {
                    ParamClass::Mean => MEAN..MEAN + 3,
                    ParamClass::Scale => SCALE..SCALE + 3,
                    ParamClass::Rotation => ROT..ROT + 4,
                    ParamClass::Opacity => OPACITY..OPACITY + 1,
                    ParamClass::ShDc => SH..SH + 3,
                };
                out.extend(r.map(|i| base + i));
            }
        }
        out
    }

    fn offset_of(&self, field: usize, prim: usize) -> (usize, usize) {
        let b = &self.blocks[field];
        (b.offset + prim * Self::stride(b), b.sh_len)
    }

    /// Keeps opacity in [0, 1], scale ≥ `1e-4` and rotations unit length.
    pub fn project_constraints(&mut self) {
        for b in self.blocks.clone() {
            let stride = Self::stride(&b);
            for k in 0..b.count {
                let p = &mut self.values[b.offset + k * stride..b.offset + (k + 1) * stride];
                p[OPACITY] = p[OPACITY].clamp(0.0, 1.0);
                for s in &mut p[SCALE..SCALE + 3] {
                    *s = s.max(MIN_SCALE);
                }
                let n = (p[ROT..ROT + 4].iter().map(|x| x * x).sum::<f64>()).sqrt();
                if n > 0.0 {
                    for q in &mut p[ROT..ROT + 4] {
                        *q /= n;
                    }
                } else {
                    p[ROT..ROT + 4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
                }
            }
        }
    }
}

pub const MIN_SCALE: f64 = 1e-4;

fn check_dims(scene: &Scene, targets: &FrameSequence) -> Result<(), FitError> {
    let (w, h, n) = (scene.camera.width, scene.camera.height, scene.timeline.len());
    if targets.width != w || targets.height != h || targets.len() != n {
        return Err(FitError::DimensionMismatch {
            got_w: targets.width,
            got_h: targets.height,
            got_n: targets.len(),
            want_w: w,
            want_h: h,
            want_n: n,
        });
    }
    Ok(())
}

/// Mean squared RGB error between the scene's render sequence and `targets`.
pub fn photometric_loss(scene: &Scene, targets: &FrameSequence, render: &RenderConfig) -> Result<f64, FitError> {
    check_dims(scene, targets)?;
    let seq = crate::raster::render_sequence(scene, render);
    let n = (seq.pixel_count() * 3 * seq.len()).max(1) as f64;
    let sse: f64 = seq
        .frames
        .iter()
        .zip(&targets.frames)
        .map(|(a, b)| a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    Ok(sse / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub loss: f64,
    /// Same layout as [`SplatParams::values`].
    pub grad: Vec<f64>,
}

/// Per-splat screen-space gradient: mean (2), conic a, b, c (3), color (3),
/// opacity (1).
type ScreenGrad = [f64; 9];

fn add9(a: &mut ScreenGrad, b: &ScreenGrad) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Loss contribution and screen-space gradients of one frame, accumulated per
/// tile and reduced in tile order.
fn frame_backward(plan: &FramePlan, target: &[f64], bg: [f64; 3], norm: f64) -> (f64, Vec<ScreenGrad>) {
    let cam = &plan.cam;
    let per_tile: Vec<(f64, Vec<ScreenGrad>)> = (0..plan.bins.len())
        .into_par_iter()
        .map(|tile| {
            let bin = &plan.bins[tile];
            let mut acc = vec![[0.0; 9]; bin.len()];
            let mut sse = 0.0;
            let mut frags = Vec::new();
            let mut ts = Vec::new();
            for (x, y) in plan.tile_pixels(tile) {
                plan.pixel_fragments(tile, x, y, &mut frags);
                ts.clear();
                let mut t = 1.0;
                let mut color = [0.0; 3];
                for (f, _) in &frags {
                    ts.push(t);
                    for c in 0..3 {
                        color[c] += f.color[c] * f.alpha * t;
                    }
                    t *= 1.0 - f.alpha;
                }
                for c in 0..3 {
                    color[c] += bg[c] * t;
                }
                let idx = (y * cam.width + x) as usize;
                let mut g_c = [0.0; 3];
                for c in 0..3 {
                    let r = color[c] - target[3 * idx + c];
                    sse += r * r;
                    g_c[c] = 2.0 * r / norm;
                }
                if g_c == [0.0; 3] {
                    continue;
                }
                let mut back = bg;
                for (k, (f, sidx)) in frags.iter().enumerate().rev() {
                    let ti = ts[k];
                    if let Some(si) = sidx {
                        let s = &plan.splats[*si as usize];
                        let d_alpha: f64 = (0..3).map(|c| g_c[c] * ti * (f.color[c] - back[c])).sum();
                        let dx = x as f64 + 0.5 - s.mean.x;
                        let dy = y as f64 + 0.5 - s.mean.y;
                        let [a, b, cc] = s.conic;
                        let gauss = (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + cc * dy * dy)).exp();
                        let d_q = d_alpha * (-0.5 * f.alpha);
                        let pos = bin.binary_search(si).expect("splat is binned in its tile");
                        let g = &mut acc[pos];
                        g[0] += d_q * -(2.0 * a * dx + 2.0 * b * dy);
                        g[1] += d_q * -(2.0 * b * dx + 2.0 * cc * dy);
                        g[2] += d_q * dx * dx;
                        g[3] += d_q * 2.0 * dx * dy;
                        g[4] += d_q * dy * dy;
                        for c in 0..3 {
                            g[5 + c] += g_c[c] * f.alpha * ti;
                        }
                        g[8] += d_alpha * gauss;
                    }
                    for c in 0..3 {
                        back[c] = f.color[c] * f.alpha + (1.0 - f.alpha) * back[c];
                    }
                }
            }
            (sse, acc)
        })
        .collect();
    let mut total = vec![[0.0; 9]; plan.splats.len()];
    let mut sse = 0.0;
    for (tile, (s, acc)) in per_tile.into_iter().enumerate() {
        sse += s;
        for (pos, g) in acc.iter().enumerate() {
            add9(&mut total[plan.bins[tile][pos] as usize], g);
        }
    }
    (sse, total)
}

/// Partial derivatives of the rotation matrix with respect to `w, x, y, z`.
fn rotation_partials(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Chains screen-space gradients of every splat in `plan` to the parameter
/// vector.
fn chain_to_params(
    plan: &FramePlan,
    screen: &[ScreenGrad],
    params: &SplatParams,
    field_block: &[Option<usize>],
    config: &RenderConfig,
    grad: &mut [f64],
) {
    let cam = &plan.cam;
    for (s, g) in plan.splats.iter().zip(screen) {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let pf = &plan.fields[s.field as usize];
        let Some(block) = field_block[s.field as usize] else { continue };
        let (base, sh_len) = params.offset_of(block, s.prim as usize);
        let p = &params.values[base..base + SH + sh_len];
        let mean = Vector3::new(p[MEAN], p[MEAN + 1], p[MEAN + 2]);
        let scale = Vector3::new(p[SCALE], p[SCALE + 1], p[SCALE + 2]);
        let qraw = Vector4::new(p[ROT], p[ROT + 1], p[ROT + 2], p[ROT + 3]);
        let qn = qraw.norm();
        let q = qraw / qn;
        let rot = quat_to_matrix(&Vector4::new(q[1], q[2], q[3], q[0]));
        let w = pf.cam_from_local.rotation_matrix();
        let t = pf.cam_from_local.transform_point(&mean);
        let (iz, iz2, iz3) = (1.0 / t.z, 1.0 / (t.z * t.z), 1.0 / (t.z * t.z * t.z));
        let j = Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * t.x * iz2, 0.0, cam.fy * iz, -cam.fy * t.y * iz2);
        let m_s = rot * Matrix3::from_diagonal(&scale);
        let sigma = m_s * m_s.transpose();
        let tm = j * w;

        // conic → covariance
        let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let g_conic = Matrix2::new(g[2], g[3] / 2.0, g[3] / 2.0, g[4]);
        let g_cov = -conic * g_conic * conic;
        // covariance → Σ and J
        let g_sigma = tm.transpose() * g_cov * tm;
        let g_t = (g_cov + g_cov.transpose()) * tm * sigma;
        let g_j = g_t * w.transpose();
        // Σ → scale and rotation
        let g_ms = (g_sigma + g_sigma.transpose()) * m_s;
        let mut d_scale = Vector3::<f64>::zeros();
        for k in 0..3 {
            d_scale[k] = (0..3).map(|r| g_ms[(r, k)] * rot[(r, k)]).sum::<f64>();
        }
        let g_rot = g_ms * Matrix3::from_diagonal(&scale);
        let partials = rotation_partials(&q);
        let d_qhat = Vector4::from_fn(|k, _| g_rot.component_mul(&partials[k]).sum());
        let d_q = (nalgebra::Matrix4::identity() - q * q.transpose()) / qn * d_qhat;

        // mean2d and J → camera-space mean
        let mut d_t = Vector3::new(
            g[0] * cam.fx * iz,
            g[1] * cam.fy * iz,
            -g[0] * cam.fx * t.x * iz2 - g[1] * cam.fy * t.y * iz2,
        );
        d_t.x += g_j[(0, 2)] * -cam.fx * iz2;
        d_t.y += g_j[(1, 2)] * -cam.fy * iz2;
        d_t.z += g_j[(0, 0)] * -cam.fx * iz2
            + g_j[(1, 1)] * -cam.fy * iz2
            + g_j[(0, 2)] * 2.0 * cam.fx * t.x * iz3
            + g_j[(1, 2)] * 2.0 * cam.fy * t.y * iz3;
        let mut d_mean = w.transpose() * d_t;

        // color → SH and view direction
        let degree = config.sh_degree_used.min(pf.field.sh_degree);
        let view = mean - pf.cam_center_local;
        let dir = view.normalize();
        let (basis, dbasis) = sh_basis_with_grad(&dir, degree);
        let sh = &p[SH..];
        let mut d_dir = Vector3::zeros();
        for c in 0..3 {
            let raw = 0.5 + basis.iter().enumerate().map(|(k, b)| b * sh[3 * k + c]).sum::<f64>();
            if !(raw > 0.0 && raw < 1.0) {
                continue;
            }
            let gc = g[5 + c];
            for (k, b) in basis.iter().enumerate() {
                grad[base + SH + 3 * k + c] += gc * b;
                for a in 0..3 {
                    d_dir[a] += gc * sh[3 * k + c] * dbasis[k][a];
                }
            }
        }
        d_mean += normalize_jacobian(&view) * d_dir;

        for k in 0..3 {
            grad[base + MEAN + k] += d_mean[k];
            grad[base + SCALE + k] += d_scale[k];
        }
        for k in 0..4 {
            grad[base + ROT + k] += d_q[k];
        }
        grad[base + OPACITY] += g[8];
    }
}

/// Parameter block of each field `place_scene` emits, in emission order.
fn placed_blocks(scene: &Scene) -> Vec<Option<usize>> {
    let mut v = vec![Some(0)];
    let mut next = 1;
    for a in &scene.assets {
        if a.splats.is_none() {
            continue;
        }
        if scene.trajectory(&a.id).is_some_and(|tr| !tr.samples.is_empty()) {
            v.push(Some(next));
        }
        next += 1;
    }
    v
}

/// Loss and its exact gradient with respect to every parameter of every
/// splat field, holding the per-frame depth order fixed. Entries outside
/// `config.optimized` are zeroed.
pub fn grad_photometric(scene: &Scene, targets: &FrameSequence, config: &FitConfig) -> Result<Gradient, FitError> {
    check_dims(scene, targets)?;
    let params = SplatParams::from_scene(scene);
    let mut grad = vec![0.0; params.len()];
    let norm = (scene.camera.pixel_count() * 3 * scene.timeline.len()).max(1) as f64;
    let field_block = placed_blocks(scene);
    let mut sse = 0.0;
    for (fi, &t) in scene.timeline.iter().enumerate() {
        let (fields, mesh) = place_scene(scene, t);
        let plan = plan_frame(&scene.camera, fields, mesh, &config.render);
        let (s, screen) = frame_backward(&plan, &targets.frames[fi].rgb, config.render.background_color, norm);
        sse += s;
        chain_to_params(&plan, &screen, &params, &field_block, &config.render, &mut grad);
    }
    let mut mask = vec![false; grad.len()];
    for class in &config.optimized {
        for i in params.indices(*class) {
            mask[i] = true;
        }
    }
    for (g, m) in grad.iter_mut().zip(mask) {
        if !m {
            *g = 0.0;
        }
    }
    Ok(Gradient { loss: sse / norm, grad })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub scene: Scene,
    /// Loss before each step, then the final loss.
    pub loss_history: Vec<f64>,
}

impl FitResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history holds at least the final loss")
    }
}

/// Fixed-step gradient descent on the scene's splat fields toward `targets`
/// rendered under the scene's own trajectories and camera.
pub fn fit_field(init: &Scene, targets: &FrameSequence, config: &FitConfig) -> Result<FitResult, FitError> {
    if !(config.step_size > 0.0) {
        return Err(FitError::BadConfig(format!("step_size must be positive, got {}", config.step_size)));
    }
    check_dims(init, targets)?;
    let mut scene = init.clone();
    let mut params = SplatParams::from_scene(init);
    let mut history = Vec::with_capacity(config.iterations + 1);
    for it in 0..config.iterations {
        let g = grad_photometric(&scene, targets, config)?;
        if !g.loss.is_finite() || g.grad.iter().any(|x| !x.is_finite()) {
            return Err(FitError::NonFiniteLoss(it));
        }
        history.push(g.loss);
        for (v, d) in params.values.iter_mut().zip(&g.grad) {
            *v -= config.step_size * d;
        }
        params.project_constraints();
        scene = params.apply(init);
    }
    let last = photometric_loss(&scene, targets, &config.render)?;
    if !last.is_finite() {
        return Err(FitError::NonFiniteLoss(config.iterations));
    }
    history.push(last);
    Ok(FitResult {
        scene,
        loss_history: history,
    })
}
