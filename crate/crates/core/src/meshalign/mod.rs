//! Scale and heading alignment of a canonical mesh to a ground-truth box,
//! scored by depth agreement and footprint overlap.

use crate::geometry::{compose, inverse, project_box, sample_trajectory, Rect};
use crate::raster::{rasterize_mesh, render_frame, Fragment, RenderConfig};
use crate::scene::{frame_to_rgb8, BoundingBox3D, CameraModel, Pose, Scene, TriangleMesh};
use nalgebra::{UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const GRID_POINTS: usize = 101;
/// Scores closer than this count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("unknown asset {0}")]
    UnknownAsset(String),
    #[error("asset {0} has no per-frame lidar point counts")]
    MissingLidarCounts(String),
    #[error("asset {0} has no mesh")]
    MissingMesh(String),
    #[error("asset {0} has no trajectory sample")]
    MissingTrajectory(String),
    #[error("mesh has no vertices or zero length")]
    DegenerateMesh,
    #[error("lambda must be non-negative, got {0}")]
    BadLambda(f64),
    #[error("scale must be positive, got {0}")]
    BadScale(f64),
    #[error("box does not project into the image")]
    BoxOffscreen,
    #[error("every grid score is infinite")]
    AllScoresInfinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub frame: usize,
    /// Every count is zero, so the choice carries no information.
    pub degenerate: bool,
}

/// Frame with the most lidar points on `id`; earliest on ties.
pub fn best_observation_frame(scene: &Scene, id: &str) -> Result<ObservationFrame, AlignError> {
    let asset = scene.asset(id).ok_or_else(|| AlignError::UnknownAsset(id.into()))?;
    let counts = asset
        .lidar_point_counts
        .as_ref()
        .filter(|c| !c.is_empty())
        .ok_or_else(|| AlignError::MissingLidarCounts(id.into()))?;
    let mut best = 0;
    for (i, c) in counts.iter().enumerate() {
        if *c > counts[best] {
            best = i;
        }
    }
    Ok(ObservationFrame {
        frame: best,
        degenerate: counts.iter().all(|c| *c == 0),
    })
}

/// The box pose and the same pose turned half a revolution about its up axis.
pub fn candidate_headings(bbox: &BoundingBox3D) -> [Pose; 2] {
    let turn = Pose::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI), Vector3::zeros());
    [bbox.center_pose, compose(&bbox.center_pose, &turn)]
}

/// Depth over a pixel rectangle; `None` marks invalid pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthCrop {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
    pub depth: Vec<Option<f64>>,
}

impl DepthCrop {
    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        self.depth[((y - self.y0) * self.width + (x - self.x0)) as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentProblem {
    /// Canonical upright mesh of unknown scale.
    pub mesh: TriangleMesh,
    /// Box with its world pose in `center_pose`.
    pub gt_box: BoundingBox3D,
    pub gt_depth: DepthCrop,
    pub camera: CameraModel,
    /// World-from-camera pose.
    pub camera_pose: Pose,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// `+∞` when the rendered mesh and the valid ground truth share no pixel.
    pub score: f64,
    pub depth_rms: Option<f64>,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub scale: f64,
    pub heading: usize,
    pub score: f64,
    pub initial_scale: f64,
    /// `(s, score)` per grid point, one curve per heading candidate.
    pub score_curve: [Vec<(f64, f64)>; 2],
}

fn mesh_length(mesh: &TriangleMesh) -> Result<f64, AlignError> {
    let (lo, hi) = mesh.bounds().ok_or(AlignError::DegenerateMesh)?;
    let len = hi.x - lo.x;
    if !(len > 0.0) {
        return Err(AlignError::DegenerateMesh);
    }
    Ok(len)
}

/// Mesh scaled by `s` about its bounding-box center, which lands on the origin.
pub fn scaled_mesh(mesh: &TriangleMesh, s: f64) -> TriangleMesh {
    let (lo, hi) = mesh.bounds().unwrap_or_default();
    let c = (lo + hi) / 2.0;
    TriangleMesh {
        vertices: mesh.vertices.iter().map(|v| (v - c) * s).collect(),
        ..mesh.clone()
    }
}

/// Projected rectangle of the box, clipped to the image.
pub fn box_rect(problem: &AlignmentProblem) -> Option<Rect> {
    let local = BoundingBox3D {
        size: problem.gt_box.size,
        center_pose: Pose::identity(),
    };
    project_box(
        &local,
        &problem.gt_box.center_pose,
        &problem.camera_pose,
        &problem.camera,
        &Pose::identity(),
    )
}

/// Pixel bounds `[x0, x1) × [y0, y1)` touched by a continuous rectangle.
pub fn pixel_bounds(r: &Rect, cam: &CameraModel) -> (u32, u32, u32, u32) {
    let cx = |v: f64, hi: u32| (v.max(0.0) as u32).min(hi);
    (
        cx(r.x0.floor(), cam.width),
        cx(r.y0.floor(), cam.height),
        cx(r.x1.ceil(), cam.width),
        cx(r.y1.ceil(), cam.height),
    )
}

fn footprint_rect(frags: &[Option<Fragment>], cam: &CameraModel) -> Option<Rect> {
    let mut r: Option<(u32, u32, u32, u32)> = None;
    for (i, f) in frags.iter().enumerate() {
        if f.is_none() {
            continue;
        }
        let (x, y) = (i as u32 % cam.width, i as u32 / cam.width);
        r = Some(match r {
            None => (x, y, x, y),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
        });
    }
    r.map(|(a, b, c, d)| Rect::new(a as f64, b as f64, c as f64 + 1.0, d as f64 + 1.0))
}

fn render_candidate(problem: &AlignmentProblem, s: f64, heading: &Pose) -> Vec<Option<Fragment>> {
    let mesh = scaled_mesh(&problem.mesh, s);
    rasterize_mesh(&mesh, heading, &inverse(&problem.camera_pose), &problem.camera)
}

/// Depth RMS over pixels valid in both maps minus `λ·IoU` of the mesh
/// footprint rectangle against the box rectangle.
pub fn alignment_score(problem: &AlignmentProblem, s: f64, heading: &Pose) -> Result<Score, AlignError> {
    if !(s > 0.0) {
        return Err(AlignError::BadScale(s));
    }
    if !(problem.lambda >= 0.0) {
        return Err(AlignError::BadLambda(problem.lambda));
    }
    let cam = &problem.camera;
    let frags = render_candidate(problem, s, heading);
    let crop = &problem.gt_depth;
    let (mut sum, mut n) = (0.0, 0usize);
    for y in crop.y0..crop.y0 + crop.height {
        for x in crop.x0..crop.x0 + crop.width {
            if x >= cam.width || y >= cam.height {
                continue;
            }
            if let (Some(gt), Some(f)) = (crop.get(x, y), frags[(y * cam.width + x) as usize]) {
                sum += (f.depth - gt) * (f.depth - gt);
                n += 1;
            }
        }
    }
    let iou = match (footprint_rect(&frags, cam), box_rect(problem)) {
        (Some(a), Some(b)) => a.iou(&b),
        _ => 0.0,
    };
    if n == 0 {
        return Ok(Score {
            score: f64::INFINITY,
            depth_rms: None,
            iou,
        });
    }
    let rms = (sum / n as f64).sqrt();
    Ok(Score {
        score: rms - problem.lambda * iou,
        depth_rms: Some(rms),
        iou,
    })
}

/// Box length over mesh bounding length.
pub fn initial_scale(problem: &AlignmentProblem) -> Result<f64, AlignError> {
    Ok(problem.gt_box.size[0] / mesh_length(&problem.mesh)?)
}

pub fn scale_grid(s0: f64) -> Vec<f64> {
    (0..GRID_POINTS).map(|i| s0 * (50 + i) as f64 / 100.0).collect()
}

/// Grid search over scale and both heading candidates.
///
/// Candidates are visited by increasing scale, candidate 0 before 1, and a
/// later one wins only if it beats the best so far by more than
/// [`TIE_TOLERANCE`].
pub fn align_mesh(problem: &AlignmentProblem) -> Result<AlignmentResult, AlignError> {
    let s0 = initial_scale(problem)?;
    if !(problem.lambda >= 0.0) {
        return Err(AlignError::BadLambda(problem.lambda));
    }
    let heads = candidate_headings(&problem.gt_box);
    let grid = scale_grid(s0);
    let scores: Vec<[f64; 2]> = grid
        .par_iter()
        .map(|&s| -> Result<[f64; 2], AlignError> {
            Ok([alignment_score(problem, s, &heads[0])?.score, alignment_score(problem, s, &heads[1])?.score])
        })
        .collect::<Result<_, _>>()?;
    let mut best: Option<(f64, usize, f64)> = None;
    for (s, pair) in grid.iter().zip(&scores) {
        for (h, &v) in pair.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            if best.is_none_or(|(_, _, b)| v < b - TIE_TOLERANCE) {
                best = Some((*s, h, v));
            }
        }
    }
    let (scale, heading, score) = best.ok_or(AlignError::AllScoresInfinite)?;
    let curve = |h: usize| grid.iter().zip(&scores).map(|(s, p)| (*s, p[h])).collect();
    Ok(AlignmentResult {
        scale,
        heading,
        score,
        initial_scale: s0,
        score_curve: [curve(0), curve(1)],
    })
}

/// Builds the problem for asset `id` of `scene` at its best observation
/// frame, with depth taken from the scene render where the asset is visible.
pub fn problem_from_scene(scene: &Scene, id: &str, mesh: Option<TriangleMesh>, lambda: f64) -> Result<(AlignmentProblem, ObservationFrame), AlignError> {
    let obs = best_observation_frame(scene, id)?;
    let asset = scene.asset(id).expect("checked above");
    let label = scene.asset_index(id).expect("checked above") as u32;
    let mesh = mesh.or_else(|| asset.mesh.clone()).ok_or_else(|| AlignError::MissingMesh(id.into()))?;
    let traj = scene
        .trajectory(id)
        .filter(|t| !t.samples.is_empty())
        .ok_or_else(|| AlignError::MissingTrajectory(id.into()))?;
    let t = scene.timeline[obs.frame.min(scene.timeline.len().saturating_sub(1))];
    let gt_box = BoundingBox3D {
        size: asset.bbox.size,
        center_pose: compose(&sample_trajectory(traj, t), &asset.bbox.center_pose),
    };
    let frame = render_frame(scene, t, &RenderConfig::default());
    let mut problem = AlignmentProblem {
        mesh,
        gt_box,
        gt_depth: DepthCrop {
            x0: 0,
            y0: 0,
            width: 0,
            height: 0,
            depth: Vec::new(),
        },
        camera: scene.camera,
        camera_pose: scene.camera_pose(t),
        lambda,
    };
    let rect = box_rect(&problem).ok_or(AlignError::BoxOffscreen)?;
    let (x0, y0, x1, y1) = pixel_bounds(&rect, &scene.camera);
    let mut depth = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
    for y in y0..y1 {
        for x in x0..x1 {
            let i = (y * scene.camera.width + x) as usize;
            depth.push((frame.instance[i] == label).then_some(frame.depth[i]));
        }
    }
    problem.gt_depth = DepthCrop {
        x0,
        y0,
        width: x1 - x0,
        height: y1 - y0,
        depth,
    };
    Ok((problem, obs))
}

/// Depth crop of `mesh` rendered at scale `s` and pose `heading` over the
/// problem's box rectangle, for building synthetic ground truth.
pub fn render_depth_crop(problem: &AlignmentProblem, s: f64, heading: &Pose) -> Result<DepthCrop, AlignError> {
    let rect = box_rect(problem).ok_or(AlignError::BoxOffscreen)?;
    let cam = &problem.camera;
    let (x0, y0, x1, y1) = pixel_bounds(&rect, cam);
    let frags = render_candidate(problem, s, heading);
    let mut depth = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
    for y in y0..y1 {
        for x in x0..x1 {
            depth.push(frags[(y * cam.width + x) as usize].map(|f| f.depth));
        }
    }
    Ok(DepthCrop {
        x0,
        y0,
        width: x1 - x0,
        height: y1 - y0,
        depth,
    })
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("oracle exited with {0}")]
    Failed(String),
    #[error("oracle answered {0:?}, expected \"0\" or \"1\"")]
    BadAnswer(String),
    #[error("image write failed: {0}")]
    Image(#[from] image::ImageError),
}

/// What a heading oracle is shown: one color render per candidate at the
/// chosen scale.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadingQuery {
    pub width: u32,
    pub height: u32,
    pub renders: [Vec<f64>; 2],
    pub scale: f64,
    pub scores: [f64; 2],
}

pub trait HeadingOracle {
    fn choose(&self, query: &HeadingQuery) -> Result<usize, OracleError>;
}

/// External command oracle. The query directory receives `candidate_0.png`,
/// `candidate_1.png` and `query.json`; the command runs with the query
/// directory as its last argument and must print `0` or `1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandOracle {
    pub program: String,
    pub args: Vec<String>,
    pub workdir: PathBuf,
}

#[derive(Serialize)]
struct QueryManifest<'a> {
    candidates: [&'a str; 2],
    scale: f64,
    scores: [Option<f64>; 2],
    answer: &'a str,
}

impl HeadingOracle for CommandOracle {
    fn choose(&self, query: &HeadingQuery) -> Result<usize, OracleError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| OracleError::Io { path, source }
        };
        std::fs::create_dir_all(&self.workdir).map_err(io(&self.workdir))?;
        let names = ["candidate_0.png", "candidate_1.png"];
        for (name, rgb) in names.iter().zip(&query.renders) {
            frame_to_rgb8(query.width, query.height, rgb).save(self.workdir.join(name))?;
        }
        let manifest = QueryManifest {
            candidates: names,
            scale: query.scale,
            scores: query.scores.map(|s| s.is_finite().then_some(s)),
            answer: "print 0 or 1: the candidate whose front faces the direction of travel",
        };
        let p = self.workdir.join("query.json");
        std::fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io(&p))?;
        let out = std::process::Command::new(&self.program)
            .args(&self.args)
            .arg(&self.workdir)
            .output()
            .map_err(io(Path::new(&self.program)))?;
        if !out.status.success() {
            return Err(OracleError::Failed(out.status.to_string()));
        }
        let answer = String::from_utf8_lossy(&out.stdout).trim().to_string();
        match answer.as_str() {
            "0" => Ok(0),
            "1" => Ok(1),
            _ => Err(OracleError::BadAnswer(answer)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadingSource {
    Oracle,
    Score,
    /// The oracle failed and the score decided.
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadingDecision {
    pub candidate: usize,
    pub source: HeadingSource,
    pub oracle_error: Option<String>,
}

fn color_render(problem: &AlignmentProblem, s: f64, heading: &Pose) -> Vec<f64> {
    render_candidate(problem, s, heading)
        .iter()
        .flat_map(|f| f.map_or([0.0; 3], |f| f.color))
        .collect()
}

/// Oracle answer when one is configured and answers; otherwise the lower
/// aligned score.
pub fn resolve_heading(
    problem: &AlignmentProblem,
    result: &AlignmentResult,
    oracle: Option<&dyn HeadingOracle>,
) -> HeadingDecision {
    let Some(oracle) = oracle else {
        return HeadingDecision {
            candidate: result.heading,
            source: HeadingSource::Score,
            oracle_error: None,
        };
    };
    let heads = candidate_headings(&problem.gt_box);
    let at = |h: usize| {
        result.score_curve[h]
            .iter()
            .find(|(s, _)| *s == result.scale)
            .map_or(f64::INFINITY, |(_, v)| *v)
    };
    let query = HeadingQuery {
        width: problem.camera.width,
        height: problem.camera.height,
        renders: [color_render(problem, result.scale, &heads[0]), color_render(problem, result.scale, &heads[1])],
        scale: result.scale,
        scores: [at(0), at(1)],
    };
    match oracle.choose(&query) {
        Ok(c) => HeadingDecision {
            candidate: c,
            source: HeadingSource::Oracle,
            oracle_error: None,
        },
        Err(e) => HeadingDecision {
            candidate: result.heading,
            source: HeadingSource::Fallback,
            oracle_error: Some(e.to_string()),
        },
    }
}

#[cfg(test)]
mod tests;
