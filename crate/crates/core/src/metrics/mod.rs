//! Benchmark metrics: instance identity (VIMS), background alignment (BAS),
//! judged operation success (OSR) and Fréchet distances over embedder
//! features (FID, FVD), with pluggable embedders and judges.

mod benchmark;
mod embed;
mod fid;
mod osr;

pub use benchmark::{
    reference_category_counts, run_benchmark, BenchmarkManifest, Category, CategoryCell, Manipulation, MetricReport, ObjectType,
    Providers, SceneEntry, SceneResult, Tagged, MANIFEST_VERSION,
};
pub use embed::{
    region_key, ClipEmbedder, EmbeddingProvider, SidecarEmbedder, ToyClipEmbedder, ToyEmbedder, TOY_BINS, TOY_DIM, TOY_GRID,
};
pub use fid::{fid, fit_gaussian, frechet_distance, FidValue, Gaussian, NEG_CLAMP, REGULARIZATION};
pub use osr::{
    annotate, mask_box, osr, parse_score, sample_indices, CommandJudge, ConstantJudge, HashJudge, JudgeError, JudgeProvider,
    OperationKind, OsrResult, OsrVideo, PixelBox, TaskDescriptor, BOX_WIDTH, DEFAULT_K,
};

use crate::geometry::{ego_frame_pose, occlusion_from_boxes, pose_distance, sample_trajectory, PlacedBox, PoseDistanceWeights};
use crate::scene::{AssetClass, BoundingBox3D, CameraModel, Frame, FrameSequence, InstanceMaskSequence, Pose, Scene, Trajectory};
use std::collections::BTreeMap;
use thiserror::Error;

pub const DEFAULT_ROTATION_WEIGHT: f64 = 0.1;
pub const OCCLUSION_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("bundle inconsistent: {0}")]
    Bundle(String),
    #[error("no valid (frame, instance) pairs")]
    NoValidPairs,
    #[error("empty image region")]
    EmptyRegion,
    #[error("empty feature set")]
    EmptyFeatures,
    #[error("feature dimensions differ")]
    FeatureDim,
    #[error("covariance product not positive semidefinite (eigenvalue {0})")]
    NonPsd(f64),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("embedding sidecar: {0}")]
    Sidecar(String),
    #[error("no embedding for region {0}")]
    MissingEmbedding(String),
    #[error("io: {0}")]
    Io(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Row-major RGB image with channels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
}

impl Image {
    pub fn from_frame(frame: &Frame, width: u32, height: u32) -> Self {
        Self {
            width: width as usize,
            height: height as usize,
            rgb: frame.rgb.clone(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Copy with pixels where `keep` is false set to black.
    pub fn masked(&self, keep: &[bool]) -> Self {
        let mut out = self.clone();
        for (i, k) in keep.iter().enumerate() {
            if !k {
                out.rgb[3 * i..3 * i + 3].fill(0.0);
            }
        }
        out
    }

    /// The bounding rectangle of `mask` with out-of-mask pixels black, or
    /// `None` for an empty mask.
    pub fn mask_crop(&self, mask: &[bool]) -> Option<Self> {
        let b = mask_box(mask, self.width, self.height)?;
        let (w, h) = (b.x1 - b.x0, b.y1 - b.y0);
        let mut rgb = Vec::with_capacity(w * h * 3);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let i = y * self.width + x;
                if mask[i] {
                    rgb.extend_from_slice(&self.rgb[3 * i..3 * i + 3]);
                } else {
                    rgb.extend_from_slice(&[0.0; 3]);
                }
            }
        }
        Some(Self { width: w, height: h, rgb })
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// A video with the instance masks, trajectories and boxes needed to score it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBundle {
    pub video: FrameSequence,
    pub masks: InstanceMaskSequence,
    pub ego: Trajectory,
    pub trajectories: BTreeMap<String, Trajectory>,
    pub boxes: BTreeMap<String, BoundingBox3D>,
    pub camera: CameraModel,
    pub rig: Pose,
}

impl EvalBundle {
    /// Vehicles of `scene` with masks from `video`'s instance channel.
    pub fn from_scene(scene: &Scene, video: FrameSequence) -> Self {
        let masks = InstanceMaskSequence::from_frames(&video);
        Self::with_masks(scene, video, masks)
    }

    pub fn with_masks(scene: &Scene, video: FrameSequence, masks: InstanceMaskSequence) -> Self {
        let mut trajectories = BTreeMap::new();
        let mut boxes = BTreeMap::new();
        for a in scene.assets.iter().filter(|a| a.klass == AssetClass::Vehicle) {
            if let Some(t) = scene.trajectory(&a.id) {
                trajectories.insert(a.id.clone(), t.clone());
                boxes.insert(a.id.clone(), a.bbox);
            }
        }
        Self {
            video,
            masks,
            ego: scene.ego.clone(),
            trajectories,
            boxes,
            camera: scene.camera,
            rig: scene.rig,
        }
    }

    pub fn check(&self) -> Result<(), MetricError> {
        let v = &self.video;
        let bad = |m: String| Err(MetricError::Bundle(m));
        if v.is_empty() {
            return bad("empty video".into());
        }
        if v.times.len() != v.len() {
            return bad(format!("{} frames but {} times", v.len(), v.times.len()));
        }
        if self.masks.masks.len() != v.len() || self.masks.width != v.width || self.masks.height != v.height {
            return bad("mask sequence does not match video".into());
        }
        if self.camera.width != v.width || self.camera.height != v.height {
            return bad("camera resolution does not match video".into());
        }
        let px = v.pixel_count();
        if v.frames.iter().any(|f| f.rgb.len() != 3 * px) {
            return bad("frame size does not match video".into());
        }
        if self.masks.masks.iter().flat_map(|m| m.values()).any(|m| m.len() != px) {
            return bad("mask size does not match video".into());
        }
        if let Some(id) = self.trajectories.keys().find(|id| !self.boxes.contains_key(*id)) {
            return bad(format!("trajectory {id} has no box"));
        }
        Ok(())
    }

    pub fn ego_pose(&self, frame: usize) -> Pose {
        sample_trajectory(&self.ego, self.video.times[frame])
    }

    fn placed(&self, id: &str, frame: usize) -> Option<PlacedBox> {
        Some(PlacedBox {
            id: id.to_string(),
            bbox: *self.boxes.get(id)?,
            world_pose: sample_trajectory(self.trajectories.get(id)?, self.video.times[frame]),
        })
    }

    /// Occlusion of `id` by the other vehicles, or `None` if its box does not
    /// project into the image.
    pub fn occlusion(&self, id: &str, frame: usize) -> Option<f64> {
        let target = self.placed(id, frame)?;
        let others: Vec<PlacedBox> = self.trajectories.keys().filter(|o| *o != id).filter_map(|o| self.placed(o, frame)).collect();
        occlusion_from_boxes(&target, &others, &self.ego_pose(frame), &self.camera, &self.rig).ok()
    }

    /// Projects into the image, has a nonempty mask and is occluded by at
    /// most `threshold`.
    pub fn visible(&self, id: &str, frame: usize, threshold: f64) -> bool {
        let has_mask = self.masks.mask(frame, id).is_some_and(|m| m.iter().any(|v| *v));
        has_mask && self.occlusion(id, frame).is_some_and(|o| o <= threshold)
    }

    /// Pose of `id` in the ego frame at `frame`.
    pub fn ego_frame(&self, id: &str, frame: usize) -> Option<Pose> {
        let t = self.video.times[frame];
        Some(ego_frame_pose(&self.ego_pose(frame), &sample_trajectory(self.trajectories.get(id)?, t)))
    }

    pub fn image(&self, frame: usize) -> Image {
        Image::from_frame(&self.video.frames[frame], self.video.width, self.video.height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VimsConfig {
    pub rotation_weight: f64,
    pub occlusion_threshold: f64,
}

impl Default for VimsConfig {
    fn default() -> Self {
        Self {
            rotation_weight: DEFAULT_ROTATION_WEIGHT,
            occlusion_threshold: OCCLUSION_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VimsResult {
    pub score: f64,
    /// Per evaluated instance: mean similarity and number of frames.
    pub per_instance: BTreeMap<String, (f64, usize)>,
    /// Visible generated (frame, instance) pairs with no non-occluded
    /// ground-truth frame.
    pub skipped_pairs: usize,
    /// Instances of the generated bundle absent from the ground truth.
    pub unmatched_instances: Vec<String>,
}

fn argmin_first(it: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, d) in it {
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|b| b.0)
}

/// Ground-truth frame whose ego-frame pose of `id` is nearest the generated
/// one at `t`, among frames where `id` is not occluded. Ties go to the
/// earliest frame.
pub fn match_instance_frame(gen: &EvalBundle, gt: &EvalBundle, id: &str, t: usize, config: &VimsConfig) -> Option<usize> {
    let w = PoseDistanceWeights {
        rotation_weight: config.rotation_weight,
    };
    let p = gen.ego_frame(id, t)?;
    argmin_first(
        (0..gt.video.len())
            .filter(|&k| gt.visible(id, k, config.occlusion_threshold))
            .filter_map(|k| Some((k, pose_distance(&p, &gt.ego_frame(id, k)?, w)))),
    )
}

pub fn vims(gen: &EvalBundle, gt: &EvalBundle, embedder: &dyn EmbeddingProvider, config: &VimsConfig) -> Result<VimsResult, MetricError> {
    gen.check()?;
    gt.check()?;
    let mut per_instance = BTreeMap::new();
    let mut skipped = 0;
    let mut unmatched = Vec::new();
    let mut gt_cache: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for id in gen.trajectories.keys() {
        if !gt.trajectories.contains_key(id) {
            unmatched.push(id.clone());
            continue;
        }
        let mut sims = Vec::new();
        for t in 0..gen.video.len() {
            if !gen.visible(id, t, config.occlusion_threshold) {
                continue;
            }
            let Some(k) = match_instance_frame(gen, gt, id, t, config) else {
                skipped += 1;
                continue;
            };
            let crop_gen = gen.image(t).mask_crop(gen.masks.mask(t, id).expect("visible implies mask")).expect("nonempty mask");
            let e_gen = embedder.embed(&crop_gen)?;
            let e_gt = match gt_cache.get(&(id.clone(), k)) {
                Some(e) => e.clone(),
                None => {
                    let crop = gt.image(k).mask_crop(gt.masks.mask(k, id).expect("visible implies mask")).expect("nonempty mask");
                    let e = embedder.embed(&crop)?;
                    gt_cache.insert((id.clone(), k), e.clone());
                    e
                }
            };
            sims.push(cosine(&e_gen, &e_gt));
        }
        if !sims.is_empty() {
            per_instance.insert(id.clone(), (sims.iter().sum::<f64>() / sims.len() as f64, sims.len()));
        }
    }
    if per_instance.is_empty() {
        return Err(MetricError::NoValidPairs);
    }
    let score = per_instance.values().map(|v| v.0).sum::<f64>() / per_instance.len() as f64;
    Ok(VimsResult {
        score,
        per_instance,
        skipped_pairs: skipped,
        unmatched_instances: unmatched,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasResult {
    pub score: f64,
    /// Matched ground-truth frame per generated frame.
    pub matches: Vec<usize>,
}

/// Ground-truth frame with the nearest ego pose; ties go to the earliest.
pub fn match_ego_frame(gen: &EvalBundle, gt: &EvalBundle, t: usize, rotation_weight: f64) -> usize {
    let w = PoseDistanceWeights { rotation_weight };
    let p = gen.ego_pose(t);
    argmin_first((0..gt.video.len()).map(|k| (k, pose_distance(&p, &gt.ego_pose(k), w)))).expect("nonempty video")
}

/// Foreground is the union of both matched frames' instance masks and is
/// blacked out in both before embedding.
pub fn bas(gen: &EvalBundle, gt: &EvalBundle, embedder: &dyn EmbeddingProvider, rotation_weight: f64) -> Result<BasResult, MetricError> {
    gen.check()?;
    gt.check()?;
    let mut matches = Vec::with_capacity(gen.video.len());
    let mut total = 0.0;
    for t in 0..gen.video.len() {
        let k = match_ego_frame(gen, gt, t, rotation_weight);
        let keep: Vec<bool> = gen.masks.union(t).iter().zip(gt.masks.union(k)).map(|(a, b)| !(*a || b)).collect();
        let e_gen = embedder.embed(&gen.image(t).masked(&keep))?;
        let e_gt = embedder.embed(&gt.image(k).masked(&keep))?;
        total += cosine(&e_gen, &e_gt);
        matches.push(k);
    }
    Ok(BasResult {
        score: total / gen.video.len() as f64,
        matches,
    })
}

/// Per-frame features of a whole video.
pub fn frame_features(video: &FrameSequence, embedder: &dyn EmbeddingProvider) -> Result<Vec<Vec<f64>>, MetricError> {
    video
        .frames
        .iter()
        .map(|f| embedder.embed(&Image::from_frame(f, video.width, video.height)))
        .collect()
}

/// Clip features over consecutive non-overlapping windows; a video shorter
/// than one window yields a single clip of all its frames.
pub fn clip_features(video: &FrameSequence, clip: &dyn ClipEmbedder) -> Result<Vec<Vec<f64>>, MetricError> {
    let imgs: Vec<Image> = video.frames.iter().map(|f| Image::from_frame(f, video.width, video.height)).collect();
    if imgs.is_empty() {
        return Err(MetricError::EmptyFeatures);
    }
    let w = clip.window().max(1);
    if imgs.len() < w {
        return Ok(vec![clip.embed_clip(&imgs)?]);
    }
    imgs.chunks_exact(w).map(|c| clip.embed_clip(c)).collect()
}

/// Fréchet distance between the clip features of two video sets.
pub fn fvd(gen: &[FrameSequence], gt: &[FrameSequence], clip: &dyn ClipEmbedder) -> Result<FidValue, MetricError> {
    let feats = |set: &[FrameSequence]| -> Result<Vec<Vec<f64>>, MetricError> {
        let mut out = Vec::new();
        for v in set {
            out.extend(clip_features(v, clip)?);
        }
        Ok(out)
    };
    fid(&feats(gen)?, &feats(gt)?)
}
