//! Benchmark manifests and aggregated reports.
//!
//! A manifest is a JSON file:
//!
//! ```text
//! {
//!   "version": 1,
//!   "name": "suite",
//!   "declared_counts": { "ego/speed": 14, ... },   // optional
//!   "scenes": [
//!     {
//!       "id": "ego_speed_000",
//!       "object": "ego",                 // ego | other
//!       "manipulation": "speed",         // speed | lane | direction | insertion | removal
//!       "scene": "scenes/a",             // ground-truth scene directory
//!       "edit_script": "edits/a.txt",
//!       "generated": "gen/ego_speed_000", // frame-sequence directory
//!       "gt_frames": "gt/a",             // optional, rendered from the scene otherwise
//!       "instance": "new1",              // optional, inserted or removed asset
//!       "description": "a white van"     // optional, given to the judge
//!     }
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. When `declared_counts` is
//! absent the reference counts from [`reference_category_counts`] are used.

use super::{
    bas, clip_features, fid, frame_features, mask_box, parse_score, vims, ClipEmbedder, EmbeddingProvider, EvalBundle, FidValue,
    JudgeProvider, MetricError, OperationKind, OsrVideo, TaskDescriptor, VimsConfig, DEFAULT_K,
};
use crate::edit::{apply_edit_script, parse_edit_script, EditCommand};
use crate::raster::{render_sequence, RenderConfig};
use crate::scene::{load_frames, load_scene, FrameSequence, InstanceMaskSequence, Scene};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectType {
    Ego,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manipulation {
    Speed,
    Lane,
    Direction,
    Insertion,
    Removal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Category {
    pub object: ObjectType,
    pub manipulation: Manipulation,
}

impl Category {
    /// Table order: ego speed, lane, direction; other speed, lane,
    /// direction, insertion, removal.
    pub const ALL: [Category; 8] = [
        Category::new(ObjectType::Ego, Manipulation::Speed),
        Category::new(ObjectType::Ego, Manipulation::Lane),
        Category::new(ObjectType::Ego, Manipulation::Direction),
        Category::new(ObjectType::Other, Manipulation::Speed),
        Category::new(ObjectType::Other, Manipulation::Lane),
        Category::new(ObjectType::Other, Manipulation::Direction),
        Category::new(ObjectType::Other, Manipulation::Insertion),
        Category::new(ObjectType::Other, Manipulation::Removal),
    ];

    pub const fn new(object: ObjectType, manipulation: Manipulation) -> Self {
        Self { object, manipulation }
    }

    pub fn is_valid(&self) -> bool {
        Self::ALL.contains(self)
    }

    pub fn has_osr(&self) -> bool {
        matches!(self.manipulation, Manipulation::Insertion | Manipulation::Removal)
    }

    pub fn key(&self) -> String {
        let o = match self.object {
            ObjectType::Ego => "ego",
            ObjectType::Other => "other",
        };
        let m = match self.manipulation {
            Manipulation::Speed => "speed",
            Manipulation::Lane => "lane",
            Manipulation::Direction => "direction",
            Manipulation::Insertion => "insertion",
            Manipulation::Removal => "removal",
        };
        format!("{o}/{m}")
    }
}

/// Reference sample counts per category; they sum to 109.
pub fn reference_category_counts() -> BTreeMap<String, usize> {
    Category::ALL
        .iter()
        .zip([14, 15, 10, 15, 13, 8, 14, 20])
        .map(|(c, n)| (c.key(), n))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub object: ObjectType,
    pub manipulation: Manipulation,
    pub scene: PathBuf,
    pub edit_script: PathBuf,
    pub generated: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_frames: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl SceneEntry {
    pub fn category(&self) -> Category {
        Category::new(self.object, self.manipulation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_counts: Option<BTreeMap<String, usize>>,
    pub scenes: Vec<SceneEntry>,
}

impl BenchmarkManifest {
    pub fn load(path: &Path) -> Result<Self, MetricError> {
        let text = std::fs::read_to_string(path).map_err(|e| MetricError::Io(format!("{}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| MetricError::Manifest(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(MetricError::Manifest(format!("unsupported version {}", m.version)));
        }
        if let Some(bad) = m.scenes.iter().find(|s| !s.category().is_valid()) {
            return Err(MetricError::Manifest(format!("scene {}: no category {}", bad.id, bad.category().key())));
        }
        let mut ids: Vec<&str> = m.scenes.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(MetricError::Manifest(format!("duplicate scene id {}", w[0])));
        }
        Ok(m)
    }

    /// One warning per category whose count differs from the declared one.
    pub fn count_warnings(&self) -> Vec<String> {
        let declared = self.declared_counts.clone().unwrap_or_else(reference_category_counts);
        let mut actual: BTreeMap<String, usize> = BTreeMap::new();
        for s in &self.scenes {
            *actual.entry(s.category().key()).or_default() += 1;
        }
        let mut keys: Vec<&String> = declared.keys().chain(actual.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter_map(|k| {
                let (d, a) = (declared.get(k).copied().unwrap_or(0), actual.get(k).copied().unwrap_or(0));
                (d != a).then(|| format!("category {k}: declared {d}, found {a}"))
            })
            .collect()
    }
}

pub struct Providers<'a> {
    pub embedder: &'a dyn EmbeddingProvider,
    pub clip: &'a dyn ClipEmbedder,
    pub judge: Option<&'a dyn JudgeProvider>,
    pub render: RenderConfig,
    pub vims: VimsConfig,
    pub osr_k: usize,
}

impl<'a> Providers<'a> {
    pub fn new(embedder: &'a dyn EmbeddingProvider, clip: &'a dyn ClipEmbedder, judge: Option<&'a dyn JudgeProvider>) -> Self {
        Self {
            embedder,
            clip,
            judge,
            render: RenderConfig::default(),
            vims: VimsConfig::default(),
            osr_k: DEFAULT_K,
        }
    }
}

/// A value with the number of samples behind it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tagged {
    pub value: f64,
    pub samples: usize,
    /// Covariance regularized (Fréchet metrics only).
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub id: String,
    pub category: String,
    pub fid: Option<Tagged>,
    pub fvd: Option<Tagged>,
    pub vims: Option<Tagged>,
    pub bas: Option<Tagged>,
    pub osr: Option<Tagged>,
    pub skipped_pairs: usize,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryCell {
    pub scenes: usize,
    pub fid: Option<Tagged>,
    pub fvd: Option<Tagged>,
    pub vims: Option<Tagged>,
    pub bas: Option<Tagged>,
    pub osr: Option<Tagged>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub embedder: String,
    pub clip_embedder: String,
    pub judge: Option<String>,
    pub total_scenes: usize,
    pub categories: BTreeMap<String, CategoryCell>,
    pub overall_fid: Option<Tagged>,
    pub overall_fvd: Option<Tagged>,
    pub scenes: Vec<SceneResult>,
    pub warnings: Vec<String>,
}

struct SceneFeatures {
    gen_frames: Vec<Vec<f64>>,
    gt_frames: Vec<Vec<f64>>,
    gen_clips: Vec<Vec<f64>>,
    gt_clips: Vec<Vec<f64>>,
}

fn inferred_instance(script: &crate::edit::EditScript, kind: Manipulation) -> Option<String> {
    script.commands.iter().find_map(|c| match (c, kind) {
        (EditCommand::Insert { asset, .. }, Manipulation::Insertion) => Some(asset.id.clone()),
        (EditCommand::Remove { id }, Manipulation::Removal) => Some(id.clone()),
        _ => None,
    })
}

fn bundle(scene: &Scene, video: FrameSequence, render: &RenderConfig) -> EvalBundle {
    if video.instance_labels.is_empty() {
        let masks = InstanceMaskSequence::from_frames(&render_sequence(scene, render));
        EvalBundle::with_masks(scene, video, masks)
    } else {
        EvalBundle::from_scene(scene, video)
    }
}

fn tagged(value: f64, samples: usize) -> Tagged {
    Tagged {
        value,
        samples,
        flagged: false,
    }
}

fn fid_tagged(v: FidValue, samples: usize) -> Tagged {
    Tagged {
        value: v.value,
        samples,
        flagged: v.regularized,
    }
}

fn eval_scene(entry: &SceneEntry, root: &Path, p: &Providers) -> (SceneResult, Option<SceneFeatures>) {
    let mut res = SceneResult {
        id: entry.id.clone(),
        category: entry.category().key(),
        fid: None,
        fvd: None,
        vims: None,
        bas: None,
        osr: None,
        skipped_pairs: 0,
        errors: Vec::new(),
    };
    let loaded = (|| -> Result<_, String> {
        let scene = load_scene(&root.join(&entry.scene)).map_err(|e| format!("scene: {e}"))?;
        let text = std::fs::read_to_string(root.join(&entry.edit_script)).map_err(|e| format!("edit script: {e}"))?;
        let script = parse_edit_script(&text, &scene.timeline).map_err(|e| format!("edit script: {e}"))?;
        let edited = apply_edit_script(&scene, &script).map_err(|e| format!("edit: {e}"))?;
        let gen = load_frames(&root.join(&entry.generated)).map_err(|e| format!("generated video: {e}"))?;
        let gt = match &entry.gt_frames {
            Some(d) => load_frames(&root.join(d)).map_err(|e| format!("ground-truth video: {e}"))?,
            None => render_sequence(&scene, &p.render),
        };
        Ok((scene, script, edited, gen, gt))
    })();
    let (scene, script, edited, gen, gt) = match loaded {
        Ok(v) => v,
        Err(e) => {
            res.errors.push(e);
            return (res, None);
        }
    };
    let gen_b = bundle(&edited, gen, &p.render);
    let gt_b = bundle(&scene, gt, &p.render);

    match vims(&gen_b, &gt_b, p.embedder, &p.vims) {
        Ok(v) => {
            res.skipped_pairs = v.skipped_pairs;
            res.vims = Some(tagged(v.score, v.per_instance.len()));
        }
        Err(e) => res.errors.push(format!("vims: {e}")),
    }
    match bas(&gen_b, &gt_b, p.embedder, p.vims.rotation_weight) {
        Ok(v) => res.bas = Some(tagged(v.score, gen_b.video.len())),
        Err(e) => res.errors.push(format!("bas: {e}")),
    }
    if entry.category().has_osr() {
        match p.judge {
            None => res.errors.push("osr: no judge configured".into()),
            Some(judge) => {
                let kind = if entry.manipulation == Manipulation::Insertion {
                    OperationKind::Insertion
                } else {
                    OperationKind::Removal
                };
                match entry.instance.clone().or_else(|| inferred_instance(&script, entry.manipulation)) {
                    None => res.errors.push("osr: no inserted or removed instance".into()),
                    Some(id) => {
                        let source = if kind == OperationKind::Insertion { &gen_b } else { &gt_b };
                        let (w, h) = (source.video.width as usize, source.video.height as usize);
                        let boxes = (0..gen_b.video.len())
                            .map(|t| {
                                let k = t.min(source.video.len() - 1);
                                source.masks.mask(k, &id).and_then(|m| mask_box(m, w, h))
                            })
                            .collect();
                        let video = OsrVideo {
                            video: gen_b.video.clone(),
                            task: TaskDescriptor {
                                kind,
                                instance: id.clone(),
                                description: entry.description.clone().unwrap_or_else(|| id.clone()),
                            },
                            boxes,
                        };
                        match judge.judge(&video.annotated(p.osr_k), &video.task).and_then(|r| parse_score(&r)) {
                            Ok(v) => res.osr = Some(tagged(v, 1)),
                            Err(e) => res.errors.push(format!("osr: {e}")),
                        }
                    }
                }
            }
        }
    }
    let feats = (|| -> Result<SceneFeatures, MetricError> {
        Ok(SceneFeatures {
            gen_frames: frame_features(&gen_b.video, p.embedder)?,
            gt_frames: frame_features(&gt_b.video, p.embedder)?,
            gen_clips: clip_features(&gen_b.video, p.clip)?,
            gt_clips: clip_features(&gt_b.video, p.clip)?,
        })
    })();
    match feats {
        Ok(f) => {
            match fid(&f.gen_frames, &f.gt_frames) {
                Ok(v) => res.fid = Some(fid_tagged(v, f.gen_frames.len())),
                Err(e) => res.errors.push(format!("fid: {e}")),
            }
            match fid(&f.gen_clips, &f.gt_clips) {
                Ok(v) => res.fvd = Some(fid_tagged(v, f.gen_clips.len())),
                Err(e) => res.errors.push(format!("fvd: {e}")),
            }
            (res, Some(f))
        }
        Err(e) => {
            res.errors.push(format!("features: {e}"));
            (res, None)
        }
    }
}

fn mean_tagged<'a>(vals: impl Iterator<Item = &'a Option<Tagged>>) -> Option<Tagged> {
    let v: Vec<f64> = vals.filter_map(|t| t.map(|t| t.value)).collect();
    (!v.is_empty()).then(|| tagged(v.iter().sum::<f64>() / v.len() as f64, v.len()))
}

fn pooled(feats: &[&SceneFeatures], gen: impl Fn(&SceneFeatures) -> &Vec<Vec<f64>>, gt: impl Fn(&SceneFeatures) -> &Vec<Vec<f64>>) -> Option<Tagged> {
    let a: Vec<Vec<f64>> = feats.iter().flat_map(|f| gen(f).iter().cloned()).collect();
    let b: Vec<Vec<f64>> = feats.iter().flat_map(|f| gt(f).iter().cloned()).collect();
    fid(&a, &b).ok().map(|v| fid_tagged(v, a.len()))
}

/// Scores every scene of the manifest. Scene failures are recorded in the
/// report and do not stop the run. Scenes are evaluated in parallel and
/// merged in scene-id order.
pub fn run_benchmark(manifest_path: &Path, providers: &Providers) -> Result<MetricReport, MetricError> {
    let manifest = BenchmarkManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut results: Vec<(SceneResult, Option<SceneFeatures>)> =
        manifest.scenes.par_iter().map(|e| eval_scene(e, root, providers)).collect();
    results.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let mut categories = BTreeMap::new();
    for cat in Category::ALL {
        let key = cat.key();
        let members: Vec<&(SceneResult, Option<SceneFeatures>)> = results.iter().filter(|r| r.0.category == key).collect();
        if members.is_empty() {
            continue;
        }
        let feats: Vec<&SceneFeatures> = members.iter().filter_map(|r| r.1.as_ref()).collect();
        categories.insert(
            key,
            CategoryCell {
                scenes: members.len(),
                fid: pooled(&feats, |f| &f.gen_frames, |f| &f.gt_frames),
                fvd: pooled(&feats, |f| &f.gen_clips, |f| &f.gt_clips),
                vims: mean_tagged(members.iter().map(|r| &r.0.vims)),
                bas: mean_tagged(members.iter().map(|r| &r.0.bas)),
                osr: if cat.has_osr() { mean_tagged(members.iter().map(|r| &r.0.osr)) } else { None },
            },
        );
    }
    let all: Vec<&SceneFeatures> = results.iter().filter_map(|r| r.1.as_ref()).collect();
    let mut warnings = manifest.count_warnings();
    for (r, _) in &results {
        for e in &r.errors {
            warnings.push(format!("scene {}: {e}", r.id));
        }
    }
    Ok(MetricReport {
        name: manifest.name.clone(),
        embedder: providers.embedder.id(),
        clip_embedder: providers.clip.id(),
        judge: providers.judge.map(|j| j.id()),
        total_scenes: results.len(),
        categories,
        overall_fid: pooled(&all, |f| &f.gen_frames, |f| &f.gt_frames),
        overall_fvd: pooled(&all, |f| &f.gen_clips, |f| &f.gt_clips),
        scenes: results.into_iter().map(|r| r.0).collect(),
        warnings,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MetricError> {
        serde_json::from_str(text).map_err(|e| MetricError::Manifest(e.to_string()))
    }

    /// Aligned text table, one row per category plus an overall row.
    pub fn to_table(&self) -> String {
        let cell = |t: &Option<Tagged>, prec: usize| match t {
            Some(t) => format!("{:.*}{}", prec, t.value, if t.flagged { "*" } else { "" }),
            None => "-".to_string(),
        };
        let mut rows = vec![["category", "n", "FID", "FVD", "VIMS", "BAS", "OSR"].map(String::from).to_vec()];
        for cat in Category::ALL {
            let key = cat.key();
            let Some(c) = self.categories.get(&key) else {
                continue;
            };
            rows.push(vec![
                key,
                c.scenes.to_string(),
                cell(&c.fid, 2),
                cell(&c.fvd, 2),
                cell(&c.vims, 4),
                cell(&c.bas, 4),
                cell(&c.osr, 2),
            ]);
        }
        rows.push(vec![
            "overall".into(),
            self.total_scenes.to_string(),
            cell(&self.overall_fid, 2),
            cell(&self.overall_fvd, 2),
            "-".into(),
            "-".into(),
            "-".into(),
        ]);
        let widths: Vec<usize> = (0..rows[0].len()).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (ri, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(i, v)| if i == 0 { format!("{v:<w$}", w = widths[i]) } else { format!("{v:>w$}", w = widths[i]) })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if ri == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        if self.categories.values().any(|c| [c.fid, c.fvd].iter().flatten().any(|t| t.flagged)) {
            let _ = writeln!(out, "* covariance regularized (fewer samples than feature dimension + 1)");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}
