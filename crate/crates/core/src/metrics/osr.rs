use super::{Image, MetricError};
use crate::scene::FrameSequence;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::process::Command;
use thiserror::Error;

pub const DEFAULT_K: usize = 5;
pub const BOX_WIDTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationKind {
    Insertion,
    Removal,
}

impl OperationKind {
    pub fn color(self) -> [f64; 3] {
        match self {
            Self::Insertion => [0.0, 1.0, 0.0],
            Self::Removal => [1.0, 0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub kind: OperationKind,
    pub instance: String,
    pub description: String,
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Bounding rectangle of the set pixels of a row-major mask.
pub fn mask_box(mask: &[bool], width: usize, height: usize) -> Option<PixelBox> {
    let mut b: Option<PixelBox> = None;
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            let r = b.get_or_insert(PixelBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
            r.x0 = r.x0.min(x);
            r.y0 = r.y0.min(y);
            r.x1 = r.x1.max(x + 1);
            r.y1 = r.y1.max(y + 1);
        }
    }
    b
}

/// `k` indices spread evenly over `0..len`, endpoints included, rounded to
/// the nearest frame.
pub fn sample_indices(len: usize, k: usize) -> Vec<usize> {
    if len == 0 || k == 0 {
        return Vec::new();
    }
    if k == 1 {
        return vec![0];
    }
    (0..k).map(|i| (i as f64 * (len - 1) as f64 / (k - 1) as f64).round() as usize).collect()
}

/// Draws a rectangle outline `BOX_WIDTH` pixels wide just inside `b`.
pub fn annotate(img: &mut Image, b: &PixelBox, color: [f64; 3]) {
    let x1 = b.x1.min(img.width);
    let y1 = b.y1.min(img.height);
    for y in b.y0..y1 {
        for x in b.x0..x1 {
            let edge = x < b.x0 + BOX_WIDTH || x + BOX_WIDTH >= b.x1 || y < b.y0 + BOX_WIDTH || y + BOX_WIDTH >= b.y1;
            if edge {
                let i = 3 * (y * img.width + x);
                img.rgb[i..i + 3].copy_from_slice(&color);
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("judge protocol failure: {0}")]
    Protocol(String),
    #[error("unparseable score {0:?}")]
    Unparseable(String),
}

/// Scores annotated frames of an edited video; the reply is parsed by
/// [`parse_score`].
pub trait JudgeProvider: Sync {
    fn id(&self) -> String;
    fn judge(&self, frames: &[Image], task: &TaskDescriptor) -> Result<String, JudgeError>;
}

/// A number in [1, 10].
pub fn parse_score(reply: &str) -> Result<f64, JudgeError> {
    let s = reply.trim();
    match s.parse::<f64>() {
        Ok(v) if (1.0..=10.0).contains(&v) => Ok(v),
        _ => Err(JudgeError::Unparseable(s.to_string())),
    }
}

pub struct ConstantJudge(pub String);

impl JudgeProvider for ConstantJudge {
    fn id(&self) -> String {
        format!("constant:{}", self.0)
    }

    fn judge(&self, _: &[Image], _: &TaskDescriptor) -> Result<String, JudgeError> {
        Ok(self.0.clone())
    }
}

/// Integer score in 1..=10 derived from a hash of the frames and descriptor.
pub struct HashJudge;

impl JudgeProvider for HashJudge {
    fn id(&self) -> String {
        "hash".into()
    }

    fn judge(&self, frames: &[Image], task: &TaskDescriptor) -> Result<String, JudgeError> {
        let mut h = Sha256::new();
        for f in frames {
            h.update(super::region_key(f));
        }
        h.update(serde_json::to_vec(task).expect("descriptor serializes"));
        let d = h.finalize();
        Ok((1 + u64::from_le_bytes(d[..8].try_into().unwrap()) % 10).to_string())
    }
}

/// Runs `program args... <dir>` after writing `frame_NN.png` and
/// `task.json` into a fresh directory under `workdir`; the first line of
/// standard output is the reply.
pub struct CommandJudge {
    pub program: String,
    pub args: Vec<String>,
    pub workdir: PathBuf,
}

fn write_png(img: &Image, path: &std::path::Path) -> Result<(), String> {
    let buf = image::RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let p = img.pixel(x as usize, y as usize);
        image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path).map_err(|e| e.to_string())
}

impl JudgeProvider for CommandJudge {
    fn id(&self) -> String {
        format!("command:{}", self.program)
    }

    fn judge(&self, frames: &[Image], task: &TaskDescriptor) -> Result<String, JudgeError> {
        let proto = |m: String| JudgeError::Protocol(m);
        let mut h = Sha256::new();
        for f in frames {
            h.update(super::region_key(f));
        }
        h.update(serde_json::to_vec(task).expect("descriptor serializes"));
        let dir = self.workdir.join(hex::encode(&h.finalize()[..8]));
        std::fs::create_dir_all(&dir).map_err(|e| proto(e.to_string()))?;
        for (i, f) in frames.iter().enumerate() {
            write_png(f, &dir.join(format!("frame_{i:02}.png"))).map_err(proto)?;
        }
        std::fs::write(dir.join("task.json"), serde_json::to_vec_pretty(task).expect("descriptor serializes"))
            .map_err(|e| proto(e.to_string()))?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&dir)
            .output()
            .map_err(|e| proto(format!("{}: {e}", self.program)))?;
        if !out.status.success() {
            return Err(proto(format!("{} exited with {}", self.program, out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        Ok(text.lines().next().unwrap_or("").to_string())
    }
}

/// An edited video with its task and the per-frame box of the affected
/// instance.
#[derive(Clone, Debug, PartialEq)]
pub struct OsrVideo {
    pub video: FrameSequence,
    pub task: TaskDescriptor,
    pub boxes: Vec<Option<PixelBox>>,
}

impl OsrVideo {
    /// Sampled frames with the box drawn where one is known.
    pub fn annotated(&self, k: usize) -> Vec<Image> {
        sample_indices(self.video.len(), k)
            .into_iter()
            .map(|i| {
                let mut img = Image::from_frame(&self.video.frames[i], self.video.width, self.video.height);
                if let Some(Some(b)) = self.boxes.get(i) {
                    annotate(&mut img, b, self.task.kind.color());
                }
                img
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OsrResult {
    pub score: f64,
    /// Per video, its score or why it was excluded.
    pub per_scene: Vec<Result<f64, JudgeError>>,
}

/// Mean judged score over the videos the judge could score.
pub fn osr(videos: &[OsrVideo], judge: &dyn JudgeProvider, k: usize) -> Result<OsrResult, MetricError> {
    let per_scene: Vec<Result<f64, JudgeError>> = videos
        .iter()
        .map(|v| judge.judge(&v.annotated(k), &v.task).and_then(|r| parse_score(&r)))
        .collect();
    let ok: Vec<f64> = per_scene.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    if ok.is_empty() {
        return Err(MetricError::NoValidPairs);
    }
    Ok(OsrResult {
        score: ok.iter().sum::<f64>() / ok.len() as f64,
        per_scene,
    })
}
