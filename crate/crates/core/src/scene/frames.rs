//! Frame sequence directories: `index.json` plus per-frame little-endian
//! blobs (`.rgb` f32×3, `.depth` f32, `.ids` u32).

use super::*;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum FramesError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed frame sequence at {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("blob checksum mismatch for {0}")]
    ChecksumMismatch(PathBuf),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Serialize, Deserialize)]
struct FrameEntry {
    rgb: String,
    depth: String,
    ids: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Index {
    format: String,
    width: u32,
    height: u32,
    times: Vec<f64>,
    instance_labels: Vec<String>,
    frames: Vec<FrameEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FramesError + '_ {
    move |source| FramesError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: impl Into<String>, message: impl Into<String>) -> FramesError {
    FramesError::Malformed {
        path: path.into(),
        message: message.into(),
    }
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

fn read_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect()
}

/// Writes `seq` into directory `dir`. Values are stored as f32.
pub fn save_frames(seq: &FrameSequence, dir: &Path) -> Result<(), FramesError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(seq.len());
    for (i, f) in seq.frames.iter().enumerate() {
        let rgb = f32_bytes(&f.rgb);
        let depth = f32_bytes(&f.depth);
        let ids: Vec<u8> = f.instance.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut h = Sha256::new();
        h.update(&rgb);
        h.update(&depth);
        h.update(&ids);
        let e = FrameEntry {
            rgb: format!("frame_{i:04}.rgb"),
            depth: format!("frame_{i:04}.depth"),
            ids: format!("frame_{i:04}.ids"),
            sha256: hex::encode(h.finalize()),
        };
        for (name, bytes) in [(&e.rgb, &rgb), (&e.depth, &depth), (&e.ids, &ids)] {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(io_err(&p))?;
        }
        entries.push(e);
    }
    let index = Index {
        format: "drivesim-frames".into(),
        width: seq.width,
        height: seq.height,
        times: seq.times.clone(),
        instance_labels: seq.instance_labels.clone(),
        frames: entries,
    };
    let p = dir.join(INDEX_FILE);
    let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
    text.push('\n');
    std::fs::write(&p, text).map_err(io_err(&p))
}

pub fn load_frames(dir: &Path) -> Result<FrameSequence, FramesError> {
    let p = dir.join(INDEX_FILE);
    if !p.is_file() {
        return Err(FramesError::MissingFile(p));
    }
    let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
    let index: Index =
        serde_json::from_str(&text).map_err(|e| malformed(INDEX_FILE, e.to_string()))?;
    if index.times.len() != index.frames.len() {
        return Err(malformed("times", "one time per frame required"));
    }
    let n = index.width as usize * index.height as usize;
    let read = |name: &str, expected: usize| -> Result<Vec<u8>, FramesError> {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(FramesError::MissingFile(p));
        }
        let b = std::fs::read(&p).map_err(io_err(&p))?;
        if b.len() != expected {
            return Err(malformed(name, format!("expected {expected} bytes, found {}", b.len())));
        }
        Ok(b)
    };
    let mut frames = Vec::with_capacity(index.frames.len());
    for e in &index.frames {
        let rgb = read(&e.rgb, 12 * n)?;
        let depth = read(&e.depth, 4 * n)?;
        let ids = read(&e.ids, 4 * n)?;
        let mut h = Sha256::new();
        h.update(&rgb);
        h.update(&depth);
        h.update(&ids);
        if hex::encode(h.finalize()) != e.sha256 {
            return Err(FramesError::ChecksumMismatch(dir.join(&e.rgb)));
        }
        frames.push(Frame {
            rgb: read_f32s(&rgb),
            depth: read_f32s(&depth),
            instance: ids
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        });
    }
    Ok(FrameSequence {
        width: index.width,
        height: index.height,
        frames,
        times: index.times,
        instance_labels: index.instance_labels,
    })
}

pub(crate) fn frame_to_rgb8(width: u32, height: u32, rgb: &[f64]) -> image::RgbImage {
    let data: Vec<u8> = rgb
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(width, height, data).expect("buffer matches dimensions")
}

/// Writes one 8-bit PNG per frame (`frame_0000.png`, ...) for inspection.
pub fn export_png(seq: &FrameSequence, dir: &Path) -> Result<Vec<PathBuf>, FramesError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut out = Vec::with_capacity(seq.len());
    for (i, f) in seq.frames.iter().enumerate() {
        let p = dir.join(format!("frame_{i:04}.png"));
        frame_to_rgb8(seq.width, seq.height, &f.rgb).save(&p)?;
        out.push(p);
    }
    Ok(out)
}
