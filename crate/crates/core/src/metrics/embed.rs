use super::{Image, MetricError};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

/// Maps an image region to a unit-norm feature vector of fixed dimension.
pub trait EmbeddingProvider: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, image: &Image) -> Result<Vec<f64>, MetricError>;
}

/// Embeds a window of frames into one vector.
pub trait ClipEmbedder: Sync {
    fn id(&self) -> String;
    /// Frames per window.
    fn window(&self) -> usize;
    fn embed_clip(&self, frames: &[Image]) -> Result<Vec<f64>, MetricError>;
}

pub const TOY_GRID: usize = 4;
pub const TOY_BINS: usize = 8;
pub const TOY_DIM: usize = TOY_GRID * TOY_GRID * 3 + TOY_BINS;

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        let u = 1.0 / (v.len() as f64).sqrt();
        v.iter_mut().for_each(|x| *x = u);
    }
    v
}

/// Per-cell mean RGB over a 4×4 grid followed by an 8-bin histogram of
/// luminance gradient orientations weighted by magnitude, L2-normalized.
/// An all-zero feature maps to the uniform unit vector.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyEmbedder;

impl ToyEmbedder {
    pub fn features(&self, img: &Image) -> Vec<f64> {
        let (w, h) = (img.width, img.height);
        let mut out = vec![0.0; TOY_DIM];
        for cy in 0..TOY_GRID {
            for cx in 0..TOY_GRID {
                let (x0, x1) = (cx * w / TOY_GRID, (cx + 1) * w / TOY_GRID);
                let (y0, y1) = (cy * h / TOY_GRID, (cy + 1) * h / TOY_GRID);
                let n = (x1 - x0) * (y1 - y0);
                if n == 0 {
                    continue;
                }
                let cell = (cy * TOY_GRID + cx) * 3;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = img.pixel(x, y);
                        for c in 0..3 {
                            out[cell + c] += p[c] / n as f64;
                        }
                    }
                }
            }
        }
        let lum = |x: usize, y: usize| {
            let p = img.pixel(x, y);
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        };
        let hist = TOY_GRID * TOY_GRID * 3;
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let gx = lum((x + 1).min(w - 1), y) - lum(x.saturating_sub(1), y);
                let gy = lum(x, (y + 1).min(h - 1)) - lum(x, y.saturating_sub(1));
                let m = gx.hypot(gy);
                if m == 0.0 {
                    continue;
                }
                let a = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                let bin = ((a / std::f64::consts::TAU * TOY_BINS as f64) as usize).min(TOY_BINS - 1);
                out[hist + bin] += m;
                total += m;
            }
        }
        if total > 0.0 {
            let px = (w * h) as f64;
            for b in &mut out[hist..] {
                *b /= px;
            }
        }
        normalize(out)
    }
}

impl EmbeddingProvider for ToyEmbedder {
    fn id(&self) -> String {
        "toy-grid4-hist8".into()
    }

    fn dim(&self) -> usize {
        TOY_DIM
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>, MetricError> {
        if image.width == 0 || image.height == 0 {
            return Err(MetricError::EmptyRegion);
        }
        Ok(self.features(image))
    }
}

/// Mean of per-frame embeddings concatenated with the mean absolute first
/// difference between consecutive frame embeddings, renormalized.
pub struct ToyClipEmbedder<'a> {
    pub frame: &'a dyn EmbeddingProvider,
    pub window: usize,
}

impl ClipEmbedder for ToyClipEmbedder<'_> {
    fn id(&self) -> String {
        format!("toy-clip{}({})", self.window, self.frame.id())
    }

    fn window(&self) -> usize {
        self.window
    }

    fn embed_clip(&self, frames: &[Image]) -> Result<Vec<f64>, MetricError> {
        if frames.is_empty() {
            return Err(MetricError::EmptyRegion);
        }
        let d = self.frame.dim();
        let embs: Vec<Vec<f64>> = frames.iter().map(|f| self.frame.embed(f)).collect::<Result<_, _>>()?;
        let mut out = vec![0.0; 2 * d];
        for e in &embs {
            for (o, v) in out[..d].iter_mut().zip(e) {
                *o += v / embs.len() as f64;
            }
        }
        if embs.len() > 1 {
            for w in embs.windows(2) {
                for (i, o) in out[d..].iter_mut().enumerate() {
                    *o += (w[1][i] - w[0][i]).abs() / (embs.len() - 1) as f64;
                }
            }
        }
        Ok(normalize(out))
    }
}

/// SHA-256 over width, height (u32 LE) and the RGB samples as f64 LE.
pub fn region_key(img: &Image) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((img.width as u32).to_le_bytes());
    h.update((img.height as u32).to_le_bytes());
    for v in &img.rgb {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

const SIDECAR_MAGIC: &[u8; 4] = b"DSEM";
const SIDECAR_VERSION: u32 = 1;

/// Precomputed features keyed by [`region_key`]. Regions not in the table
/// fall through to `fallback` if one is set.
pub struct SidecarEmbedder<'a> {
    pub name: String,
    pub dim: usize,
    pub table: BTreeMap<[u8; 32], Vec<f64>>,
    pub fallback: Option<&'a dyn EmbeddingProvider>,
}

impl<'a> SidecarEmbedder<'a> {
    /// Layout: magic, version (u32 LE), dim (u32 LE), count (u64 LE), then
    /// per entry a 32-byte key and `dim` f32 LE values.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.table.len() as u64).to_le_bytes());
        for (k, v) in &self.table {
            out.extend_from_slice(k);
            for x in v {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(name: &str, bytes: &[u8], fallback: Option<&'a dyn EmbeddingProvider>) -> Result<Self, MetricError> {
        let bad = |m: &str| MetricError::Sidecar(m.to_string());
        if bytes.len() < 20 || &bytes[..4] != SIDECAR_MAGIC {
            return Err(bad("not an embedding sidecar"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SIDECAR_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let entry = 32 + 4 * dim;
        if dim == 0 || bytes.len() != 20 + count.saturating_mul(entry) {
            return Err(bad("length does not match header"));
        }
        let mut table = BTreeMap::new();
        for chunk in bytes[20..].chunks_exact(entry) {
            let key: [u8; 32] = chunk[..32].try_into().unwrap();
            let v: Vec<f64> = chunk[32..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            table.insert(key, normalize(v));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            table,
            fallback,
        })
    }

    pub fn load(path: &Path, fallback: Option<&'a dyn EmbeddingProvider>) -> Result<Self, MetricError> {
        let bytes = std::fs::read(path).map_err(|e| MetricError::Io(format!("{}: {e}", path.display())))?;
        Self::decode(&path.display().to_string(), &bytes, fallback)
    }

    /// Table of `provider` features for every region.
    pub fn precompute(provider: &dyn EmbeddingProvider, regions: &[Image]) -> Result<Self, MetricError> {
        let mut table = BTreeMap::new();
        for r in regions {
            table.insert(region_key(r), provider.embed(r)?);
        }
        Ok(Self {
            name: provider.id(),
            dim: provider.dim(),
            table,
            fallback: None,
        })
    }
}

impl EmbeddingProvider for SidecarEmbedder<'_> {
    fn id(&self) -> String {
        format!("sidecar:{}", self.name)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>, MetricError> {
        let key = region_key(image);
        if let Some(v) = self.table.get(&key) {
            return Ok(v.clone());
        }
        match self.fallback {
            Some(f) if f.dim() == self.dim => f.embed(image),
            _ => Err(MetricError::MissingEmbedding(hex::encode(key))),
        }
    }
}
