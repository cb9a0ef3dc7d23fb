//! Scene manifest (UTF-8 JSON) plus sibling binary blobs for splats and meshes.
//!
//! Splat blob: `GSPL`, u32 version, u32 count, u32 sh degree, then `count`
//! records of little-endian f32: mean(3) scale(3) quat wxyz(4) opacity(1)
//! sh(3·(L+1)²).
//!
//! Mesh blob: `GMSH`, u32 version, u32 vertex count, u32 triangle count,
//! vertices f32(3·V), colors f32(3·V), indices u32(3·F).

use super::*;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "scene.json";
const FORMAT_TAG: &str = "drivesim-scene";
const FORMAT_VERSION: u32 = 1;
const SPLAT_MAGIC: &[u8; 4] = b"GSPL";
const MESH_MAGIC: &[u8; 4] = b"GMSH";
const BLOB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("blob checksum mismatch for {0}")]
    ChecksumMismatch(PathBuf),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> SceneIoError {
    SceneIoError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Serialize, Deserialize)]
struct BlobRef {
    path: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct FieldEntry {
    frame: FieldFrame,
    sh_degree: u8,
    allow_empty: bool,
    count: usize,
    blob: Option<BlobRef>,
}

#[derive(Serialize, Deserialize)]
struct MeshEntry {
    vertex_count: usize,
    triangle_count: usize,
    blob: BlobRef,
}

#[derive(Serialize, Deserialize)]
struct AssetEntry {
    id: String,
    class: AssetClass,
    #[serde(rename = "box")]
    bbox: BoundingBox3D,
    splats: Option<FieldEntry>,
    mesh: Option<MeshEntry>,
    lidar_point_counts: Option<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct CameraEntry {
    intrinsics: CameraModel,
    rig: Pose,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    scene_id: String,
    timeline: Vec<f64>,
    camera: CameraEntry,
    background: FieldEntry,
    assets: Vec<AssetEntry>,
    ego_trajectory: Trajectory,
    trajectories: Vec<Trajectory>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneIoError + '_ {
    move |source| SceneIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

pub(crate) fn encode_splats(field: &GaussianField) -> Vec<u8> {
    let k = sh_coeff_count(field.sh_degree) * 3;
    let mut buf = Vec::with_capacity(16 + field.len() * (11 + k) * 4);
    buf.extend_from_slice(SPLAT_MAGIC);
    push_u32(&mut buf, BLOB_VERSION);
    push_u32(&mut buf, field.len() as u32);
    push_u32(&mut buf, field.sh_degree as u32);
    for g in &field.primitives {
        for v in g.mean.iter().chain(g.scale.iter()) {
            push_f32(&mut buf, *v);
        }
        let q = g.rotation.quaternion();
        for v in [q.w, q.i, q.j, q.k] {
            push_f32(&mut buf, v);
        }
        push_f32(&mut buf, g.opacity);
        for i in 0..k {
            push_f32(&mut buf, g.sh.get(i).copied().unwrap_or(0.0));
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SceneIoError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(schema(self.what, "blob truncated"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SceneIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64, SceneIoError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn vec3(&mut self) -> Result<Vector3<f64>, SceneIoError> {
        Ok(Vector3::new(self.f32()?, self.f32()?, self.f32()?))
    }
}

pub(crate) fn decode_splats(
    bytes: &[u8],
    frame: FieldFrame,
    what: &str,
) -> Result<GaussianField, SceneIoError> {
    let mut r = Reader { bytes, pos: 0, what };
    if r.take(4)? != SPLAT_MAGIC {
        return Err(schema(what, "bad splat blob magic"));
    }
    if r.u32()? != BLOB_VERSION {
        return Err(schema(what, "unsupported splat blob version"));
    }
    let count = r.u32()? as usize;
    let degree = r.u32()?;
    if degree > 3 {
        return Err(schema(what, format!("sh degree {degree} out of range")));
    }
    let degree = degree as u8;
    let k = sh_coeff_count(degree) * 3;
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let mean = r.vec3()?;
        let scale = r.vec3()?;
        let q = Quaternion::new(r.f32()?, r.f32()?, r.f32()?, r.f32()?);
        let opacity = r.f32()?;
        let sh = (0..k).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        primitives.push(GaussianPrimitive {
            mean,
            scale,
            rotation: UnitQuaternion::new_unchecked(q),
            opacity,
            sh,
        });
    }
    if r.pos != bytes.len() {
        return Err(schema(what, "trailing bytes in splat blob"));
    }
    Ok(GaussianField {
        primitives,
        frame,
        sh_degree: degree,
        allow_empty: false,
    })
}

fn encode_mesh(mesh: &TriangleMesh) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MESH_MAGIC);
    push_u32(&mut buf, BLOB_VERSION);
    push_u32(&mut buf, mesh.vertices.len() as u32);
    push_u32(&mut buf, mesh.triangles.len() as u32);
    for v in &mesh.vertices {
        for c in v.iter() {
            push_f32(&mut buf, *c);
        }
    }
    for c in &mesh.vertex_colors {
        for v in c {
            push_f32(&mut buf, *v);
        }
    }
    for t in &mesh.triangles {
        for i in t {
            push_u32(&mut buf, *i);
        }
    }
    buf
}

fn decode_mesh(bytes: &[u8], what: &str) -> Result<TriangleMesh, SceneIoError> {
    let mut r = Reader { bytes, pos: 0, what };
    if r.take(4)? != MESH_MAGIC {
        return Err(schema(what, "bad mesh blob magic"));
    }
    if r.u32()? != BLOB_VERSION {
        return Err(schema(what, "unsupported mesh blob version"));
    }
    let nv = r.u32()? as usize;
    let nf = r.u32()? as usize;
    let vertices = (0..nv).map(|_| r.vec3()).collect::<Result<Vec<_>, _>>()?;
    let vertex_colors = (0..nv)
        .map(|_| Ok([r.f32()?, r.f32()?, r.f32()?]))
        .collect::<Result<Vec<_>, SceneIoError>>()?;
    let triangles = (0..nf)
        .map(|_| Ok([r.u32()?, r.u32()?, r.u32()?]))
        .collect::<Result<Vec<_>, SceneIoError>>()?;
    if r.pos != bytes.len() {
        return Err(schema(what, "trailing bytes in mesh blob"));
    }
    Ok(TriangleMesh {
        vertices,
        triangles,
        vertex_colors,
    })
}

fn write_blob(dir: &Path, name: &str, bytes: &[u8]) -> Result<BlobRef, SceneIoError> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(BlobRef {
        path: name.to_string(),
        sha256: sha256_hex(bytes),
    })
}

fn read_blob(dir: &Path, blob: &BlobRef) -> Result<Vec<u8>, SceneIoError> {
    let path = dir.join(&blob.path);
    if !path.is_file() {
        return Err(SceneIoError::MissingFile(path));
    }
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    if sha256_hex(&bytes) != blob.sha256 {
        return Err(SceneIoError::ChecksumMismatch(path));
    }
    Ok(bytes)
}

fn field_entry(
    dir: &Path,
    field: &GaussianField,
    name: &str,
) -> Result<FieldEntry, SceneIoError> {
    let blob = if field.is_empty() {
        None
    } else {
        Some(write_blob(dir, name, &encode_splats(field))?)
    };
    Ok(FieldEntry {
        frame: field.frame,
        sh_degree: field.sh_degree,
        allow_empty: field.allow_empty,
        count: field.len(),
        blob,
    })
}

fn load_field(dir: &Path, e: &FieldEntry, what: &str) -> Result<GaussianField, SceneIoError> {
    let mut field = match &e.blob {
        None => {
            if e.count != 0 {
                return Err(schema(format!("{what}.blob"), "nonzero count without blob"));
            }
            GaussianField {
                primitives: Vec::new(),
                frame: e.frame,
                sh_degree: e.sh_degree,
                allow_empty: e.allow_empty,
            }
        }
        Some(b) => decode_splats(&read_blob(dir, b)?, e.frame, what)?,
    };
    if field.len() != e.count {
        return Err(schema(format!("{what}.count"), "count does not match blob"));
    }
    if e.blob.is_some() && field.sh_degree != e.sh_degree {
        return Err(schema(format!("{what}.sh_degree"), "degree does not match blob"));
    }
    field.allow_empty = e.allow_empty;
    Ok(field)
}

/// Writes `scene.json` and its blobs into directory `path` (created if needed).
/// Output bytes depend only on the scene contents.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SceneIoError> {
    std::fs::create_dir_all(path).map_err(io_err(path))?;
    let background = field_entry(path, &scene.background, "background.splats")?;
    let mut assets = Vec::with_capacity(scene.assets.len());
    for (i, a) in scene.assets.iter().enumerate() {
        let splats = a
            .splats
            .as_ref()
            .map(|f| field_entry(path, f, &format!("asset_{i:04}.splats")))
            .transpose()?;
        let mesh = a
            .mesh
            .as_ref()
            .map(|m| -> Result<MeshEntry, SceneIoError> {
                Ok(MeshEntry {
                    vertex_count: m.vertices.len(),
                    triangle_count: m.triangles.len(),
                    blob: write_blob(path, &format!("asset_{i:04}.mesh"), &encode_mesh(m))?,
                })
            })
            .transpose()?;
        assets.push(AssetEntry {
            id: a.id.clone(),
            class: a.klass,
            bbox: a.bbox,
            splats,
            mesh,
            lidar_point_counts: a.lidar_point_counts.clone(),
        });
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        scene_id: scene.id.clone(),
        timeline: scene.timeline.clone(),
        camera: CameraEntry {
            intrinsics: scene.camera,
            rig: scene.rig,
        },
        background,
        assets,
        ego_trajectory: scene.ego.clone(),
        trajectories: scene.trajectories.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let mpath = path.join(MANIFEST_FILE);
    std::fs::write(&mpath, text).map_err(io_err(&mpath))
}

/// Loads a scene from a directory containing `scene.json` (or the manifest
/// file itself). Blob checksums are verified; type invariants are not (see
/// [`validate_scene`]).
pub fn load_scene(path: &Path) -> Result<Scene, SceneIoError> {
    let mpath = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    if !mpath.is_file() {
        return Err(SceneIoError::MissingFile(mpath));
    }
    let dir = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| schema(format!("{}:{}:{}", MANIFEST_FILE, e.line(), e.column()), e.to_string()))?;
    if m.format != FORMAT_TAG {
        return Err(schema("format", format!("expected {FORMAT_TAG:?}")));
    }
    if m.version != FORMAT_VERSION {
        return Err(schema("version", format!("unsupported version {}", m.version)));
    }
    let background = load_field(&dir, &m.background, "background")?;
    let mut assets = Vec::with_capacity(m.assets.len());
    for (i, a) in m.assets.iter().enumerate() {
        let what = format!("assets[{i}]");
        let splats = a
            .splats
            .as_ref()
            .map(|e| load_field(&dir, e, &format!("{what}.splats")))
            .transpose()?;
        let mesh = match &a.mesh {
            None => None,
            Some(e) => {
                let mesh = decode_mesh(&read_blob(&dir, &e.blob)?, &format!("{what}.mesh"))?;
                if mesh.vertices.len() != e.vertex_count || mesh.triangles.len() != e.triangle_count {
                    return Err(schema(format!("{what}.mesh"), "counts do not match blob"));
                }
                Some(mesh)
            }
        };
        assets.push(RigidAsset {
            id: a.id.clone(),
            klass: a.class,
            splats,
            mesh,
            bbox: a.bbox,
            lidar_point_counts: a.lidar_point_counts.clone(),
        });
    }
    Ok(Scene {
        id: m.scene_id,
        background,
        assets,
        trajectories: m.trajectories,
        ego: m.ego_trajectory,
        camera: m.camera.intrinsics,
        rig: m.camera.rig,
        timeline: m.timeline,
    })
}
