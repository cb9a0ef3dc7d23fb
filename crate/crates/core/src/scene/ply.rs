//! Import of the common binary splat PLY layout (`x y z scale_* rot_*
//! opacity f_dc_* f_rest_*`). Scales are stored as logs, opacity as a logit,
//! and `f_rest_*` is channel-major.

use super::*;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported property layout: {0}")]
    UnsupportedLayout(String),
    #[error("non-finite value in splat {index}, property {property}")]
    NonFinite { index: usize, property: String },
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
    U8,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "float" | "float32" => Some(Self::F32),
            "double" | "float64" => Some(Self::F64),
            "uchar" | "uint8" => Some(Self::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
            Self::U8 => b[0] as f64,
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bad(msg: impl Into<String>) -> PlyError {
    PlyError::UnsupportedLayout(msg.into())
}

/// Reads a binary little-endian splat PLY into a world-frame field.
pub fn import_splats_ply(path: &Path) -> Result<GaussianField, PlyError> {
    parse_splats_ply(&std::fs::read(path)?)
}

pub fn parse_splats_ply(bytes: &[u8]) -> Result<GaussianField, PlyError> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing end_header"))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(bad(format!("format {other}"))),
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
            }
            ["element", other, ..] => return Err(bad(format!("unexpected element {other}"))),
            ["property", "list", ..] => return Err(bad("list properties")),
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| bad(format!("property type {ty}")))?;
                props.push((name.to_string(), ty));
            }
            _ => return Err(bad(format!("header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let offset_of = |name: &str| -> Option<(usize, Scalar)> {
        let mut off = 0;
        for (n, ty) in &props {
            if n == name {
                return Some((off, *ty));
            }
            off += ty.size();
        }
        None
    };
    let required = |name: &str| offset_of(name).ok_or_else(|| bad(format!("missing property {name}")));
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();

    let mean = [required("x")?, required("y")?, required("z")?];
    let scale = [required("scale_0")?, required("scale_1")?, required("scale_2")?];
    let rot = [
        required("rot_0")?,
        required("rot_1")?,
        required("rot_2")?,
        required("rot_3")?,
    ];
    let opacity = required("opacity")?;
    let dc = [required("f_dc_0")?, required("f_dc_1")?, required("f_dc_2")?];
    let rest_count = props.iter().filter(|(n, _)| n.starts_with("f_rest_")).count();
    let degree: u8 = match rest_count {
        0 => 0,
        9 => 1,
        24 => 2,
        45 => 3,
        n => return Err(bad(format!("{n} f_rest properties"))),
    };
    let rest = (0..rest_count)
        .map(|i| required(&format!("f_rest_{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let body = &bytes[header_end..];
    if body.len() < count * stride {
        return Err(bad("body shorter than declared vertex count"));
    }
    let per_channel = sh_coeff_count(degree) - 1;

    let mut primitives = Vec::with_capacity(count);
    for i in 0..count {
        let rec = &body[i * stride..(i + 1) * stride];
        let get = |(off, ty): (usize, Scalar), name: &str| -> Result<f64, PlyError> {
            let v = ty.read(&rec[off..]);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(PlyError::NonFinite {
                    index: i,
                    property: name.to_string(),
                })
            }
        };
        let m = Vector3::new(get(mean[0], "x")?, get(mean[1], "y")?, get(mean[2], "z")?);
        let s = Vector3::new(
            get(scale[0], "scale_0")?.exp(),
            get(scale[1], "scale_1")?.exp(),
            get(scale[2], "scale_2")?.exp(),
        );
        let q = Quaternion::new(
            get(rot[0], "rot_0")?,
            get(rot[1], "rot_1")?,
            get(rot[2], "rot_2")?,
            get(rot[3], "rot_3")?,
        );
        if q.norm() == 0.0 {
            return Err(PlyError::NonFinite {
                index: i,
                property: "rot".into(),
            });
        }
        let mut sh = vec![0.0; 3 * (per_channel + 1)];
        for c in 0..3 {
            sh[c] = get(dc[c], "f_dc")?;
            for k in 0..per_channel {
                sh[3 * (k + 1) + c] = get(rest[c * per_channel + k], "f_rest")?;
            }
        }
        primitives.push(GaussianPrimitive {
            mean: m,
            scale: s,
            rotation: UnitQuaternion::from_quaternion(q),
            opacity: logistic(get(opacity, "opacity")?),
            sh,
        });
    }
    Ok(GaussianField::new(primitives, FieldFrame::World, degree))
}

/// Writes a field in the same layout `import_splats_ply` reads.
pub fn write_splats_ply(field: &GaussianField) -> Vec<u8> {
    let per_channel = sh_coeff_count(field.sh_degree) - 1;
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header += &format!("element vertex {}\n", field.len());
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * per_channel).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    for n in &names {
        header += &format!("property float {n}\n");
    }
    header += "end_header\n";
    let mut out = header.into_bytes();
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for g in &field.primitives {
        g.mean.iter().for_each(|v| put(*v));
        (0..3).for_each(|c| put(g.sh[c]));
        for c in 0..3 {
            for k in 0..per_channel {
                put(g.sh[3 * (k + 1) + c]);
            }
        }
        let o = g.opacity.clamp(1e-6, 1.0 - 1e-6);
        put((o / (1.0 - o)).ln());
        g.scale.iter().for_each(|v| put(v.ln()));
        let q = g.rotation.quaternion();
        [q.w, q.i, q.j, q.k].iter().for_each(|v| put(*v));
    }
    out
}
