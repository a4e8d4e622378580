//! Mesh readers (OBJ, OFF, ascii/binary PLY) and point-cloud export.
//!
//! Faces with more than three vertices are fan-triangulated. The cloud
//! binary format is `DRPC`: magic, little-endian u32 count, then count
//! little-endian f32 (x, y, z) triples.

use super::{GeometryError, PointCloud, ShapeId, TriangleMesh};
use nalgebra::Point3;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshIoError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: unsupported mesh format")]
    UnsupportedFormat { path: String },
    #[error("{path}: {source}")]
    Geometry {
        path: String,
        #[source]
        source: GeometryError,
    },
}

impl MeshIoError {
    fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        Self::Parse {
            path: path.display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}

/// Loads a triangle mesh, dispatching on the file extension and falling back
/// to content sniffing. Vertices come back unnormalized.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh, MeshIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| MeshIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("obj") => parse_obj(path, &bytes),
        Some("off") => parse_off(path, &bytes),
        Some("ply") => parse_ply(path, &bytes),
        _ => {
            if bytes.starts_with(b"ply") {
                parse_ply(path, &bytes)
            } else if bytes.starts_with(b"OFF") {
                parse_off(path, &bytes)
            } else if ext.is_none() || ext.as_deref() == Some("") {
                parse_obj(path, &bytes)
            } else {
                Err(MeshIoError::UnsupportedFormat {
                    path: path.display().to_string(),
                })
            }
        }
    }
}

fn finish_mesh(
    path: &Path,
    vertices: Vec<Point3<f64>>,
    triangles: Vec<[u32; 3]>,
) -> Result<TriangleMesh, MeshIoError> {
    TriangleMesh::new(vertices, triangles).map_err(|source| MeshIoError::Geometry {
        path: path.display().to_string(),
        source,
    })
}

/// Splits an n-gon `face` (vertex indices in order) into a triangle fan
/// rooted at the first vertex.
fn push_fan(face: &[u32], out: &mut Vec<[u32; 3]>) {
    for i in 1..face.len() - 1 {
        out.push([face[0], face[i], face[i + 1]]);
    }
}

fn parse_obj(path: &Path, bytes: &[u8]) -> Result<TriangleMesh, MeshIoError> {
    let text = String::from_utf8_lossy(bytes);
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = ln + 1;
        if line.starts_with("v ") || line.starts_with("v\t") {
            let mut it = line[1..].split_whitespace();
            let mut coords = [0.0f64; 3];
            for c in &mut coords {
                let tok = it
                    .next()
                    .ok_or_else(|| MeshIoError::parse(path, lineno, "vertex needs 3 coordinates"))?;
                *c = tok
                    .parse()
                    .map_err(|_| MeshIoError::parse(path, lineno, format!("bad float `{tok}`")))?;
            }
            vertices.push(Point3::new(coords[0], coords[1], coords[2]));
        } else if line.starts_with("f ") || line.starts_with("f\t") {
            let mut face: Vec<u32> = Vec::with_capacity(4);
            for tok in line[1..].split_whitespace() {
                let idx_tok = tok.split('/').next().unwrap_or(tok);
                let idx: i64 = idx_tok
                    .parse()
                    .map_err(|_| MeshIoError::parse(path, lineno, format!("bad index `{tok}`")))?;
                let resolved = if idx > 0 {
                    idx - 1
                } else if idx < 0 {
                    vertices.len() as i64 + idx
                } else {
                    return Err(MeshIoError::parse(path, lineno, "face index 0 is invalid"));
                };
                if resolved < 0 || resolved as usize >= vertices.len() {
                    return Err(MeshIoError::parse(
                        path,
                        lineno,
                        format!("face index {idx} out of range"),
                    ));
                }
                face.push(resolved as u32);
            }
            if face.len() < 3 {
                return Err(MeshIoError::parse(path, lineno, "face with fewer than 3 vertices"));
            }
            push_fan(&face, &mut triangles);
        }
    }
    finish_mesh(path, vertices, triangles)
}

fn parse_off(path: &Path, bytes: &[u8]) -> Result<TriangleMesh, MeshIoError> {
    let text = String::from_utf8_lossy(bytes);
    // Token stream, skipping comments. The OFF keyword may share its line
    // with the counts.
    let mut tokens: Vec<(usize, &str)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            tokens.push((ln + 1, tok));
        }
    }
    let mut pos = 0;
    if tokens.is_empty() {
        return Err(MeshIoError::parse(path, 1, "empty OFF file"));
    }
    if tokens[0].1.eq_ignore_ascii_case("OFF") {
        pos = 1;
    }
    let mut next = |what: &str| -> Result<(usize, &str), MeshIoError> {
        let t = tokens
            .get(pos)
            .copied()
            .ok_or_else(|| MeshIoError::parse(path, tokens.last().map_or(1, |t| t.0), format!("unexpected end of file, expected {what}")))?;
        pos += 1;
        Ok(t)
    };
    let parse_usize = |(ln, tok): (usize, &str)| -> Result<usize, MeshIoError> {
        tok.parse()
            .map_err(|_| MeshIoError::parse(path, ln, format!("bad count `{tok}`")))
    };
    let parse_f64 = |(ln, tok): (usize, &str)| -> Result<f64, MeshIoError> {
        tok.parse()
            .map_err(|_| MeshIoError::parse(path, ln, format!("bad float `{tok}`")))
    };
    let nv = parse_usize(next("vertex count")?)?;
    let nf = parse_usize(next("face count")?)?;
    let _ne = parse_usize(next("edge count")?)?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let x = parse_f64(next("x")?)?;
        let y = parse_f64(next("y")?)?;
        let z = parse_f64(next("z")?)?;
        vertices.push(Point3::new(x, y, z));
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let k = parse_usize(next("face size")?)?;
        if k < 3 {
            let ln = tokens.get(pos.saturating_sub(1)).map_or(1, |t| t.0);
            return Err(MeshIoError::parse(path, ln, "face with fewer than 3 vertices"));
        }
        let mut face = Vec::with_capacity(k);
        for _ in 0..k {
            let (ln, tok) = next("face index")?;
            let idx: usize = tok
                .parse()
                .map_err(|_| MeshIoError::parse(path, ln, format!("bad index `{tok}`")))?;
            if idx >= nv {
                return Err(MeshIoError::parse(path, ln, format!("face index {idx} out of range")));
            }
            face.push(idx as u32);
        }
        push_fan(&face, &mut triangles);
    }
    finish_mesh(path, vertices, triangles)
}

#[derive(Clone, Copy, PartialEq)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Self::I8 => bytes[0] as i8 as f64,
            Self::U8 => bytes[0] as f64,
            Self::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

enum PlyProp {
    Scalar(PlyScalar, String),
    List(PlyScalar, PlyScalar, String),
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProp>,
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<TriangleMesh, MeshIoError> {
    // Header is ascii lines up to `end_header`.
    let header_end = bytes
        .windows(10)
        .position(|w| w == b"end_header")
        .ok_or_else(|| MeshIoError::parse(path, 1, "missing end_header"))?;
    let after = bytes[header_end..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| header_end + p + 1)
        .ok_or_else(|| MeshIoError::parse(path, 1, "missing newline after end_header"))?;
    let header = String::from_utf8_lossy(&bytes[..header_end]);

    let mut is_binary = false;
    let mut elements: Vec<PlyElement> = Vec::new();
    for (ln, raw) in header.lines().enumerate() {
        let lineno = ln + 1;
        let mut it = raw.split_whitespace();
        match it.next() {
            Some("ply") | Some("comment") | None => {}
            Some("format") => match it.next() {
                Some("ascii") => is_binary = false,
                Some("binary_little_endian") => is_binary = true,
                Some(other) => {
                    return Err(MeshIoError::parse(path, lineno, format!("unsupported format `{other}`")))
                }
                None => return Err(MeshIoError::parse(path, lineno, "bad format line")),
            },
            Some("element") => {
                let name = it
                    .next()
                    .ok_or_else(|| MeshIoError::parse(path, lineno, "element needs a name"))?;
                let count: usize = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| MeshIoError::parse(path, lineno, "element needs a count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| MeshIoError::parse(path, lineno, "property before element"))?;
                let kind = it
                    .next()
                    .ok_or_else(|| MeshIoError::parse(path, lineno, "property needs a type"))?;
                if kind == "list" {
                    let ct = it.next().and_then(PlyScalar::from_name).ok_or_else(|| {
                        MeshIoError::parse(path, lineno, "bad list count type")
                    })?;
                    let vt = it.next().and_then(PlyScalar::from_name).ok_or_else(|| {
                        MeshIoError::parse(path, lineno, "bad list value type")
                    })?;
                    let name = it.next().unwrap_or("").to_string();
                    el.props.push(PlyProp::List(ct, vt, name));
                } else {
                    let st = PlyScalar::from_name(kind).ok_or_else(|| {
                        MeshIoError::parse(path, lineno, format!("bad property type `{kind}`"))
                    })?;
                    let name = it.next().unwrap_or("").to_string();
                    el.props.push(PlyProp::Scalar(st, name));
                }
            }
            Some(_) => {}
        }
    }

    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();

    if is_binary {
        let mut cur = after;
        for el in &elements {
            let is_vertex = el.name == "vertex";
            let is_face = el.name == "face";
            for _ in 0..el.count {
                let mut coords = [f64::NAN; 3];
                let mut face: Vec<u32> = Vec::new();
                for prop in &el.props {
                    match prop {
                        PlyProp::Scalar(st, name) => {
                            if cur + st.size() > bytes.len() {
                                return Err(MeshIoError::parse(path, 0, "truncated binary body"));
                            }
                            let v = st.read_le(&bytes[cur..]);
                            cur += st.size();
                            if is_vertex {
                                match name.as_str() {
                                    "x" => coords[0] = v,
                                    "y" => coords[1] = v,
                                    "z" => coords[2] = v,
                                    _ => {}
                                }
                            }
                        }
                        PlyProp::List(ct, vt, name) => {
                            if cur + ct.size() > bytes.len() {
                                return Err(MeshIoError::parse(path, 0, "truncated binary body"));
                            }
                            let n = ct.read_le(&bytes[cur..]) as usize;
                            cur += ct.size();
                            if cur + n * vt.size() > bytes.len() {
                                return Err(MeshIoError::parse(path, 0, "truncated binary body"));
                            }
                            for i in 0..n {
                                let v = vt.read_le(&bytes[cur + i * vt.size()..]);
                                if is_face && (name == "vertex_indices" || name == "vertex_index") {
                                    face.push(v as u32);
                                }
                            }
                            cur += n * vt.size();
                        }
                    }
                }
                if is_vertex {
                    if coords.iter().any(|c| c.is_nan()) {
                        return Err(MeshIoError::parse(path, 0, "vertex element lacks x/y/z"));
                    }
                    vertices.push(Point3::new(coords[0], coords[1], coords[2]));
                }
                if is_face {
                    if face.len() < 3 {
                        return Err(MeshIoError::parse(path, 0, "face with fewer than 3 vertices"));
                    }
                    push_fan(&face, &mut triangles);
                }
            }
        }
    } else {
        let body = String::from_utf8_lossy(&bytes[after..]);
        let mut lines = body.lines().filter(|l| !l.trim().is_empty());
        for el in &elements {
            let is_vertex = el.name == "vertex";
            let is_face = el.name == "face";
            for row in 0..el.count {
                let line = lines.next().ok_or_else(|| {
                    MeshIoError::parse(path, 0, format!("missing row {row} of element {}", el.name))
                })?;
                let mut toks = line.split_whitespace();
                let mut coords = [f64::NAN; 3];
                let mut face: Vec<u32> = Vec::new();
                for prop in &el.props {
                    match prop {
                        PlyProp::Scalar(_, name) => {
                            let tok = toks.next().ok_or_else(|| {
                                MeshIoError::parse(path, 0, "short data row")
                            })?;
                            let v: f64 = tok.parse().map_err(|_| {
                                MeshIoError::parse(path, 0, format!("bad value `{tok}`"))
                            })?;
                            if is_vertex {
                                match name.as_str() {
                                    "x" => coords[0] = v,
                                    "y" => coords[1] = v,
                                    "z" => coords[2] = v,
                                    _ => {}
                                }
                            }
                        }
                        PlyProp::List(_, _, name) => {
                            let n: usize = toks
                                .next()
                                .and_then(|t| t.parse().ok())
                                .ok_or_else(|| MeshIoError::parse(path, 0, "bad list count"))?;
                            for _ in 0..n {
                                let tok = toks.next().ok_or_else(|| {
                                    MeshIoError::parse(path, 0, "short list row")
                                })?;
                                let v: u32 = tok.parse().map_err(|_| {
                                    MeshIoError::parse(path, 0, format!("bad index `{tok}`"))
                                })?;
                                if is_face && (name == "vertex_indices" || name == "vertex_index") {
                                    face.push(v);
                                }
                            }
                        }
                    }
                }
                if is_vertex {
                    if coords.iter().any(|c| c.is_nan()) {
                        return Err(MeshIoError::parse(path, 0, "vertex element lacks x/y/z"));
                    }
                    vertices.push(Point3::new(coords[0], coords[1], coords[2]));
                }
                if is_face {
                    if face.len() < 3 {
                        return Err(MeshIoError::parse(path, 0, "face with fewer than 3 vertices"));
                    }
                    push_fan(&face, &mut triangles);
                }
            }
        }
    }
    finish_mesh(path, vertices, triangles)
}

/// Writes a mesh as OBJ. Floats use the shortest round-trip form, so a
/// rewritten mesh reloads to exactly the same f64 coordinates.
pub fn save_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> std::io::Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for v in mesh.vertices() {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in mesh.triangles() {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()
}

#[derive(Debug, Error)]
pub enum CloudIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected DRPC")]
    BadMagic,
    #[error("truncated cloud file: declared {declared} points, found {found}")]
    Truncated { declared: u32, found: usize },
}

const CLOUD_MAGIC: &[u8; 4] = b"DRPC";

/// Binary cloud export: magic `DRPC`, u32 point count, then f32 xyz triples,
/// all little-endian.
pub fn save_cloud_drpc(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), CloudIoError> {
    let mut buf = Vec::with_capacity(8 + cloud.len() * 12);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for k in 0..3 {
            buf.extend_from_slice(&(p[k] as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_cloud_drpc(
    path: impl AsRef<Path>,
    source_shape_id: ShapeId,
    seed: u64,
) -> Result<PointCloud, CloudIoError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != CLOUD_MAGIC {
        return Err(CloudIoError::BadMagic);
    }
    let declared = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let body = &bytes[8..];
    if body.len() != declared as usize * 12 {
        return Err(CloudIoError::Truncated {
            declared,
            found: body.len() / 12,
        });
    }
    let mut points = Vec::with_capacity(declared as usize);
    for chunk in body.chunks_exact(12) {
        let x = f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(chunk[8..12].try_into().unwrap()) as f64;
        points.push(Point3::new(x, y, z));
    }
    Ok(PointCloud::new(points, source_shape_id, seed))
}

/// Text export, one `x y z` line per point.
pub fn save_cloud_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> std::io::Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()
}
