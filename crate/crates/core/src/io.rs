//! File formats: PFM maps, label PNGs, binary PLY clouds, camera files and
//! the training manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Camera;
use crate::map::{DepthMap, GridMap, NormalMap};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("{0}: image error: {1}")]
    Image(PathBuf, String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{0}: {1}")]
    Format(PathBuf, String),
    #[error("{0}: missing")]
    Missing(PathBuf),
}

impl IoError {
    fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn format(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Format(path.to_path_buf(), msg.into())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IoError::Missing(path.to_path_buf())
        } else {
            IoError::Io(path.to_path_buf(), e)
        }
    })
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    String::from_utf8(read_file(path)?).map_err(|_| IoError::format(path, "not UTF-8"))
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| IoError::Io(parent.to_path_buf(), e))?;
    }
    fs::write(path, bytes).map_err(|e| IoError::Io(path.to_path_buf(), e))
}

// ---------------------------------------------------------------------------
// PFM

/// Float image with 1 or 3 interleaved channels, rows stored top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert!(channels == 1 || channels == 3, "PFM holds 1 or 3 channels");
        assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Little-endian encoding (scale -1), rows written bottom to top.
    pub fn encode(&self) -> Vec<u8> {
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        let row = self.width * self.channels;
        out.reserve(self.data.len() * 4);
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes either byte order, as indicated by the sign of the scale.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self, IoError> {
        let mut pos = 0;
        let mut next_line = |line: usize| -> Result<String, IoError> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| IoError::parse(path, line, "truncated header"))?;
            let s = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| IoError::parse(path, line, "header is not text"))?
                .trim()
                .to_string();
            pos += end + 1;
            Ok(s)
        };
        let channels = match next_line(1)?.as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(IoError::parse(path, 1, format!("bad magic {other:?}"))),
        };
        let dims = next_line(2)?;
        let mut it = dims.split_whitespace().map(str::parse::<usize>);
        let (width, height) = match (it.next(), it.next(), it.next()) {
            (Some(Ok(w)), Some(Ok(h)), None) => (w, h),
            _ => return Err(IoError::parse(path, 2, format!("bad dimensions {dims:?}"))),
        };
        let scale: f32 = next_line(3)?
            .parse()
            .map_err(|_| IoError::parse(path, 3, "bad scale"))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(IoError::parse(path, 3, "scale must be non-zero"));
        }
        let little = scale < 0.0;
        let n = width * height * channels;
        let body = &bytes[pos..];
        if body.len() != n * 4 {
            return Err(IoError::format(path, format!("expected {} data bytes, found {}", n * 4, body.len())));
        }
        let row = width * channels;
        let mut data = vec![0f32; n];
        for (k, chunk) in body.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let (file_row, col) = (k / row, k % row);
            data[(height - 1 - file_row) * row + col] = v;
        }
        Ok(Self::new(width, height, channels, data))
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::decode(&read_file(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        write_file(path, &self.encode())
    }
}

fn expect_channels(pfm: &Pfm, channels: usize, path: &Path) -> Result<(), IoError> {
    if pfm.channels != channels {
        return Err(IoError::format(path, format!("expected {channels}-channel PFM, found {}", pfm.channels)));
    }
    Ok(())
}

/// Depth maps store 0 at invalid pixels.
pub fn depth_to_pfm(map: &DepthMap) -> Pfm {
    let data = map
        .values()
        .iter()
        .zip(map.mask())
        .map(|(&z, &ok)| if ok { z as f32 } else { 0.0 })
        .collect();
    Pfm::new(map.width(), map.height(), 1, data)
}

pub fn depth_from_pfm(pfm: &Pfm, path: &Path) -> Result<DepthMap, IoError> {
    expect_channels(pfm, 1, path)?;
    let valid = pfm.data.iter().map(|z| z.is_finite() && *z > 0.0).collect();
    let values = pfm.data.iter().map(|&z| z as f64).collect();
    Ok(GridMap::from_parts(pfm.width, pfm.height, values, valid))
}

/// Camera-frame normals; invalid pixels are stored as zero vectors.
pub fn normals_to_pfm(map: &NormalMap) -> Pfm {
    let mut data = Vec::with_capacity(map.len() * 3);
    for (n, &ok) in map.values().iter().zip(map.mask()) {
        if ok {
            data.extend([n.x as f32, n.y as f32, n.z as f32]);
        } else {
            data.extend([0.0; 3]);
        }
    }
    Pfm::new(map.width(), map.height(), 3, data)
}

pub fn normals_from_pfm(pfm: &Pfm, path: &Path) -> Result<NormalMap, IoError> {
    expect_channels(pfm, 3, path)?;
    let mut values = Vec::with_capacity(pfm.width * pfm.height);
    let mut valid = Vec::with_capacity(pfm.width * pfm.height);
    for c in pfm.data.chunks_exact(3) {
        let n = Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64);
        let norm = n.norm();
        let ok = norm.is_finite() && norm > 0.5;
        values.push(if ok { n / norm } else { Vector3::zeros() });
        valid.push(ok);
    }
    Ok(GridMap::from_parts(pfm.width, pfm.height, values, valid))
}

/// Scalar maps such as counters and confidences. Invalid pixels are stored
/// as `fill`.
pub fn scalar_to_pfm(map: &GridMap<f64>, fill: f32) -> Pfm {
    let data = map
        .values()
        .iter()
        .zip(map.mask())
        .map(|(&v, &ok)| if ok { v as f32 } else { fill })
        .collect();
    Pfm::new(map.width(), map.height(), 1, data)
}

/// Reads a 1-channel PFM; non-finite or negative values are invalid.
pub fn scalar_from_pfm(pfm: &Pfm, path: &Path) -> Result<GridMap<f64>, IoError> {
    expect_channels(pfm, 1, path)?;
    let valid = pfm.data.iter().map(|v| v.is_finite() && *v >= 0.0).collect();
    let values = pfm.data.iter().map(|&v| if v.is_finite() { v as f64 } else { 0.0 }).collect();
    Ok(GridMap::from_parts(pfm.width, pfm.height, values, valid))
}

// ---------------------------------------------------------------------------
// 8-bit gray PNG

pub fn write_gray_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), IoError> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| IoError::format(path, "buffer size mismatch"))?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| IoError::Image(path.to_path_buf(), e.to_string()))?;
    write_file(path, &bytes)
}

pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>), IoError> {
    let bytes = read_file(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| IoError::Image(path.to_path_buf(), e.to_string()))?;
    if img.color() != image::ColorType::L8 {
        return Err(IoError::format(path, format!("expected 8-bit gray PNG, found {:?}", img.color())));
    }
    let g = img.into_luma8();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}

// ---------------------------------------------------------------------------
// PLY

/// Point cloud as stored in PLY files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn from_positions(positions: Vec<Vector3<f64>>) -> Self {
        let n = positions.len();
        Self {
            positions,
            normals: vec![Vector3::zeros(); n],
            colors: vec![[255; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Binary little-endian PLY with `x y z nx ny nz` as float32 and
/// `red green blue` as uint8.
pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    assert_eq!(cloud.normals.len(), cloud.len());
    assert_eq!(cloud.colors.len(), cloud.len());
    let mut out = Vec::with_capacity(256 + cloud.len() * 27);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )
    .expect("writing to a Vec");
    for i in 0..cloud.len() {
        let p = &cloud.positions[i];
        let n = &cloud.normals[i];
        for v in [p.x, p.y, p.z, n.x, n.y, n.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&cloud.colors[i]);
    }
    out
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    write_file(path, &encode_ply(cloud))
}

#[derive(Debug, Clone, Copy)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read(self, b: &[u8], little: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                (if little { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
            }};
        }
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => num!(i16, 2),
            PlyType::U16 => num!(u16, 2),
            PlyType::I32 => num!(i32, 4),
            PlyType::U32 => num!(u32, 4),
            PlyType::F32 => num!(f32, 4),
            PlyType::F64 => num!(f64, 8),
        }
    }
}

/// Reads the vertex element of an ASCII or binary PLY file. Missing normals
/// are zero and missing colors white.
pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<PointCloud, IoError> {
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| IoError::format(path, "no end_header"))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| IoError::format(path, "header is not text"))?;
    let mut format = None;
    // (element name, count, properties)
    let mut elements: Vec<(String, usize, Vec<(String, PlyType)>)> = Vec::new();
    for (no, line) in header.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: &str| IoError::parse(path, no + 1, msg);
        match toks.first().copied() {
            Some("ply") | Some("comment") | Some("obj_info") | Some("end_header") | None => {}
            Some("format") => format = toks.get(1).map(|s| s.to_string()),
            Some("element") => {
                let count = toks.get(2).and_then(|c| c.parse().ok()).ok_or_else(|| err("bad element"))?;
                elements.push((toks.get(1).unwrap_or(&"").to_string(), count, Vec::new()));
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| err("property before element"))?;
                if toks.get(1) == Some(&"list") {
                    return Err(err("list properties are not supported"));
                }
                let ty = toks.get(1).and_then(|t| PlyType::parse(t)).ok_or_else(|| err("bad property type"))?;
                el.2.push((toks.get(2).ok_or_else(|| err("unnamed property"))?.to_string(), ty));
            }
            Some(other) => return Err(err(&format!("unknown header keyword {other}"))),
        }
    }
    let format = format.ok_or_else(|| IoError::format(path, "no format line"))?;
    let (vcount, props) = match elements.first() {
        Some((name, count, props)) if name == "vertex" => (*count, props.clone()),
        _ => return Err(IoError::format(path, "first element must be vertex")),
    };
    let index = |name: &str| props.iter().position(|(n, _)| n == name);
    let (ix, iy, iz) = match (index("x"), index("y"), index("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(IoError::format(path, "vertex lacks x, y, z")),
    };
    let normal_idx = match (index("nx"), index("ny"), index("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let color_idx = match (index("red"), index("green"), index("blue")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(vcount);
    let body = &bytes[header_end..];
    match format.as_str() {
        "ascii" => {
            let text = std::str::from_utf8(body).map_err(|_| IoError::format(path, "ascii body is not text"))?;
            let header_lines = header.lines().count();
            for (k, line) in text.lines().filter(|l| !l.trim().is_empty()).take(vcount).enumerate() {
                let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
                match vals {
                    Ok(v) if v.len() == props.len() => rows.push(v),
                    _ => return Err(IoError::parse(path, header_lines + k + 1, "bad vertex line")),
                }
            }
        }
        "binary_little_endian" | "binary_big_endian" => {
            let little = format == "binary_little_endian";
            let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
            if body.len() < stride * vcount {
                return Err(IoError::format(path, "truncated vertex data"));
            }
            for k in 0..vcount {
                let mut off = k * stride;
                let mut row = Vec::with_capacity(props.len());
                for (_, t) in &props {
                    row.push(t.read(&body[off..], little));
                    off += t.size();
                }
                rows.push(row);
            }
        }
        other => return Err(IoError::format(path, format!("unsupported format {other}"))),
    }
    if rows.len() != vcount {
        return Err(IoError::format(path, "fewer vertices than declared"));
    }
    let mut cloud = PointCloud::default();
    for r in rows {
        cloud.positions.push(Vector3::new(r[ix], r[iy], r[iz]));
        cloud.normals.push(normal_idx.map_or(Vector3::zeros(), |[a, b, c]| Vector3::new(r[a], r[b], r[c])));
        cloud.colors.push(color_idx.map_or([255; 3], |[a, b, c]| [r[a] as u8, r[b] as u8, r[c] as u8]));
    }
    Ok(cloud)
}

pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    decode_ply(&read_file(path)?, path)
}

// ---------------------------------------------------------------------------
// Cameras

/// One posed image as read from a camera file.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedImage {
    pub name: String,
    pub camera: Camera,
}

#[derive(Debug, Clone, Copy)]
struct Intrinsics {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim_start().starts_with('#'))
}

fn parse_nums<T: std::str::FromStr>(toks: &[&str], path: &Path, line: usize) -> Result<Vec<T>, IoError> {
    toks.iter()
        .map(|t| t.parse().map_err(|_| IoError::parse(path, line, format!("bad number {t:?}"))))
        .collect()
}

fn parse_sfm_cameras(text: &str, path: &Path) -> Result<Vec<(u64, Intrinsics)>, IoError> {
    let mut out = Vec::new();
    for (no, line) in data_lines(text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 4 {
            return Err(IoError::parse(path, no, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS"));
        }
        let id: u64 = toks[0].parse().map_err(|_| IoError::parse(path, no, "bad camera id"))?;
        let dims: Vec<usize> = parse_nums(&toks[2..4], path, no)?;
        let params: Vec<f64> = parse_nums(&toks[4..], path, no)?;
        // pixel centers sit at +0.5 in this format
        let (fx, fy, cx, cy) = match (toks[1], params.as_slice()) {
            ("PINHOLE", &[fx, fy, cx, cy]) => (fx, fy, cx - 0.5, cy - 0.5),
            ("SIMPLE_PINHOLE", &[f, cx, cy]) => (f, f, cx - 0.5, cy - 0.5),
            (model @ ("PINHOLE" | "SIMPLE_PINHOLE"), p) => {
                return Err(IoError::parse(path, no, format!("{model} with {} parameters", p.len())))
            }
            (model, _) => return Err(IoError::parse(path, no, format!("unsupported camera model {model}"))),
        };
        out.push((
            id,
            Intrinsics {
                width: dims[0],
                height: dims[1],
                fx,
                fy,
                cx,
                cy,
            },
        ));
    }
    Ok(out)
}

/// Parses the `cameras.txt` / `images.txt` pair of a sparse reconstruction
/// (PINHOLE or SIMPLE_PINHOLE cameras, quaternion world-to-camera poses).
/// Images are returned sorted by name.
pub fn parse_sfm_text(cameras: &str, cameras_path: &Path, images: &str, images_path: &Path) -> Result<Vec<PosedImage>, IoError> {
    let intrinsics = parse_sfm_cameras(cameras, cameras_path)?;
    let mut out = Vec::new();
    let mut expect_points = false;
    for (no, line) in data_lines(images) {
        if expect_points {
            expect_points = false;
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 10 {
            return Err(IoError::parse(
                images_path,
                no,
                "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME",
            ));
        }
        let v: Vec<f64> = parse_nums(&toks[1..8], images_path, no)?;
        let cam_id: u64 = toks[8].parse().map_err(|_| IoError::parse(images_path, no, "bad camera id"))?;
        let k = intrinsics
            .iter()
            .find(|(id, _)| *id == cam_id)
            .map(|(_, k)| *k)
            .ok_or_else(|| IoError::parse(images_path, no, format!("unknown camera {cam_id}")))?;
        let q = Quaternion::new(v[0], v[1], v[2], v[3]);
        if q.norm() < 1e-9 {
            return Err(IoError::parse(images_path, no, "zero quaternion"));
        }
        let rotation: Matrix3<f64> = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        let camera = Camera::new(k.fx, k.fy, k.cx, k.cy, rotation, Vector3::new(v[4], v[5], v[6]), k.width, k.height)
            .map_err(|e| IoError::parse(images_path, no, e.to_string()))?;
        out.push(PosedImage {
            name: toks[9].to_string(),
            camera,
        });
        expect_points = true;
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

/// Inverse of [`parse_sfm_text`]: returns (cameras.txt, images.txt).
pub fn format_sfm_text(images: &[PosedImage]) -> (String, String) {
    let mut cams = String::from("# CAMERA_ID MODEL WIDTH HEIGHT fx fy cx cy\n");
    let mut imgs = String::from("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D\n");
    for (i, im) in images.iter().enumerate() {
        let c = &im.camera;
        cams.push_str(&format!(
            "{} PINHOLE {} {} {:.17} {:.17} {:.17} {:.17}\n",
            i + 1,
            c.width,
            c.height,
            c.fx,
            c.fy,
            c.cx + 0.5,
            c.cy + 0.5
        ));
        let q = UnitQuaternion::from_matrix(&c.rotation);
        let t = c.translation;
        imgs.push_str(&format!(
            "{} {:.17} {:.17} {:.17} {:.17} {:.17} {:.17} {:.17} {} {}\n\n",
            i + 1,
            q.w,
            q.i,
            q.j,
            q.k,
            t.x,
            t.y,
            t.z,
            i + 1,
            im.name
        ));
    }
    (cams, imgs)
}

/// World points of a `points3D.txt` file.
pub fn parse_sfm_points(text: &str, path: &Path) -> Result<Vec<Vector3<f64>>, IoError> {
    let mut out = Vec::new();
    for (no, line) in data_lines(text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 4 {
            return Err(IoError::parse(path, no, "expected POINT3D_ID X Y Z ..."));
        }
        let v: Vec<f64> = parse_nums(&toks[1..4], path, no)?;
        out.push(Vector3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

/// Native JSON scene description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneFile {
    pub depth_range: Option<(f64, f64)>,
    pub views: Vec<SceneFileView>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneFileView {
    /// Image file name inside `images/`.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl SceneFileView {
    pub fn from_camera(image: impl Into<String>, c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            image: image.into(),
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }

    pub fn camera(&self) -> Result<Camera, crate::geometry::GeometryError> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            r,
            Vector3::from(self.translation),
            self.width,
            self.height,
        )
    }
}

pub fn parse_scene_json(text: &str, path: &Path) -> Result<(Vec<PosedImage>, Option<(f64, f64)>), IoError> {
    let scene: SceneFile = serde_json::from_str(text).map_err(|e| IoError::parse(path, e.line(), e.to_string()))?;
    let mut out = Vec::with_capacity(scene.views.len());
    for (i, v) in scene.views.iter().enumerate() {
        let camera = v
            .camera()
            .map_err(|e| IoError::format(path, format!("view {i} ({}): {e}", v.image)))?;
        out.push(PosedImage {
            name: v.image.clone(),
            camera,
        });
    }
    Ok((out, scene.depth_range))
}

// ---------------------------------------------------------------------------
// Training manifest

/// One exported training view. Paths are relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: String,
    pub normal: String,
    pub counter: String,
    pub label: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|e| IoError::parse(path, e.line(), e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(path, text.as_bytes())
    }

    /// Adds `record`, replacing an existing record for the same image.
    pub fn upsert(&mut self, record: ManifestRecord) {
        match self.records.iter_mut().find(|r| r.image == record.image) {
            Some(r) => *r = record,
            None => self.records.push(record),
        }
    }
}
