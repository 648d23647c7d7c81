//! On-disk formats.
//!
//! Scene directory:
//!
//! ```text
//! meta.json            {"num_classes": C, "depth_scale": s, "delta_depth": δ}
//! cloud.ply            ASCII PLY, vertex properties x y z [red green blue]
//! gt.labels            optional, one integer per line, -1 = unannotated
//! sparse.labels        same format
//! views/<name>.cam     4 lines of 4 numbers (world-to-camera [R|t; 0 0 0 1])
//!                      then `fx fy cx cy W H`
//! views/<name>.depth.png   16-bit gray, value = s * meters, 0 = invalid
//! views/<name>.mask.png    16-bit gray, value = mask id (0 = unsegmented)
//! ```
//!
//! `mask3d.bin` is `T` and `N` as little-endian u64 followed by `T` row
//! bitmaps of `ceil(N / 8)` bytes each, point `i` at bit `i % 8` (LSB first)
//! of byte `i / 8`. Prediction stack files are `S = K + 1`, `N`, `C` as
//! little-endian u64 followed by `S * N * C` little-endian f64, row-major.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use fixedbitset::FixedBitSet;
use nalgebra::{Matrix3, Point3, Vector3};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap, GeometryError};
use crate::lift::{LiftError, MaskSet2D, MaskSet3D, MaskSource};
use crate::reliability::{PredictionStack, ReliabilityError};
use crate::scene::{
    LabelArray, PointCloud, SceneBundle, SceneError, SceneMeta, ViewObservation, IGNORE_ON_DISK,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Scene {
        path: PathBuf,
        #[source]
        source: SceneError,
    },
    #[error("{path}: {source}")]
    Geometry {
        path: PathBuf,
        #[source]
        source: GeometryError,
    },
    #[error("{path}: {source}")]
    Lift {
        path: PathBuf,
        #[source]
        source: LiftError,
    },
    #[error("{path}: {source}")]
    Stack {
        path: PathBuf,
        #[source]
        source: ReliabilityError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

// ---------------------------------------------------------------- labels

pub fn read_labels(path: &Path) -> Result<LabelArray, IoError> {
    let reader = open(path)?;
    let mut values = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: i64 = t
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("not an integer: {t:?}")))?;
        values.push(match v {
            IGNORE_ON_DISK => None,
            v if v >= 0 && v <= u32::MAX as i64 => Some(v as u32),
            v => return Err(parse_err(path, i + 1, format!("invalid label {v}"))),
        });
    }
    Ok(LabelArray::new(values))
}

pub fn save_labels(labels: &LabelArray, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    for v in labels.iter() {
        match v {
            Some(c) => writeln!(w, "{c}"),
            None => writeln!(w, "{IGNORE_ON_DISK}"),
        }
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads labels and checks them against the cloud size and class count.
pub fn read_labels_checked(
    path: &Path,
    num_points: usize,
    num_classes: usize,
) -> Result<LabelArray, IoError> {
    let labels = read_labels(path)?;
    let what = path.display().to_string();
    labels
        .check_len(&what, num_points)
        .and_then(|_| labels.validate(&what, num_classes))
        .map_err(|source| IoError::Scene {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(labels)
}

// ---------------------------------------------------------------- PLY

#[derive(Clone, Copy)]
enum PlyScalar {
    Float,
    UChar,
}

pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    let mut lines = open(path)?.lines().enumerate();
    let next_line = |lines: &mut std::iter::Enumerate<std::io::Lines<BufReader<File>>>| {
        lines
            .next()
            .map(|(i, l)| l.map(|l| (i + 1, l)).map_err(io_err(path)))
            .transpose()
    };

    match next_line(&mut lines)? {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing 'ply' magic")),
    }
    // (element name, count, properties)
    let mut elements: Vec<(String, usize, Vec<(String, Option<PlyScalar>)>)> = Vec::new();
    loop {
        let Some((n, line)) = next_line(&mut lines)? else {
            return Err(parse_err(path, 0, "header not terminated by end_header"));
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(parse_err(path, n, format!("unsupported PLY format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(path, n, "bad element count"))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                let Some(e) = elements.last_mut() else {
                    return Err(parse_err(path, n, "property before element"));
                };
                e.2.push((String::new(), None));
            }
            ["property", ty, name] => {
                let Some(e) = elements.last_mut() else {
                    return Err(parse_err(path, n, "property before element"));
                };
                let scalar = match *ty {
                    "float" | "float32" | "double" | "float64" => PlyScalar::Float,
                    "uchar" | "uint8" => PlyScalar::UChar,
                    _ => PlyScalar::Float,
                };
                e.2.push((name.to_string(), Some(scalar)));
            }
            ["end_header"] => break,
            _ => return Err(parse_err(path, n, format!("unexpected header line {line:?}"))),
        }
    }

    let mut positions = Vec::new();
    let mut colors: Option<Vec<[f64; 3]>> = None;
    for (name, count, props) in &elements {
        if name != "vertex" {
            for _ in 0..*count {
                if next_line(&mut lines)?.is_none() {
                    return Err(parse_err(path, 0, format!("truncated {name} element")));
                }
            }
            continue;
        }
        let find = |key: &str| props.iter().position(|(p, _)| p == key);
        let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
            return Err(format_err(path, "vertex element lacks x/y/z"));
        };
        let rgb = match (find("red"), find("green"), find("blue")) {
            (Some(r), Some(g), Some(b)) => Some([r, g, b]),
            _ => None,
        };
        if rgb.is_some() {
            colors = Some(Vec::with_capacity(*count));
        }
        positions.reserve(*count);
        for _ in 0..*count {
            let Some((n, line)) = next_line(&mut lines)? else {
                return Err(parse_err(path, 0, "truncated vertex data"));
            };
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| parse_err(path, n, "non-numeric vertex value"))?;
            if vals.len() < props.len() {
                return Err(parse_err(path, n, format!("expected {} values", props.len())));
            }
            positions.push(Point3::new(vals[ix], vals[iy], vals[iz]));
            if let (Some(rgb), Some(colors)) = (rgb, colors.as_mut()) {
                let c = rgb.map(|k| match props[k].1 {
                    Some(PlyScalar::UChar) => vals[k] / 255.0,
                    _ => vals[k],
                });
                colors.push(c);
            }
        }
    }
    PointCloud::new(positions, colors).map_err(|source| IoError::Scene {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes ASCII PLY with shortest round-trip decimal text.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    let mut header = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        cloud.len()
    );
    if cloud.colors().is_some() {
        header.push_str("property double red\nproperty double green\nproperty double blue\n");
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io_err(path))?;
    for (i, p) in cloud.positions().iter().enumerate() {
        match cloud.colors() {
            Some(c) => writeln!(w, "{} {} {} {} {} {}", p.x, p.y, p.z, c[i][0], c[i][1], c[i][2]),
            None => writeln!(w, "{} {} {}", p.x, p.y, p.z),
        }
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------- cameras

pub fn read_camera(path: &Path) -> Result<(CameraIntrinsics, CameraPose), IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let rows: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, t)| !t.is_empty())
        .collect();
    if rows.len() != 5 {
        return Err(format_err(
            path,
            format!("expected 5 non-empty lines, found {}", rows.len()),
        ));
    }
    let mut ext = [[0.0f64; 4]; 4];
    for (r, (line, toks)) in rows[..4].iter().enumerate() {
        if toks.len() != 4 {
            return Err(parse_err(path, *line, "extrinsic rows need 4 numbers"));
        }
        for (c, t) in toks.iter().enumerate() {
            ext[r][c] = t
                .parse()
                .map_err(|_| parse_err(path, *line, format!("not a number: {t}")))?;
        }
    }
    if ext[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(parse_err(path, rows[3].0, "last extrinsic row must be 0 0 0 1"));
    }
    let (line, toks) = &rows[4];
    if toks.len() != 6 {
        return Err(parse_err(path, *line, "intrinsics line is `fx fy cx cy W H`"));
    }
    let num = |i: usize| -> Result<f64, IoError> {
        toks[i]
            .parse()
            .map_err(|_| parse_err(path, *line, format!("not a number: {}", toks[i])))
    };
    let dim = |i: usize| -> Result<usize, IoError> {
        toks[i]
            .parse()
            .map_err(|_| parse_err(path, *line, format!("not an image size: {}", toks[i])))
    };
    let geo = |source| IoError::Geometry {
        path: path.to_path_buf(),
        source,
    };
    let k = CameraIntrinsics::new(num(0)?, num(1)?, num(2)?, num(3)?, dim(4)?, dim(5)?).map_err(geo)?;
    let rot = Matrix3::from_fn(|r, c| ext[r][c]);
    let t = Vector3::new(ext[0][3], ext[1][3], ext[2][3]);
    let pose = CameraPose::new(rot, t).map_err(geo)?;
    Ok((k, pose))
}

pub fn write_camera(k: &CameraIntrinsics, pose: &CameraPose, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    let (r, t) = (pose.rotation(), pose.translation());
    for i in 0..3 {
        writeln!(w, "{} {} {} {}", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]).map_err(io_err(path))?;
    }
    writeln!(w, "0 0 0 1").map_err(io_err(path))?;
    writeln!(w, "{} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------- PNG

/// Reads a single-channel PNG (8 or 16 bit) as `(width, height, values)`.
pub fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>), IoError> {
    let png_err = |e: png::DecodingError| format_err(path, e.to_string());
    let mut decoder = png::Decoder::new(open(path)?);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(format_err(
            path,
            format!("expected grayscale, got {:?}", info.color_type),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let values: Vec<u16> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect(),
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| b as u16).collect(),
        d => return Err(format_err(path, format!("unsupported bit depth {d:?}"))),
    };
    Ok((w, h, values))
}

pub fn write_gray16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<(), IoError> {
    debug_assert_eq!(values.len(), width * height);
    let w = create(path)?;
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let enc_err = |e: png::EncodingError| format_err(path, e.to_string());
    let mut writer = enc.write_header().map_err(enc_err)?;
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

pub fn read_depth(path: &Path, depth_scale: f64) -> Result<DepthMap, IoError> {
    let (w, h, raw) = read_gray16(path)?;
    DepthMap::new(w, h, raw.iter().map(|&v| v as f64 / depth_scale).collect()).map_err(|source| {
        IoError::Geometry {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Quantizes meters to `round(depth_scale * d)`; fails past the u16 range.
pub fn quantize_depth(depth: &DepthMap, depth_scale: f64) -> Result<Vec<u16>, String> {
    depth
        .data()
        .iter()
        .map(|&d| {
            let q = (d * depth_scale).round();
            if q > u16::MAX as f64 {
                Err(format!(
                    "depth {d} m exceeds the 16-bit range at scale {depth_scale}"
                ))
            } else {
                Ok(q as u16)
            }
        })
        .collect()
}

pub fn write_depth(depth: &DepthMap, depth_scale: f64, path: &Path) -> Result<(), IoError> {
    let q = quantize_depth(depth, depth_scale).map_err(|m| format_err(path, m))?;
    write_gray16(path, depth.width(), depth.height(), &q)
}

pub fn read_mask2d(path: &Path) -> Result<MaskSet2D, IoError> {
    let (w, h, raw) = read_gray16(path)?;
    MaskSet2D::new(w, h, raw.into_iter().map(u32::from).collect()).map_err(|source| IoError::Lift {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask2d(mask: &MaskSet2D, path: &Path) -> Result<(), IoError> {
    if mask.num_masks() > u16::MAX as u32 {
        return Err(format_err(path, "more than 65535 masks"));
    }
    let raw: Vec<u16> = mask.ids().iter().map(|&v| v as u16).collect();
    write_gray16(path, mask.width(), mask.height(), &raw)
}

// ---------------------------------------------------------------- scenes

pub fn read_meta(path: &Path) -> Result<SceneMeta, IoError> {
    let meta: SceneMeta = read_json(path)?;
    if meta.num_classes == 0 {
        return Err(IoError::Scene {
            path: path.to_path_buf(),
            source: SceneError::NoClasses,
        });
    }
    if !(meta.depth_scale > 0.0 && meta.depth_scale.is_finite()) {
        return Err(format_err(path, "depth_scale must be positive"));
    }
    if !(meta.delta_depth > 0.0 && meta.delta_depth.is_finite()) {
        return Err(format_err(path, "delta_depth must be positive"));
    }
    Ok(meta)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    serde_json::from_reader(open(path)?).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Names of the views in `dir/views`, sorted.
pub fn list_views(dir: &Path) -> Result<Vec<String>, IoError> {
    let views = dir.join("views");
    let mut names = Vec::new();
    for entry in fs::read_dir(&views).map_err(io_err(&views))? {
        let entry = entry.map_err(io_err(&views))?;
        let file = entry.file_name();
        if let Some(name) = file.to_str().and_then(|f| f.strip_suffix(".cam")) {
            names.push(name.to_string());
        }
    }
    names.sort();
    Ok(names)
}

pub fn load_view(dir: &Path, name: &str, depth_scale: f64) -> Result<ViewObservation, IoError> {
    let views = dir.join("views");
    let cam_path = views.join(format!("{name}.cam"));
    let (k, pose) = read_camera(&cam_path)?;
    let depth = read_depth(&views.join(format!("{name}.depth.png")), depth_scale)?;
    let mask = read_mask2d(&views.join(format!("{name}.mask.png")))?;
    ViewObservation::new(name, k, pose, depth, mask).map_err(|source| IoError::Scene {
        path: cam_path,
        source,
    })
}

pub fn load_scene(dir: &Path) -> Result<SceneBundle, IoError> {
    let meta = read_meta(&dir.join("meta.json"))?;
    let cloud = read_ply(&dir.join("cloud.ply"))?;
    let n = cloud.len();
    let gt_path = dir.join("gt.labels");
    let gt = if gt_path.exists() {
        Some(read_labels_checked(&gt_path, n, meta.num_classes)?)
    } else {
        None
    };
    let sparse = read_labels_checked(&dir.join("sparse.labels"), n, meta.num_classes)?;
    let views = list_views(dir)?
        .iter()
        .map(|name| load_view(dir, name, meta.depth_scale))
        .collect::<Result<Vec<_>, _>>()?;
    SceneBundle::new(meta, cloud, gt, sparse, views).map_err(|source| IoError::Scene {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn save_scene(bundle: &SceneBundle, dir: &Path) -> Result<(), IoError> {
    let views = dir.join("views");
    fs::create_dir_all(&views).map_err(io_err(&views))?;
    write_json(&bundle.meta, &dir.join("meta.json"))?;
    write_ply(&bundle.cloud, &dir.join("cloud.ply"))?;
    let gt_path = dir.join("gt.labels");
    match &bundle.gt {
        Some(gt) => save_labels(gt, &gt_path)?,
        None if gt_path.exists() => fs::remove_file(&gt_path).map_err(io_err(&gt_path))?,
        None => {}
    }
    save_labels(&bundle.sparse, &dir.join("sparse.labels"))?;
    for v in &bundle.views {
        write_camera(&v.intrinsics, &v.pose, &views.join(format!("{}.cam", v.name)))?;
        write_depth(
            &v.depth,
            bundle.meta.depth_scale,
            &views.join(format!("{}.depth.png", v.name)),
        )?;
        write_mask2d(&v.mask2d, &views.join(format!("{}.mask.png", v.name)))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- mask3d

pub fn write_mask3d(masks: &MaskSet3D, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    let n = masks.num_points();
    let mut bytes = Vec::with_capacity(16 + masks.len() * n.div_ceil(8));
    bytes.extend_from_slice(&(masks.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(n as u64).to_le_bytes());
    for row in masks.rows() {
        let mut buf = vec![0u8; n.div_ceil(8)];
        for i in row.ones() {
            buf[i / 8] |= 1 << (i % 8);
        }
        bytes.extend_from_slice(&buf);
    }
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn read_u64(bytes: &[u8], at: usize) -> Option<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

/// Reads `mask3d.bin`. Provenance is left empty; see [`read_provenance`].
pub fn read_mask3d(path: &Path) -> Result<MaskSet3D, IoError> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(io_err(path))?;
    let (Some(t), Some(n)) = (read_u64(&bytes, 0), read_u64(&bytes, 8)) else {
        return Err(format_err(path, "truncated header"));
    };
    let (t, n) = (t as usize, n as usize);
    let stride = n.div_ceil(8);
    if bytes.len() != 16 + t * stride {
        return Err(format_err(
            path,
            format!(
                "expected {} bytes for T={t}, N={n}, found {}",
                16 + t * stride,
                bytes.len()
            ),
        ));
    }
    let rows = (0..t)
        .map(|r| {
            let chunk = &bytes[16 + r * stride..16 + (r + 1) * stride];
            let mut row = FixedBitSet::with_capacity(n);
            for i in 0..n {
                if chunk[i / 8] >> (i % 8) & 1 == 1 {
                    row.insert(i);
                }
            }
            row
        })
        .collect();
    MaskSet3D::new(n, rows, vec![Vec::new(); t]).map_err(|source| IoError::Lift {
        path: path.to_path_buf(),
        source,
    })
}

/// Contents of `mask3d.prov.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceFile {
    /// Names of the merged views, indexed by `MaskSource::view`.
    pub views: Vec<String>,
    pub masks: Vec<Vec<MaskSource>>,
}

pub fn write_provenance(masks: &MaskSet3D, views: &[String], path: &Path) -> Result<(), IoError> {
    write_json(
        &ProvenanceFile {
            views: views.to_vec(),
            masks: masks.provenance().to_vec(),
        },
        path,
    )
}

pub fn read_provenance(path: &Path) -> Result<ProvenanceFile, IoError> {
    read_json(path)
}

/// Reads `mask3d.bin` and, if present next to it, `mask3d.prov.json`.
pub fn read_mask3d_with_provenance(path: &Path) -> Result<MaskSet3D, IoError> {
    let masks = read_mask3d(path)?;
    let prov_path = path.with_extension("prov.json");
    if !prov_path.exists() {
        return Ok(masks);
    }
    let prov = read_provenance(&prov_path)?;
    MaskSet3D::new(masks.num_points(), masks.rows().to_vec(), prov.masks).map_err(|source| IoError::Lift {
        path: prov_path,
        source,
    })
}

// ---------------------------------------------------------------- stacks

pub fn write_stack(stack: &PredictionStack, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    let (s, n, c) = stack.probs().dim();
    let mut bytes = Vec::with_capacity(24 + s * n * c * 8);
    for d in [s, n, c] {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in stack.probs().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_stack(path: &Path) -> Result<PredictionStack, IoError> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(io_err(path))?;
    let (Some(s), Some(n), Some(c)) = (read_u64(&bytes, 0), read_u64(&bytes, 8), read_u64(&bytes, 16)) else {
        return Err(format_err(path, "truncated header"));
    };
    let (s, n, c) = (s as usize, n as usize, c as usize);
    let count = s
        .checked_mul(n)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| format_err(path, "header dimensions overflow"))?;
    if bytes.len() != 24 + count * 8 {
        return Err(format_err(
            path,
            format!(
                "expected {} bytes for {s}x{n}x{c}, found {}",
                24 + count * 8,
                bytes.len()
            ),
        ));
    }
    let values: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let probs = Array3::from_shape_vec((s, n, c), values).expect("length checked above");
    PredictionStack::new(probs).map_err(|source| IoError::Stack {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn labels_reject_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.labels");
        fs::write(&p, "1\n-1\n-2\n").unwrap();
        assert!(matches!(read_labels(&p), Err(IoError::Parse { line: 3, .. })));
        fs::write(&p, "1\nfoo\n").unwrap();
        assert!(matches!(read_labels(&p), Err(IoError::Parse { line: 2, .. })));
    }

    #[test]
    fn label_range_error_names_file_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sparse.labels");
        fs::write(&p, "0\n-1\n3\n").unwrap();
        let err = read_labels_checked(&p, 3, 3).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sparse.labels") && msg.contains("index 2"), "{msg}");
    }

    #[test]
    fn ply_reads_uchar_colors_and_skips_other_elements() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        fs::write(
            &p,
            "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty float y\n\
             property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n\
             0 0 0 255 0 0\n1 2 3 0 51 255\n3 0 1 1\n",
        )
        .unwrap();
        let cloud = read_ply(&p).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.positions()[1], Point3::new(1.0, 2.0, 3.0));
        assert_eq!(cloud.colors().unwrap()[1], [0.0, 0.2, 1.0]);
    }

    #[test]
    fn ply_rejects_binary_and_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        fs::write(&p, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(read_ply(&p).is_err());
        fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 nan 0\n",
        )
        .unwrap();
        let err = read_ply(&p).unwrap_err();
        assert!(matches!(
            err,
            IoError::Scene {
                source: SceneError::NonFinite { index: 1 },
                ..
            }
        ));
    }

    #[test]
    fn camera_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.cam");
        let k = CameraIntrinsics::new(525.5, 520.25, 319.5, 239.5, 640, 480).unwrap();
        let pose = CameraPose::look_at(
            Point3::new(1.3, -2.7, 1.1),
            Point3::new(0.1, 0.2, 0.4),
            Vector3::z(),
        )
        .unwrap();
        write_camera(&k, &pose, &p).unwrap();
        let (k2, pose2) = read_camera(&p).unwrap();
        assert_eq!(k, k2);
        assert_eq!(pose, pose2);
    }

    #[test]
    fn camera_rejects_non_rigid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.cam");
        fs::write(&p, "2 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n1 1 0 0 4 4\n").unwrap();
        assert!(matches!(read_camera(&p), Err(IoError::Geometry { .. })));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_labels(
            &LabelArray::new(vec![Some(1)]),
            Path::new("/nonexistent-dir/x.labels"),
        )
        .unwrap_err();
        assert!(matches!(err, IoError::Io { .. }));
    }

    #[test]
    fn mask3d_rejects_wrong_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let mut bytes = 1u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(&10u64.to_le_bytes());
        bytes.push(0xff);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_mask3d(&p), Err(IoError::Format { .. })));
    }

    proptest! {
        #[test]
        fn labels_round_trip(values in proptest::collection::vec(proptest::option::of(0u32..1000), 0..200)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("l.labels");
            let labels = LabelArray::new(values);
            save_labels(&labels, &p).unwrap();
            prop_assert_eq!(read_labels(&p).unwrap(), labels);
        }

        #[test]
        fn ply_round_trip_is_exact(
            pts in proptest::collection::vec((any::<f64>(), any::<f64>(), any::<f64>(), 0.0f64..=1.0), 1..100)
        ) {
            let pts: Vec<_> = pts.into_iter().filter(|(x, y, z, _)| x.is_finite() && y.is_finite() && z.is_finite()).collect();
            prop_assume!(!pts.is_empty());
            let cloud = PointCloud::new(
                pts.iter().map(|&(x, y, z, _)| Point3::new(x, y, z)).collect(),
                Some(pts.iter().map(|&(_, _, _, c)| [c, 1.0 - c, c * 0.5]).collect()),
            ).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.ply");
            write_ply(&cloud, &p).unwrap();
            prop_assert_eq!(read_ply(&p).unwrap(), cloud);
        }

        #[test]
        fn mask3d_round_trip(n in 1usize..70, assign in proptest::collection::vec(proptest::option::of(0usize..4), 70)) {
            let mut lists = vec![Vec::new(); 4];
            for (i, a) in assign.iter().take(n).enumerate() {
                if let Some(t) = a { lists[*t].push(i); }
            }
            lists.retain(|l| !l.is_empty());
            let masks = MaskSet3D::from_point_lists(n, &lists).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.bin");
            write_mask3d(&masks, &p).unwrap();
            prop_assert_eq!(read_mask3d(&p).unwrap(), masks);
        }
    }
}
