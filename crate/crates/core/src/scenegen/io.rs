//! On-disk dataset layout:
//!
//! ```text
//! manifest.json                    schema version, config, scene planes, frame list
//! points.txt                       `k X Y Z` ground-truth scene points
//! descriptors.txt                  `k v1 .. vn` base descriptors
//! covis.txt                        `k img x y [img x y ..]` point tracks
//! poses/frame-NNNNNN.pose.txt      4x4 camera-to-world matrix (7-Scenes style)
//! observations/frame-NNNNNN.txt    `k x y X Y Z`
//! images/frame-NNNNNN.pgm          16-bit binary graymap (P6 for color)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    CoVisibilityGraph, Dataset, DatasetConfig, DescriptorBank, DescriptorConfig, Frame, Image,
    ImageId, Observation, PointId, ScenePoint, Split, SyntheticScene, TexturedPlane,
};
use crate::geometry::{world_to_camera, PixelPoint, PoseSE3};

pub const SCHEMA_VERSION: u32 = 1;

/// Rotation blocks further than this from orthonormal trigger a warning.
pub const NON_RIGID_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{context}:{line}:{column}: {message}")]
    Parse {
        context: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{context}: rotation block is not orthonormal (error {error:.3e})")]
    NonRigid { context: String, error: f64 },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn parse(context: &str, line: usize, column: usize, message: impl Into<String>) -> Self {
        IoError::Parse {
            context: context.to_string(),
            line,
            column,
            message: message.into(),
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| IoError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

// ---------------------------------------------------------------------------
// 7-Scenes pose files

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseParseOptions {
    /// Treat the matrix as world-to-camera and invert it.
    pub invert: bool,
    /// Fail with `NonRigid` instead of re-orthonormalizing.
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedPose {
    pub pose: PoseSE3,
    /// Set when the rotation block had to be projected back onto SO(3).
    pub non_rigid_error: Option<f64>,
}

/// Parses a 4-line, 4-column whitespace-separated row-major homogeneous
/// matrix as a camera-to-world pose.
pub fn parse_7scenes_pose(
    text: &str,
    context: &str,
    opts: PoseParseOptions,
) -> Result<ParsedPose, IoError> {
    let mut rows = Vec::with_capacity(4);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if rows.len() == 4 {
            return Err(IoError::parse(context, lineno + 1, 1, "more than 4 rows"));
        }
        let mut row = Vec::with_capacity(4);
        let mut column = 1;
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                IoError::parse(
                    context,
                    lineno + 1,
                    column,
                    format!("invalid number `{tok}`"),
                )
            })?;
            row.push(v);
            column += 1;
        }
        if row.len() != 4 {
            return Err(IoError::parse(
                context,
                lineno + 1,
                column,
                format!("expected 4 columns, found {}", row.len()),
            ));
        }
        rows.push(row);
    }
    if rows.len() != 4 {
        return Err(IoError::parse(
            context,
            rows.len() + 1,
            1,
            format!("expected 4 rows, found {}", rows.len()),
        ));
    }
    let m = Matrix4::from_fn(|r, c| rows[r][c]);
    let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs()) > 1e-6
        || (bottom[3] - 1.0).abs() > 1e-6
    {
        return Err(IoError::parse(context, 4, 1, "last row must be 0 0 0 1"));
    }
    let mut pose = PoseSE3::from_homogeneous(&m);
    let err = pose
        .orthonormality_error()
        .max((pose.rotation.determinant() - 1.0).abs());
    let mut non_rigid_error = None;
    if err > NON_RIGID_TOL {
        if opts.strict {
            return Err(IoError::NonRigid {
                context: context.to_string(),
                error: err,
            });
        }
        log::warn!("{context}: rotation block off SO(3) by {err:.3e}; re-orthonormalizing");
        non_rigid_error = Some(err);
        pose = pose.orthonormalized();
    } else if err > 1e-9 {
        pose = pose.orthonormalized();
    }
    if opts.invert {
        pose = pose.inverse();
    }
    Ok(ParsedPose {
        pose,
        non_rigid_error,
    })
}

pub fn format_7scenes_pose(pose: &PoseSE3) -> String {
    let m = pose.to_homogeneous();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:e}", m[(r, c)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

// ---------------------------------------------------------------------------
// `k x y X Y Z` correspondence lines

pub type CorrespondenceRow = (PointId, PixelPoint, Vector3<f64>);

pub fn parse_correspondences(text: &str, context: &str) -> Result<Vec<CorrespondenceRow>, IoError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 6 {
            return Err(IoError::parse(
                context,
                lineno + 1,
                1,
                format!("expected `k x y X Y Z`, found {} fields", toks.len()),
            ));
        }
        let k: PointId = toks[0].parse().map_err(|_| {
            IoError::parse(
                context,
                lineno + 1,
                1,
                format!("invalid point id `{}`", toks[0]),
            )
        })?;
        let mut v = [0.0; 5];
        for (i, tok) in toks[1..].iter().enumerate() {
            v[i] = tok.parse().map_err(|_| {
                IoError::parse(
                    context,
                    lineno + 1,
                    i + 2,
                    format!("invalid number `{tok}`"),
                )
            })?;
        }
        out.push((
            k,
            PixelPoint::new(v[0], v[1]),
            Vector3::new(v[2], v[3], v[4]),
        ));
    }
    Ok(out)
}

pub fn format_correspondences(rows: &[CorrespondenceRow]) -> String {
    let mut s = String::from("# k x y X Y Z\n");
    for (k, p, w) in rows {
        let _ = writeln!(s, "{k} {:e} {:e} {:e} {:e} {:e}", p.x, p.y, w.x, w.y, w.z);
    }
    s
}

// ---------------------------------------------------------------------------
// Portable graymap / pixmap

pub fn write_pnm(path: &Path, img: &Image) -> Result<(), IoError> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{magic}\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    for &v in img.data() {
        let n = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&n.to_be_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| IoError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<Image, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    let ctx = path.display().to_string();
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::parse(
                &ctx,
                1,
                header.len() + 1,
                "truncated header",
            ));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    let channels = match header[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(IoError::parse(
                &ctx,
                1,
                1,
                format!("unsupported magic `{other}`"),
            ))
        }
    };
    let num = |i: usize| -> Result<usize, IoError> {
        header[i].parse().map_err(|_| {
            IoError::parse(
                &ctx,
                1,
                i + 1,
                format!("invalid header field `{}`", header[i]),
            )
        })
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(IoError::parse(&ctx, 1, 1, "invalid dimensions or maxval"));
    }
    let wide = maxval > 255;
    let n = w * h * channels;
    let need = n * if wide { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(IoError::parse(&ctx, 2, 1, "truncated pixel data"));
    }
    let data = (0..n)
        .map(|i| {
            let raw = if wide {
                u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]]) as f64
            } else {
                bytes[pos + i] as f64
            };
            raw / maxval as f64
        })
        .collect();
    Ok(Image::new(w, h, channels, data))
}

// ---------------------------------------------------------------------------
// Dataset directories

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image_id: ImageId,
    pub sequence: u32,
    pub index: usize,
    pub split: Split,
    pub pose_file: String,
    pub observation_file: String,
    pub image_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: DatasetConfig,
    pub descriptor_config: DescriptorConfig,
    pub planes: Vec<TexturedPlane>,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    pub diameter: f64,
    pub points_file: String,
    pub descriptors_file: String,
    pub covis_file: String,
    pub frames: Vec<FrameEntry>,
}

fn frame_stem(id: ImageId) -> String {
    format!("frame-{id:06}")
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest, IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let mut frames = Vec::with_capacity(ds.frames.len());
    for f in &ds.frames {
        let stem = frame_stem(f.image_id);
        let pose_file = format!("poses/{stem}.pose.txt");
        let observation_file = format!("observations/{stem}.txt");
        write_text(&dir.join(&pose_file), &format_7scenes_pose(&f.pose))?;
        let rows: Vec<CorrespondenceRow> = f
            .observations
            .iter()
            .map(|o| (o.point_id, o.pixel, o.gt_world))
            .collect();
        write_text(&dir.join(&observation_file), &format_correspondences(&rows))?;
        let image_file = match &f.image {
            Some(img) => {
                let name = format!("images/{stem}.pgm");
                write_pnm(&dir.join(&name), img)?;
                Some(name)
            }
            None => None,
        };
        frames.push(FrameEntry {
            image_id: f.image_id,
            sequence: f.sequence,
            index: f.index,
            split: f.split,
            pose_file,
            observation_file,
            image_file,
        });
    }

    let mut points = String::from("# k X Y Z\n");
    for p in &ds.scene.points {
        let _ = writeln!(
            points,
            "{} {:e} {:e} {:e}",
            p.id, p.position.x, p.position.y, p.position.z
        );
    }
    write_text(&dir.join("points.txt"), &points)?;

    let mut desc = String::from("# k v1 .. vn\n");
    for (k, v) in &ds.descriptors.base {
        let vals: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
        let _ = writeln!(desc, "{k} {}", vals.join(" "));
    }
    write_text(&dir.join("descriptors.txt"), &desc)?;

    let mut covis = String::from("# k img x y [img x y ...]\n");
    for (k, track) in ds.covis.tracks() {
        let _ = write!(covis, "{k}");
        for (img, p) in track {
            let _ = write!(covis, " {img} {:e} {:e}", p.x, p.y);
        }
        covis.push('\n');
    }
    write_text(&dir.join("covis.txt"), &covis)?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config: ds.config.clone(),
        descriptor_config: ds.descriptors.config,
        planes: ds.scene.planes.clone(),
        bbox_min: ds.scene.bbox_min,
        bbox_max: ds.scene.bbox_max,
        diameter: ds.scene.diameter,
        points_file: "points.txt".into(),
        descriptors_file: "descriptors.txt".into(),
        covis_file: "covis.txt".into(),
        frames,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&dir.join("manifest.json"), &(json + "\n"))?;
    Ok(manifest)
}

fn parse_rows(
    text: &str,
    context: &str,
    min_fields: usize,
) -> Result<Vec<(usize, Vec<String>)>, IoError> {
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if toks.len() < min_fields {
            return Err(IoError::parse(
                context,
                lineno + 1,
                1,
                format!("expected at least {min_fields} fields"),
            ));
        }
        rows.push((lineno + 1, toks));
    }
    Ok(rows)
}

fn num<T: std::str::FromStr>(
    tok: &str,
    context: &str,
    line: usize,
    column: usize,
) -> Result<T, IoError> {
    tok.parse()
        .map_err(|_| IoError::parse(context, line, column, format!("invalid value `{tok}`")))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, IoError> {
    let path = dir.join("manifest.json");
    let text = read_text(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| IoError::Parse {
        context: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(IoError::Format {
            path,
            message: format!("unsupported schema version {}", manifest.schema_version),
        });
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let manifest = load_manifest(dir)?;

    let ctx = manifest.points_file.clone();
    let mut points = Vec::new();
    for (line, toks) in parse_rows(&read_text(&dir.join(&manifest.points_file))?, &ctx, 4)? {
        points.push(ScenePoint {
            id: num(&toks[0], &ctx, line, 1)?,
            position: Vector3::new(
                num(&toks[1], &ctx, line, 2)?,
                num(&toks[2], &ctx, line, 3)?,
                num(&toks[3], &ctx, line, 4)?,
            ),
        });
    }
    let scene = SyntheticScene {
        points,
        planes: manifest.planes.clone(),
        bbox_min: manifest.bbox_min,
        bbox_max: manifest.bbox_max,
        diameter: manifest.diameter,
    };

    let ctx = manifest.descriptors_file.clone();
    let mut base = BTreeMap::new();
    for (line, toks) in parse_rows(&read_text(&dir.join(&manifest.descriptors_file))?, &ctx, 2)? {
        let k: PointId = num(&toks[0], &ctx, line, 1)?;
        let v = toks[1..]
            .iter()
            .enumerate()
            .map(|(i, t)| num(t, &ctx, line, i + 2))
            .collect::<Result<Vec<f64>, _>>()?;
        if v.len() != manifest.descriptor_config.dim {
            return Err(IoError::parse(
                &ctx,
                line,
                2,
                format!(
                    "expected {} descriptor values",
                    manifest.descriptor_config.dim
                ),
            ));
        }
        base.insert(k, v);
    }
    let descriptors = DescriptorBank::with_base(manifest.descriptor_config, base, scene.diameter);

    let ctx = manifest.covis_file.clone();
    let mut tracks = BTreeMap::new();
    for (line, toks) in parse_rows(&read_text(&dir.join(&manifest.covis_file))?, &ctx, 1)? {
        if (toks.len() - 1) % 3 != 0 {
            return Err(IoError::parse(
                &ctx,
                line,
                toks.len(),
                "track entries must be `img x y` triples",
            ));
        }
        let k: PointId = num(&toks[0], &ctx, line, 1)?;
        let mut track = Vec::new();
        for (j, chunk) in toks[1..].chunks(3).enumerate() {
            let col = 2 + 3 * j;
            track.push((
                num::<ImageId>(&chunk[0], &ctx, line, col)?,
                PixelPoint::new(
                    num(&chunk[1], &ctx, line, col + 1)?,
                    num(&chunk[2], &ctx, line, col + 2)?,
                ),
            ));
        }
        tracks.insert(k, track);
    }
    let covis = CoVisibilityGraph::from_tracks(tracks);

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for e in &manifest.frames {
        let pose = parse_7scenes_pose(
            &read_text(&dir.join(&e.pose_file))?,
            &e.pose_file,
            PoseParseOptions::default(),
        )?
        .pose;
        let rows = parse_correspondences(
            &read_text(&dir.join(&e.observation_file))?,
            &e.observation_file,
        )?;
        let observations = rows
            .into_iter()
            .map(|(k, pixel, gt)| Observation {
                point_id: k,
                pixel,
                gt_world: gt,
                gt_depth: world_to_camera(&pose, &gt).depth(),
            })
            .collect();
        let image = match &e.image_file {
            Some(name) => Some(read_pnm(&dir.join(name))?),
            None => None,
        };
        frames.push(Frame {
            image_id: e.image_id,
            sequence: e.sequence,
            index: e.index,
            split: e.split,
            pose,
            observations,
            image,
        });
    }
    Ok(Dataset {
        config: manifest.config,
        scene,
        descriptors,
        frames,
        covis,
    })
}
