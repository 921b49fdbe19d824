//! Readers and writers for scans, poses, PLY/XYZ dumps and pair lists.

mod config_file;
mod synth;

pub use config_file::{parse_config, RunConfig};
pub use synth::{generate_pair, CropShape, ScenePairSpec, SyntheticPairs};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Point3;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::eval::PairSource;
use crate::geom::RigidTransform;

const KITTI_RECORD: usize = 16;

/// Reads a KITTI velodyne scan: little-endian `f32` records `(x, y, z, intensity)`.
pub fn read_kitti_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    parse_kitti_bin(&bytes).map_err(|msg| Error::malformed(path, msg))
}

pub fn parse_kitti_bin(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if bytes.len() % KITTI_RECORD != 0 {
        return Err(format!(
            "length {} is not a multiple of {KITTI_RECORD}; trailing record starts at byte {}",
            bytes.len(),
            bytes.len() / KITTI_RECORD * KITTI_RECORD
        ));
    }
    let n = bytes.len() / KITTI_RECORD;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(KITTI_RECORD).enumerate() {
        let mut v = [0f32; 4];
        for (c, slot) in v.iter_mut().enumerate() {
            *slot = f32::from_le_bytes(rec[4 * c..4 * c + 4].try_into().unwrap());
            if !slot.is_finite() {
                return Err(format!("non-finite value at byte {}", i * KITTI_RECORD + 4 * c));
            }
        }
        points.push(Point3::new(v[0] as f64, v[1] as f64, v[2] as f64));
        intensity.push(v[3] as f64);
    }
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
    })
}

/// Writes a KITTI scan; missing intensities are written as 0.
pub fn write_kitti_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut buf = Vec::with_capacity(cloud.len() * KITTI_RECORD);
    for (i, p) in cloud.points.iter().enumerate() {
        let it = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for x in [p.x, p.y, p.z, it] {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Parses one row-major `[R|t]` line of 12 numbers. `line_no` is 1-based.
pub fn parse_pose_line(line: &str, line_no: usize) -> std::result::Result<RigidTransform, String> {
    let mut v = [0.0; 12];
    let mut count = 0;
    for (i, tok) in line.split_whitespace().enumerate() {
        if i >= 12 {
            return Err(format!("line {line_no}: more than 12 values"));
        }
        v[i] = tok
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("line {line_no}: bad number {tok:?}"))?;
        count += 1;
    }
    if count != 12 {
        return Err(format!("line {line_no}: expected 12 values, found {count}"));
    }
    let t = RigidTransform::from_row_major_3x4(&v);
    if t.orthonormality_error() > 1e-6 {
        log::warn!(
            "line {line_no}: rotation drifts {:.3e} from orthonormal; re-orthonormalizing",
            t.orthonormality_error()
        );
        return Ok(t.orthonormalized());
    }
    Ok(t)
}

/// One transform per non-empty line.
pub fn read_pose_file(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_pose_line(l, i + 1).map_err(|m| Error::malformed(path, m)))
        .collect()
}

pub fn format_pose_line(t: &RigidTransform) -> String {
    t.to_row_major_3x4()
        .iter()
        .map(|x| format!("{x:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_pose_file(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in poses {
        writeln!(w, "{}", format_pose_line(p))?;
    }
    w.flush()?;
    Ok(())
}

/// ASCII PLY with `x y z` and an optional `confidence` property per vertex.
pub fn write_ply(path: &Path, cloud: &PointCloud, confidence: Option<&[f64]>) -> Result<()> {
    if let Some(c) = confidence {
        if c.len() != cloud.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} confidences for {} points",
                c.len(),
                cloud.len()
            )));
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    if confidence.is_some() {
        writeln!(w, "property double confidence")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        match confidence {
            Some(c) => writeln!(w, "{} {} {} {}", p.x, p.y, p.z, c[i])?,
            None => writeln!(w, "{} {} {}", p.x, p.y, p.z)?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the `x y z` columns of an ASCII PLY written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let mut vertices = None;
    for (i, line) in lines.by_ref() {
        if let Some(n) = line.strip_prefix("element vertex ") {
            vertices = Some(
                n.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::malformed(path, format!("line {}: bad vertex count", i + 1)))?,
            );
        }
        if line.trim() == "end_header" {
            break;
        }
    }
    let n = vertices.ok_or_else(|| Error::malformed(path, "missing vertex count"))?;
    let mut points = Vec::with_capacity(n);
    for (i, line) in lines.take(n) {
        points.push(parse_xyz(line, i + 1).map_err(|m| Error::malformed(path, m))?);
    }
    if points.len() != n {
        return Err(Error::malformed(path, format!("{} of {n} vertices present", points.len())));
    }
    Ok(PointCloud::from_points(points))
}

fn parse_xyz(line: &str, line_no: usize) -> std::result::Result<Point3<f64>, String> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .take(3)
        .map(|t| t.parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| format!("line {line_no}: bad coordinate"))?;
    if vals.len() != 3 {
        return Err(format!("line {line_no}: expected x y z"));
    }
    Ok(Point3::new(vals[0], vals[1], vals[2]))
}

/// One `x y z` per line; blank lines are skipped.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let points = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_xyz(l, i + 1).map_err(|m| Error::malformed(path, m)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PointCloud::from_points(points))
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cloud by extension: `.bin` (KITTI), `.ply` or `.xyz`.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => read_kitti_bin(path),
        Some("ply") => read_ply(path),
        Some("xyz") | Some("txt") => read_xyz(path),
        _ => Err(Error::malformed(path, "unknown point cloud extension")),
    }
}

/// One row of a pair list.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub gt: RigidTransform,
}

pub const PAIRS_FILE: &str = "pairs.csv";

/// Reads `src_path,tgt_path,gt_pose_line`; relative paths resolve against the
/// list's directory.
pub fn read_pairs_csv(path: &Path) -> Result<Vec<PairEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::malformed(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::malformed(path, format!("line {line}: {e}")))?;
        if rec.len() != 3 {
            return Err(Error::malformed(path, format!("line {line}: expected 3 fields")));
        }
        let gt = parse_pose_line(&rec[2], line).map_err(|m| Error::malformed(path, m))?;
        out.push(PairEntry {
            src: base.join(&rec[0]),
            tgt: base.join(&rec[1]),
            gt,
        });
    }
    Ok(out)
}

/// Writes a pair list with paths relative to `base` where possible.
pub fn write_pairs_csv(path: &Path, base: &Path, entries: &[PairEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::malformed(path, e.to_string()))?;
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["src_path", "tgt_path", "gt_pose_line"]).map_err(io)?;
    for e in entries {
        w.write_record([rel(&e.src), rel(&e.tgt), format_pose_line(&e.gt)]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Pairs listed in a `pairs.csv`, loaded lazily from disk.
#[derive(Debug, Clone)]
pub struct PairList {
    pub entries: Vec<PairEntry>,
}

impl PairList {
    /// Loads `dir/pairs.csv`; a missing list or an empty directory yields an
    /// empty dataset.
    pub fn open(dir: &Path) -> Result<Self> {
        let list = if dir.is_dir() { dir.join(PAIRS_FILE) } else { dir.to_path_buf() };
        if !list.exists() {
            if dir.exists() {
                return Ok(Self { entries: Vec::new() });
            }
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} does not exist", dir.display()),
            )));
        }
        Ok(Self {
            entries: read_pairs_csv(&list)?,
        })
    }
}

impl PairSource for PairList {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn load(&self, index: usize) -> Result<(PointCloud, PointCloud, RigidTransform)> {
        let e = &self.entries[index];
        Ok((read_cloud(&e.src)?, read_cloud(&e.tgt)?, e.gt))
    }
}
