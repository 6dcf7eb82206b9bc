//! Point-cloud files.
//!
//! - `.xyz`: text, one point per line, `x y z f1 ... fC`, whitespace
//!   separated. Lines starting with `#` are comments; a
//!   `# sconv-xyz channels=C` header fixes the channel count of empty files.
//!   Coordinates are voxelized with the given resolution.
//! - `.mpc`: binary, magic `MPC1`, little-endian `u32 N`, `u32 C`, then
//!   `N×3` `i32` coordinates and `N×C` `f32` features.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sconv_core::geometry::{voxelize, Coordinate, PointCloud};
use sconv_core::Matrix;

use crate::error::CliError;

const MPC_MAGIC: &[u8; 4] = b"MPC1";
const XYZ_HEADER: &str = "# sconv-xyz channels=";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Xyz,
    Mpc,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Format, CliError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("xyz") => Ok(Format::Xyz),
            Some("mpc") => Ok(Format::Mpc),
            _ => Err(CliError::Usage(format!("{}: expected a .xyz or .mpc file", path.display()))),
        }
    }
}

pub fn read_cloud(path: &Path, resolution: f64) -> Result<PointCloud, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
    match Format::from_path(path)? {
        Format::Xyz => {
            let text = String::from_utf8(bytes).map_err(|e| CliError::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("not UTF-8 text ({e})"),
            })?;
            parse_xyz(&text, resolution, path)
        }
        Format::Mpc => parse_mpc(&bytes, path),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<(), CliError> {
    let data = match Format::from_path(path)? {
        Format::Xyz => format_xyz(cloud).into_bytes(),
        Format::Mpc => encode_mpc(cloud),
    };
    fs::write(path, data).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = format!("{XYZ_HEADER}{}\n", cloud.channels());
    for (c, row) in cloud.coords().iter().zip(cloud.features().as_slice().chunks(cloud.channels().max(1))) {
        let _ = write!(out, "{} {} {}", c.x, c.y, c.z);
        for v in row.iter().take(cloud.channels()) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_xyz(text: &str, resolution: f64, path: &Path) -> Result<PointCloud, CliError> {
    let err = |line: usize, message: String| CliError::Parse { path: path.to_path_buf(), line, message };
    let mut channels: Option<usize> = None;
    let mut points = Vec::new();
    let mut features = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(c) = line.strip_prefix(XYZ_HEADER) {
            let c = c.trim().parse().map_err(|_| err(n + 1, format!("bad channel count {c:?}")))?;
            if channels.is_some_and(|have| have != c) {
                return Err(err(n + 1, "header disagrees with earlier lines".into()));
            }
            channels = Some(c);
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut values = Vec::new();
        for field in line.split_whitespace() {
            values.push(field.parse::<f64>().map_err(|_| err(n + 1, format!("{field:?} is not a number")))?);
        }
        if values.len() < 3 {
            return Err(err(n + 1, format!("expected at least 3 fields, found {}", values.len())));
        }
        let c = values.len() - 3;
        match channels {
            None => channels = Some(c),
            Some(have) if have != c => return Err(err(n + 1, format!("expected {have} feature values, found {c}"))),
            _ => {}
        }
        points.push([values[0], values[1], values[2]]);
        features.extend(values[3..].iter().map(|&v| v as f32));
    }
    let channels = channels.unwrap_or(0);
    let features = Matrix::from_vec(points.len(), channels, features).map_err(|e| err(0, e.to_string()))?;
    voxelize(&points, &features, resolution).map_err(|e| err(0, e.to_string()))
}

pub fn encode_mpc(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + cloud.len() * (12 + 4 * cloud.channels()));
    out.extend_from_slice(MPC_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.channels() as u32).to_le_bytes());
    for c in cloud.coords().iter() {
        for v in [c.x, c.y, c.z] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in cloud.features().as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_mpc(bytes: &[u8], path: &Path) -> Result<PointCloud, CliError> {
    let err = |offset: usize, message: String| CliError::Format { path: PathBuf::from(path), offset, message };
    if bytes.len() < 12 {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != MPC_MAGIC {
        return Err(err(0, "bad magic (expected MPC1)".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let (n, c) = (word(4) as usize, word(8) as usize);
    let expected = n
        .checked_mul(12)
        .and_then(|coords| n.checked_mul(c)?.checked_mul(4)?.checked_add(coords))
        .and_then(|body| body.checked_add(12))
        .ok_or_else(|| err(4, "header sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(err(bytes.len().min(expected), format!("expected {expected} bytes for {n} points x {c} channels, found {}", bytes.len())));
    }
    let mut coords = Vec::with_capacity(n);
    for i in 0..n {
        let at = 12 + 12 * i;
        let v = |k: usize| i32::from_le_bytes(bytes[at + 4 * k..at + 4 * k + 4].try_into().unwrap());
        coords.push(Coordinate::new(v(0), v(1), v(2)));
    }
    let base = 12 + 12 * n;
    let features: Vec<f32> = bytes[base..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let features = Matrix::from_vec(n, c, features).map_err(|e| err(base, e.to_string()))?;
    PointCloud::new(coords, features).map_err(|e| err(12, e.to_string()))
}
