//! File interchange: PLY point clouds, raster images, trajectories, pose
//! graphs and scene descriptions.
//!
//! Readers never panic on malformed input. Text formats report the 1-based
//! line of the problem, binary formats the byte offset.

use std::fmt;
use std::path::{Path, PathBuf};

pub mod graph_file;
pub mod image;
pub mod ply;
pub mod scene_file;
pub mod trajectory;

pub use graph_file::{read_pose_graph, write_pose_graph};
pub use ply::{read_ply, write_ply, PlyEncoding};
pub use scene_file::{parse_scene, read_scene};
pub use trajectory::{read_trajectory, write_trajectory, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Byte(u64),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(n) => write!(f, "line {n}"),
            Location::Byte(n) => write!(f, "byte offset {n}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {location}: {message}")]
    Parse { location: Location, message: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("cannot encode: {0}")]
    Encode(String),
}

impl FormatError {
    pub(crate) fn at_line(line: usize, message: impl Into<String>) -> Self {
        FormatError::Parse {
            location: Location::Line(line),
            message: message.into(),
        }
    }

    pub(crate) fn at_byte(offset: u64, message: impl Into<String>) -> Self {
        FormatError::Parse {
            location: Location::Byte(offset),
            message: message.into(),
        }
    }

    pub fn location(&self) -> Option<Location> {
        match self {
            FormatError::Parse { location, .. } => Some(*location),
            _ => None,
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    std::fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String, FormatError> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|e| {
        let offset = e.utf8_error().valid_up_to() as u64;
        FormatError::at_byte(offset, "file is not valid UTF-8")
    })
}

/// Lines with `#` comments and surrounding whitespace removed, paired with
/// their 1-based line number. Blank lines are skipped.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = match line.find('#') {
            Some(k) => &line[..k],
            None => line,
        }
        .trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

pub(crate) fn parse_f64(token: &str, line: usize) -> Result<f64, FormatError> {
    match token.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        Ok(_) => Err(FormatError::at_line(line, format!("non-finite number `{token}`"))),
        Err(_) => Err(FormatError::at_line(line, format!("expected a number, found `{token}`"))),
    }
}

/// Sixteen row-major entries as a rigid transform. The bottom row must be
/// `0 0 0 1` and the rotation orthonormal within `1e-6`; small deviations
/// above `1e-9` are projected back onto SO(3).
pub(crate) fn parse_pose(values: &[f64], line: usize) -> Result<recon3d_core::RigidTransform, FormatError> {
    const TOL: f64 = 1e-6;
    let m: [f64; 16] = values
        .try_into()
        .map_err(|_| FormatError::at_line(line, format!("expected 16 matrix entries, found {}", values.len())))?;
    let bottom = [m[12], m[13], m[14], m[15] - 1.0];
    if bottom.iter().any(|x| x.abs() > TOL) {
        return Err(FormatError::at_line(line, "bottom row of the pose must be 0 0 0 1"));
    }
    let pose = recon3d_core::RigidTransform::from_row_major_unchecked(&m);
    match pose.check(TOL) {
        Ok(()) if pose.orthonormality_error() > recon3d_core::geom::VALIDITY_TOL => Ok(pose.reorthonormalized()),
        Ok(()) => Ok(pose),
        Err(e) => Err(FormatError::at_line(line, format!("invalid pose: {e}"))),
    }
}

/// Shortest decimal text that parses back to exactly `x`.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x}")
}
