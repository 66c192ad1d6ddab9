//! Pose lists, one `<id> <16 row-major entries>` line per pose.

use std::fmt::Write as _;
use std::path::Path;

use recon3d_core::RigidTransform;

use super::{content_lines, fmt_f64, parse_f64, parse_pose, read_text, write_file, FormatError};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub entries: Vec<(u64, RigidTransform)>,
}

impl Trajectory {
    /// Poses numbered from zero.
    pub fn from_poses(poses: &[RigidTransform]) -> Self {
        Self {
            entries: poses.iter().enumerate().map(|(i, p)| (i as u64, *p)).collect(),
        }
    }

    pub fn poses(&self) -> Vec<RigidTransform> {
        self.entries.iter().map(|(_, p)| *p).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, pose) in &self.entries {
            write!(out, "{id}").unwrap();
            for x in pose.to_row_major() {
                write!(out, " {}", fmt_f64(x)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut entries = Vec::new();
        for (line, content) in content_lines(text) {
            let mut tokens = content.split_whitespace();
            let id_token = tokens.next().expect("content lines are non-empty");
            let id = id_token
                .parse::<u64>()
                .map_err(|_| FormatError::at_line(line, format!("expected a frame id, found `{id_token}`")))?;
            let values = tokens.map(|t| parse_f64(t, line)).collect::<Result<Vec<_>, _>>()?;
            entries.push((id, parse_pose(&values, line)?));
        }
        Ok(Self { entries })
    }
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, FormatError> {
    Trajectory::parse(&read_text(path)?)
}

pub fn write_trajectory(path: &Path, trajectory: &Trajectory) -> Result<(), FormatError> {
    write_file(path, trajectory.to_text().as_bytes())
}
