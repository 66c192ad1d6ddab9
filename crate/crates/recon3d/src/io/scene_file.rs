//! Scene descriptions for the synthetic generator.
//!
//! ```text
//! # settings
//! density = 1500          # samples per square meter (default 1000)
//! seed = 7                # default 0
//! # primitives, key=value fields; rotation is an axis-angle vector in radians
//! plane  center=0,0,0 rotation=0,0,0 size=4,4
//! sphere center=0.2,0.7,0.4 radius=0.4
//! box    center=0.6,-0.5,0.35 rotation=0,0,0.35 half_extents=0.35,0.25,0.35
//! room                    # the standard room
//! ```
//!
//! Omitted `center` and `rotation` default to zero.

use std::collections::BTreeMap;
use std::path::Path;

use recon3d_core::math::Vec3;
use recon3d_core::synth::{standard_room, Primitive, SceneSpec};
use recon3d_core::{RigidTransform, Twist};

use super::{content_lines, parse_f64, read_text, FormatError};

pub const DEFAULT_DENSITY: f64 = 1000.0;

pub fn read_scene(path: &Path) -> Result<SceneSpec, FormatError> {
    parse_scene(&read_text(path)?)
}

fn fields<'a>(tokens: impl Iterator<Item = &'a str>, line: usize) -> Result<BTreeMap<&'a str, Vec<f64>>, FormatError> {
    let mut map = BTreeMap::new();
    for token in tokens {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| FormatError::at_line(line, format!("expected key=value, found `{token}`")))?;
        let values = value.split(',').map(|v| parse_f64(v, line)).collect::<Result<Vec<_>, _>>()?;
        if map.insert(key, values).is_some() {
            return Err(FormatError::at_line(line, format!("field `{key}` given twice")));
        }
    }
    Ok(map)
}

struct Fields<'a> {
    map: BTreeMap<&'a str, Vec<f64>>,
    line: usize,
}

impl Fields<'_> {
    fn take<const N: usize>(&mut self, key: &str, default: Option<[f64; N]>) -> Result<[f64; N], FormatError> {
        match self.map.remove(key) {
            Some(v) => v
                .try_into()
                .map_err(|v: Vec<f64>| FormatError::at_line(self.line, format!("`{key}` needs {N} values, found {}", v.len()))),
            None => default.ok_or_else(|| FormatError::at_line(self.line, format!("missing field `{key}`"))),
        }
    }

    fn positive<const N: usize>(&mut self, key: &str) -> Result<[f64; N], FormatError> {
        let v = self.take::<N>(key, None)?;
        if v.iter().any(|&x| x <= 0.0) {
            return Err(FormatError::at_line(self.line, format!("`{key}` must be positive")));
        }
        Ok(v)
    }

    fn pose(&mut self) -> Result<RigidTransform, FormatError> {
        let c = self.take("center", Some([0.0; 3]))?;
        let r = self.take("rotation", Some([0.0; 3]))?;
        let omega = Vec3::from(r);
        if omega.norm() >= std::f64::consts::PI {
            return Err(FormatError::at_line(self.line, "rotation angle must be below pi"));
        }
        let rot = RigidTransform::exp(&Twist::new(omega, Vec3::zeros()));
        Ok(RigidTransform::from_parts_unchecked(*rot.rotation(), Vec3::from(c)))
    }

    fn finish(self) -> Result<(), FormatError> {
        match self.map.keys().next() {
            Some(key) => Err(FormatError::at_line(self.line, format!("unknown field `{key}`"))),
            None => Ok(()),
        }
    }
}

pub fn parse_scene(text: &str) -> Result<SceneSpec, FormatError> {
    let mut density = None;
    let mut seed = None;
    let mut primitives = Vec::new();
    // the room expands only once density and seed are final
    let mut room_at = Vec::new();
    for (line, content) in content_lines(text) {
        let kind = content.split_whitespace().next().expect("content lines are non-empty");
        let is_primitive = matches!(kind, "plane" | "sphere" | "box" | "room");
        if let (false, Some((key, value))) = (is_primitive, content.split_once('=')) {
            let (key, value) = (key.trim(), value.trim());
            match key {
                "density" => {
                    let d = parse_f64(value, line)?;
                    if d <= 0.0 {
                        return Err(FormatError::at_line(line, "density must be positive"));
                    }
                    density = Some(d);
                }
                "seed" => {
                    seed = Some(
                        value
                            .parse::<u64>()
                            .map_err(|_| FormatError::at_line(line, format!("seed must be an unsigned integer, found `{value}`")))?,
                    );
                }
                _ => return Err(FormatError::at_line(line, format!("unknown setting `{key}`"))),
            }
            continue;
        }
        let tokens = content.split_whitespace().skip(1);
        let mut f = Fields {
            map: fields(tokens, line)?,
            line,
        };
        let primitive = match kind {
            "plane" => {
                let pose = f.pose()?;
                Primitive::Plane {
                    pose,
                    size: f.positive("size")?,
                }
            }
            "sphere" => {
                let center = Vec3::from(f.take("center", Some([0.0; 3]))?);
                let [radius] = f.positive("radius")?;
                Primitive::Sphere { center, radius }
            }
            "box" => {
                let pose = f.pose()?;
                Primitive::Cuboid {
                    pose,
                    half_extents: Vec3::from(f.positive::<3>("half_extents")?),
                }
            }
            "room" => {
                f.finish()?;
                room_at.push(primitives.len());
                continue;
            }
            other => return Err(FormatError::at_line(line, format!("unknown primitive `{other}`"))),
        };
        f.finish()?;
        primitives.push(primitive);
    }
    let density = density.unwrap_or(DEFAULT_DENSITY);
    let seed = seed.unwrap_or(0);
    let room = standard_room(density, seed).primitives;
    for &at in room_at.iter().rev() {
        primitives.splice(at..at, room.iter().cloned());
    }
    if primitives.is_empty() {
        return Err(FormatError::at_line(text.lines().count().max(1), "scene has no primitives"));
    }
    Ok(SceneSpec {
        primitives,
        density,
        seed,
    })
}
