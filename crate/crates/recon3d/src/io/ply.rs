//! PLY 1.0 point clouds.
//!
//! The writer emits one `vertex` element with float32 `x y z`, optional
//! float32 `nx ny nz` and optional uchar `red green blue`. The reader accepts
//! ascii and binary_little_endian files, skips unknown properties and
//! elements, and takes colors from uchar (scaled by 1/255) or float channels.

use std::fmt::Write as _;
use std::path::Path;

use recon3d_core::math::Vec3;
use recon3d_core::PointCloud;

use super::{read_file, write_file, FormatError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

pub fn write_ply(cloud: &PointCloud, path: &Path, encoding: PlyEncoding) -> Result<(), FormatError> {
    write_file(path, &encode_ply(cloud, encoding))
}

pub fn read_ply(path: &Path) -> Result<PointCloud, FormatError> {
    decode_ply(&read_file(path)?)
}

fn quantize_color(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ply(cloud: &PointCloud, encoding: PlyEncoding) -> Vec<u8> {
    let normals = cloud.normals();
    let colors = cloud.colors();
    let mut header = String::from("ply\n");
    header.push_str(match encoding {
        PlyEncoding::Ascii => "format ascii 1.0\n",
        PlyEncoding::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    writeln!(header, "element vertex {}", cloud.len()).unwrap();
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if normals.is_some() {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    if colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    for (i, p) in cloud.positions().iter().enumerate() {
        let mut floats = vec![p.x as f32, p.y as f32, p.z as f32];
        if let Some(n) = normals {
            floats.extend([n[i].x as f32, n[i].y as f32, n[i].z as f32]);
        }
        let rgb = colors.map(|c| c[i].map(quantize_color));
        match encoding {
            PlyEncoding::Ascii => {
                let mut line = floats.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
                if let Some(rgb) = rgb {
                    write!(line, " {} {} {}", rgb[0], rgb[1], rgb[2]).unwrap();
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyEncoding::BinaryLittleEndian => {
                for x in floats {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                if let Some(rgb) = rgb {
                    out.extend_from_slice(&rgb);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn parse_ascii(self, token: &str) -> Option<f64> {
        match self {
            Scalar::F32 => token.parse::<f32>().ok().map(f64::from),
            Scalar::F64 => token.parse::<f64>().ok(),
            Scalar::I8 => token.parse::<i8>().ok().map(f64::from),
            Scalar::U8 => token.parse::<u8>().ok().map(f64::from),
            Scalar::I16 => token.parse::<i16>().ok().map(f64::from),
            Scalar::U16 => token.parse::<u16>().ok().map(f64::from),
            Scalar::I32 => token.parse::<i32>().ok().map(f64::from),
            Scalar::U32 => token.parse::<u32>().ok().map(f64::from),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    // byte offset of the body
    body: usize,
    // number of header lines, for ascii body line numbers
    lines: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, FormatError> {
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut next_line = || -> Option<(usize, String)> {
        let rest = &bytes[offset..];
        let end = rest.iter().position(|&b| b == b'\n')?;
        let line = String::from_utf8_lossy(&rest[..end]).trim_end_matches('\r').to_string();
        offset += end + 1;
        line_no += 1;
        Some((line_no, line))
    };
    let missing_end = || FormatError::at_byte(bytes.len() as u64, "header is not terminated by end_header");

    match next_line() {
        Some((_, l)) if l == "ply" => {}
        _ => return Err(FormatError::at_line(1, "missing `ply` magic line")),
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (line, text) = next_line().ok_or_else(missing_end)?;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", kind, version] => {
                if *version != "1.0" {
                    return Err(FormatError::UnsupportedFormat(format!("PLY version {version}")));
                }
                format = Some(match *kind {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    "binary_big_endian" => {
                        return Err(FormatError::UnsupportedFormat("big-endian PLY".into()));
                    }
                    other => return Err(FormatError::at_line(line, format!("unknown PLY format `{other}`"))),
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| FormatError::at_line(line, format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count, item, _name] => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| FormatError::at_line(line, "property before any element"))?;
                let (count, item) = match (Scalar::parse(count), Scalar::parse(item)) {
                    (Some(c), Some(i)) if !c.is_float() => (c, i),
                    _ => return Err(FormatError::at_line(line, "bad list property types")),
                };
                element.properties.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| FormatError::at_line(line, "property before any element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| FormatError::at_line(line, format!("unknown property type `{ty}`")))?;
                element.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            ["end_header"] => break,
            _ => return Err(FormatError::at_line(line, format!("unrecognized header line `{text}`"))),
        }
    }
    let format = format.ok_or_else(|| FormatError::at_line(line_no, "header has no format line"))?;
    Ok(Header {
        format,
        elements,
        body: offset,
        lines: line_no,
    })
}

// Column of each recognised vertex attribute among the scalar properties.
#[derive(Default)]
struct VertexLayout {
    position: [Option<usize>; 3],
    normal: [Option<usize>; 3],
    color: [Option<(usize, Scalar)>; 3],
}

impl VertexLayout {
    fn new(element: &Element) -> Result<Self, FormatError> {
        let mut layout = VertexLayout::default();
        for (k, p) in element.properties.iter().enumerate() {
            let Property::Scalar { name, ty } = p else { continue };
            match name.as_str() {
                "x" => layout.position[0] = Some(k),
                "y" => layout.position[1] = Some(k),
                "z" => layout.position[2] = Some(k),
                "nx" => layout.normal[0] = Some(k),
                "ny" => layout.normal[1] = Some(k),
                "nz" => layout.normal[2] = Some(k),
                "red" | "r" => layout.color[0] = Some((k, *ty)),
                "green" | "g" => layout.color[1] = Some((k, *ty)),
                "blue" | "b" => layout.color[2] = Some((k, *ty)),
                _ => {}
            }
        }
        if layout.position.iter().any(Option::is_none) {
            return Err(FormatError::UnsupportedFormat("vertex element lacks x, y or z".into()));
        }
        for (k, ty) in layout.color.iter().flatten() {
            if !matches!(ty, Scalar::U8 | Scalar::F32 | Scalar::F64) {
                return Err(FormatError::UnsupportedFormat(format!("color property {k} must be uchar or float")));
            }
        }
        Ok(layout)
    }

    fn has_normals(&self) -> bool {
        self.normal.iter().all(Option::is_some)
    }

    fn has_colors(&self) -> bool {
        self.color.iter().all(Option::is_some)
    }
}

#[derive(Default)]
struct Collected {
    positions: Vec<Vec3>,
    normals: Vec<Vec3>,
    colors: Vec<[f64; 3]>,
}

impl Collected {
    // `values` holds the scalar properties of one vertex, indexed by property.
    fn push(&mut self, layout: &VertexLayout, values: &[f64], fail: impl Fn(&str) -> FormatError) -> Result<(), FormatError> {
        let get = |k: Option<usize>| values[k.expect("checked by layout")];
        let p = Vec3::new(get(layout.position[0]), get(layout.position[1]), get(layout.position[2]));
        if !p.iter().all(|x| x.is_finite()) {
            return Err(fail("non-finite vertex position"));
        }
        self.positions.push(p);
        if layout.has_normals() {
            let n = Vec3::new(get(layout.normal[0]), get(layout.normal[1]), get(layout.normal[2]));
            let len = n.norm();
            if !(len.is_finite() && len > 0.0) {
                return Err(fail("vertex normal is zero or non-finite"));
            }
            // stored normals are float32; only rescale those that are clearly off
            self.normals.push(if (len - 1.0).abs() > 1e-6 { n / len } else { n });
        }
        if layout.has_colors() {
            let mut c = [0.0; 3];
            for (slot, (k, ty)) in c.iter_mut().zip(layout.color.iter().flatten()) {
                *slot = if *ty == Scalar::U8 { values[*k] / 255.0 } else { values[*k] };
            }
            self.colors.push(c);
        }
        Ok(())
    }

    fn finish(self) -> PointCloud {
        let Collected {
            positions,
            normals,
            colors,
        } = self;
        let n = positions.len();
        let mut cloud = PointCloud::new(positions);
        if normals.len() == n && n > 0 {
            cloud = cloud.with_normals(normals).expect("normals validated while reading");
        }
        if colors.len() == n && n > 0 {
            cloud = cloud.with_colors(colors).expect("one color per vertex");
        }
        cloud
    }
}

pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud, FormatError> {
    let header = parse_header(bytes)?;
    let vertex = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| FormatError::UnsupportedFormat("no vertex element".into()))?;
    let layout = VertexLayout::new(&header.elements[vertex])?;
    match header.format {
        Format::Ascii => decode_ascii(bytes, &header, vertex, &layout),
        Format::BinaryLe => decode_binary(bytes, &header, vertex, &layout),
    }
}

fn decode_ascii(bytes: &[u8], header: &Header, vertex: usize, layout: &VertexLayout) -> Result<PointCloud, FormatError> {
    let body = std::str::from_utf8(&bytes[header.body..]).map_err(|e| {
        FormatError::at_byte((header.body + e.valid_up_to()) as u64, "ascii body is not valid UTF-8")
    })?;
    let mut lines = body.lines().enumerate().map(|(i, l)| (header.lines + 1 + i, l));
    let mut out = Collected::default();
    let mut values = Vec::new();
    for (e, element) in header.elements.iter().enumerate() {
        for _ in 0..element.count {
            let (line, text) = lines.next().ok_or_else(|| {
                FormatError::at_line(header.lines + body.lines().count() + 1, format!("body ends before all `{}` records", element.name))
            })?;
            let mut tokens = text.split_whitespace();
            values.clear();
            for p in &element.properties {
                let mut take = |ty: Scalar| -> Result<f64, FormatError> {
                    let token = tokens.next().ok_or_else(|| FormatError::at_line(line, "too few values"))?;
                    ty.parse_ascii(token)
                        .ok_or_else(|| FormatError::at_line(line, format!("`{token}` is not a valid value")))
                };
                match p {
                    Property::Scalar { ty, .. } => values.push(take(*ty)?),
                    Property::List { count, item } => {
                        let n = take(*count)?;
                        if n < 0.0 {
                            return Err(FormatError::at_line(line, "negative list length"));
                        }
                        for _ in 0..n as usize {
                            take(*item)?;
                        }
                        values.push(f64::NAN);
                    }
                }
            }
            if tokens.next().is_some() {
                return Err(FormatError::at_line(line, "too many values"));
            }
            if e == vertex {
                out.push(layout, &values, |m| FormatError::at_line(line, m))?;
            }
        }
    }
    Ok(out.finish())
}

fn decode_binary(bytes: &[u8], header: &Header, vertex: usize, layout: &VertexLayout) -> Result<PointCloud, FormatError> {
    let mut pos = header.body;
    let mut out = Collected::default();
    let mut values = Vec::new();
    let take = |pos: &mut usize, ty: Scalar, record: usize| -> Result<f64, FormatError> {
        let end = *pos + ty.size();
        if end > bytes.len() {
            return Err(FormatError::at_byte(record as u64, "body truncated inside a record"));
        }
        let v = ty.decode_le(&bytes[*pos..end]);
        *pos = end;
        Ok(v)
    };
    for (e, element) in header.elements.iter().enumerate() {
        if element.properties.is_empty() {
            // records are empty; do not spin on a huge declared count
            continue;
        }
        for _ in 0..element.count {
            let record = pos;
            values.clear();
            for p in &element.properties {
                match p {
                    Property::Scalar { ty, .. } => values.push(take(&mut pos, *ty, record)?),
                    Property::List { count, item } => {
                        let n = take(&mut pos, *count, record)?;
                        if n < 0.0 {
                            return Err(FormatError::at_byte(record as u64, "negative list length"));
                        }
                        let skip = n as usize * item.size();
                        if pos + skip > bytes.len() {
                            return Err(FormatError::at_byte(record as u64, "body truncated inside a record"));
                        }
                        pos += skip;
                        values.push(f64::NAN);
                    }
                }
            }
            if e == vertex {
                out.push(layout, &values, |m| FormatError::at_byte(record as u64, m))?;
            }
        }
    }
    Ok(out.finish())
}
