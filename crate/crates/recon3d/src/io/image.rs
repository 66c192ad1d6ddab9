//! Raster files: binary PGM (P5) and PPM (P6) with 8 or 16-bit samples, and
//! PNG (8/16-bit gray, 8-bit RGB).
//!
//! Depth images store `round(z * scale)` as 16-bit integers with 0 meaning
//! invalid; `scale` is typically 1000 (millimeters).

use std::cell::Cell;
use std::io::{BufRead, Cursor, Read, Seek, SeekFrom};
use std::path::Path;
use std::rc::Rc;

use recon3d_core::{DepthMap, DisparityMap, GrayImage, RgbImage};

use super::{read_file, write_file, FormatError};

pub const DEFAULT_DEPTH_SCALE: f64 = 1000.0;

/// Decoded integer samples, interleaved by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub max_value: u16,
    pub samples: Vec<u16>,
}

impl Raster {
    fn normalized(&self) -> impl Iterator<Item = f64> + '_ {
        let m = self.max_value as f64;
        self.samples.iter().map(move |&s| (s as f64 / m).min(1.0))
    }
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster, FormatError> {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => decode_png(bytes),
        [b'P', b'5', ..] => decode_pnm(bytes, 1),
        [b'P', b'6', ..] => decode_pnm(bytes, 3),
        _ => Err(FormatError::UnsupportedFormat("expected a PNG, binary PGM (P5) or PPM (P6) image".into())),
    }
}

pub fn read_raster(path: &Path) -> Result<Raster, FormatError> {
    decode_raster(&read_file(path)?)
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<Raster, FormatError> {
    let mut pos = 2usize;
    let mut field = |name: &str| -> Result<u64, FormatError> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FormatError::at_byte(start as u64, format!("expected {name}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let max_value = field("maximum value")?;
    if width == 0 || height == 0 {
        return Err(FormatError::at_byte(0, "image has zero size"));
    }
    if !(1..=65535).contains(&max_value) {
        return Err(FormatError::at_byte(0, format!("maximum value {max_value} outside 1..=65535")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(FormatError::at_byte(pos as u64, "header must end with one whitespace byte"));
    }
    pos += 1;
    let bytes_per_sample = if max_value > 255 { 2 } else { 1 };
    let count = (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| FormatError::at_byte(0, "image dimensions overflow"))?;
    let body = &bytes[pos..];
    if body.len() < count * bytes_per_sample {
        return Err(FormatError::at_byte(bytes.len() as u64, format!("pixel data truncated, {} of {} bytes", body.len(), count * bytes_per_sample)));
    }
    let samples: Vec<u16> = if bytes_per_sample == 1 {
        body[..count].iter().map(|&b| b as u16).collect()
    } else {
        body[..2 * count].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    if let Some(k) = samples.iter().position(|&s| s as u64 > max_value) {
        return Err(FormatError::at_byte((pos + k * bytes_per_sample) as u64, "sample exceeds the declared maximum"));
    }
    Ok(Raster {
        width: width as usize,
        height: height as usize,
        channels,
        max_value: max_value as u16,
        samples,
    })
}

// Cursor that publishes how far the decoder has consumed, so failures can
// be located.
struct Tracked<'a> {
    inner: Cursor<&'a [u8]>,
    consumed: Rc<Cell<u64>>,
}

impl Read for Tracked<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.consumed.set(self.inner.position());
        Ok(n)
    }
}

impl BufRead for Tracked<'_> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        self.inner.consume(amt);
        self.consumed.set(self.inner.position());
    }
}

impl Seek for Tracked<'_> {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        let p = self.inner.seek(pos)?;
        self.consumed.set(p);
        Ok(p)
    }
}

fn decode_png(bytes: &[u8]) -> Result<Raster, FormatError> {
    let consumed = Rc::new(Cell::new(0));
    let fail = |e: png::DecodingError| FormatError::at_byte(consumed.get(), format!("invalid PNG: {e}"));
    let mut decoder = png::Decoder::new(Tracked {
        inner: Cursor::new(bytes),
        consumed: consumed.clone(),
    });
    // palettes become RGB and sub-byte gray becomes 8-bit
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| FormatError::UnsupportedFormat("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(FormatError::UnsupportedFormat(format!("PNG color type {other:?}"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let row = width * channels;
    let mut samples = Vec::with_capacity(row * height);
    let max_value = match info.bit_depth {
        png::BitDepth::Eight => {
            for line in buf.chunks(info.line_size).take(height) {
                samples.extend(line[..row].iter().map(|&b| b as u16));
            }
            255
        }
        png::BitDepth::Sixteen => {
            for line in buf.chunks(info.line_size).take(height) {
                samples.extend(line[..2 * row].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])));
            }
            65535
        }
        other => return Err(FormatError::UnsupportedFormat(format!("PNG bit depth {other:?}"))),
    };
    Ok(Raster {
        width,
        height,
        channels,
        max_value,
        samples,
    })
}

pub fn encode_png(raster: &Raster) -> Result<Vec<u8>, FormatError> {
    let color = match raster.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(FormatError::Encode(format!("{c} channels"))),
    };
    let sixteen = raster.max_value > 255;
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, raster.width as u32, raster.height as u32);
        encoder.set_color(color);
        encoder.set_depth(if sixteen { png::BitDepth::Sixteen } else { png::BitDepth::Eight });
        let mut writer = encoder.write_header().map_err(|e| FormatError::Encode(e.to_string()))?;
        let data: Vec<u8> = if sixteen {
            raster.samples.iter().flat_map(|s| s.to_be_bytes()).collect()
        } else {
            raster.samples.iter().map(|&s| s as u8).collect()
        };
        writer.write_image_data(&data).map_err(|e| FormatError::Encode(e.to_string()))?;
        writer.finish().map_err(|e| FormatError::Encode(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_pnm(raster: &Raster) -> Result<Vec<u8>, FormatError> {
    let magic = match raster.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(FormatError::Encode(format!("{c} channels"))),
    };
    let mut out = format!("{magic}\n{} {}\n{}\n", raster.width, raster.height, raster.max_value).into_bytes();
    if raster.max_value > 255 {
        out.extend(raster.samples.iter().flat_map(|s| s.to_be_bytes()));
    } else {
        out.extend(raster.samples.iter().map(|&s| s as u8));
    }
    Ok(out)
}

/// Writes PGM/PPM for `.pgm`/`.ppm` paths and PNG otherwise.
pub fn write_raster(path: &Path, raster: &Raster) -> Result<(), FormatError> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("pgm") | Some("ppm") => encode_pnm(raster)?,
        _ => encode_png(raster)?,
    };
    write_file(path, &bytes)
}

fn quantize(x: f64, max: u16) -> u16 {
    (x.clamp(0.0, 1.0) * max as f64).round() as u16
}

pub fn gray_from_raster(r: &Raster) -> Result<GrayImage, FormatError> {
    if r.channels != 1 {
        return Err(FormatError::UnsupportedFormat("expected a single-channel image".into()));
    }
    Ok(GrayImage::new(r.width, r.height, r.normalized().collect()).expect("normalized samples lie in [0, 1]"))
}

pub fn read_gray(path: &Path) -> Result<GrayImage, FormatError> {
    gray_from_raster(&read_raster(path)?)
}

/// 8-bit grayscale.
pub fn write_gray(path: &Path, img: &GrayImage) -> Result<(), FormatError> {
    write_raster(
        path,
        &Raster {
            width: img.width(),
            height: img.height(),
            channels: 1,
            max_value: 255,
            samples: img.data().iter().map(|&x| quantize(x, 255)).collect(),
        },
    )
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, FormatError> {
    let r = read_raster(path)?;
    if r.channels != 3 {
        return Err(FormatError::UnsupportedFormat("expected an RGB image".into()));
    }
    let values: Vec<f64> = r.normalized().collect();
    let pixels = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(RgbImage::new(r.width, r.height, pixels).expect("one pixel per sample triple"))
}

pub fn depth_from_raster(r: &Raster, scale: f64) -> Result<DepthMap, FormatError> {
    if r.channels != 1 {
        return Err(FormatError::UnsupportedFormat("depth images must have one channel".into()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(FormatError::Encode(format!("depth scale {scale} must be positive")));
    }
    let data = r
        .samples
        .iter()
        .map(|&s| if s == 0 { f64::NAN } else { s as f64 / scale })
        .collect();
    Ok(DepthMap::new(r.width, r.height, data).expect("positive depths"))
}

pub fn read_depth(path: &Path, scale: f64) -> Result<DepthMap, FormatError> {
    depth_from_raster(&read_raster(path)?, scale)
}

/// 16-bit depth. Fails if a valid depth does not fit in `1..=65535` units.
pub fn depth_to_raster(depth: &DepthMap, scale: f64) -> Result<Raster, FormatError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(FormatError::Encode(format!("depth scale {scale} must be positive")));
    }
    let samples = depth
        .data()
        .iter()
        .map(|&z| {
            if z.is_nan() {
                return Ok(0);
            }
            let q = (z * scale).round();
            if (1.0..=65535.0).contains(&q) {
                Ok(q as u16)
            } else {
                Err(FormatError::Encode(format!("depth {z} m is not representable at scale {scale}")))
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(Raster {
        width: depth.width(),
        height: depth.height(),
        channels: 1,
        max_value: 65535,
        samples,
    })
}

pub fn write_depth(path: &Path, depth: &DepthMap, scale: f64) -> Result<(), FormatError> {
    write_raster(path, &depth_to_raster(depth, scale)?)
}

/// 8-bit visualization: valid disparities scaled so the largest maps to
/// 255, invalid pixels black.
pub fn disparity_visualization(disp: &DisparityMap) -> Raster {
    let max = disp.data().iter().filter(|d| !d.is_nan()).fold(0.0f64, |m, &d| m.max(d));
    let samples = disp
        .data()
        .iter()
        .map(|&d| if d.is_nan() || max <= 0.0 { 0 } else { quantize(d / max, 255) })
        .collect();
    Raster {
        width: disp.width(),
        height: disp.height(),
        channels: 1,
        max_value: 255,
        samples,
    }
}
