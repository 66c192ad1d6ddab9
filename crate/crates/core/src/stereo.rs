//! Dense disparity from a rectified stereo pair by SAD block matching, and
//! triangulation of disparity into metric depth.

use alloc::vec::Vec;

use crate::par;
use crate::raster::{DepthMap, DisparityMap, GrayImage};

pub const DEFAULT_UNIQUENESS_RATIO: f64 = 0.9;

/// Windows whose intensity variance is below this are treated as textureless.
pub const TEXTURE_VARIANCE_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StereoError {
    #[error("dimension mismatch: left image is {left_width}x{left_height}, right image is {right_width}x{right_height}")]
    DimensionMismatch {
        left_width: usize,
        left_height: usize,
        right_width: usize,
        right_height: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Ideal rectified rig: identical pinhole cameras separated along x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoRig {
    pub focal_px: f64,
    pub baseline_m: f64,
    pub cx: f64,
    pub cy: f64,
}

impl StereoRig {
    pub fn new(focal_px: f64, baseline_m: f64, cx: f64, cy: f64) -> Result<Self, StereoError> {
        if !(focal_px > 0.0 && focal_px.is_finite()) {
            return Err(StereoError::InvalidParameter("focal length must be positive"));
        }
        if !(baseline_m > 0.0 && baseline_m.is_finite()) {
            return Err(StereoError::InvalidParameter("baseline must be positive"));
        }
        Ok(Self {
            focal_px,
            baseline_m,
            cx,
            cy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMatchParams {
    pub block_radius: usize,
    pub max_disparity: usize,
    /// A match is rejected when `best >= uniqueness_ratio * second_best`,
    /// with the runner-up taken more than one pixel away from the winner.
    pub uniqueness_ratio: f64,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        Self {
            block_radius: 4,
            max_disparity: 64,
            uniqueness_ratio: DEFAULT_UNIQUENESS_RATIO,
        }
    }
}

/// Integer disparity per left-image pixel.
///
/// A pixel is matched only when its left window and every right window
/// `(u - d)` for `d` in `0..=max_disparity` lie inside the image. Costs are
/// sums of absolute differences; ties resolve to the smaller disparity.
/// Textureless windows and ambiguous matches are invalid (NaN).
pub fn compute_disparity(left: &GrayImage, right: &GrayImage, params: &BlockMatchParams) -> Result<DisparityMap, StereoError> {
    if left.width() != right.width() || left.height() != right.height() {
        return Err(StereoError::DimensionMismatch {
            left_width: left.width(),
            left_height: left.height(),
            right_width: right.width(),
            right_height: right.height(),
        });
    }
    let (w, h) = (left.width(), left.height());
    let r = params.block_radius;
    let max_d = params.max_disparity;
    if !(1..=15).contains(&r) {
        return Err(StereoError::InvalidParameter("block radius must be in 1..=15"));
    }
    if max_d < 1 || 2 * max_d >= w {
        return Err(StereoError::InvalidParameter("max disparity must be in 1..width/2"));
    }
    if !(params.uniqueness_ratio > 0.0 && params.uniqueness_ratio <= 1.0) {
        return Err(StereoError::InvalidParameter("uniqueness ratio must be in (0, 1]"));
    }

    let rows: Vec<Vec<f64>> = par::map_range(h, |v| match_row(left, right, v, r, max_d, params.uniqueness_ratio));
    let data = rows.into_iter().flatten().collect();
    Ok(DisparityMap::new(w, h, data).expect("row lengths match image width"))
}

fn match_row(left: &GrayImage, right: &GrayImage, v: usize, r: usize, max_d: usize, ratio: f64) -> Vec<f64> {
    let w = left.width();
    let mut out = alloc::vec![f64::NAN; w];
    if v < r || v + r >= left.height() || w < 2 * r + max_d + 1 {
        return out;
    }
    let side = 2 * r + 1;
    let area = (side * side) as f64;

    // column_sad[d][x] = sum over the window rows of |L(x, y) - R(x - d, y)|
    let column_sad: Vec<Vec<f64>> = (0..=max_d)
        .map(|d| {
            let mut col = alloc::vec![f64::NAN; w];
            for (x, c) in col.iter_mut().enumerate().skip(d) {
                let mut s = 0.0;
                for y in (v - r)..=(v + r) {
                    s += crate::math::abs(left.get(x, y) - right.get(x - d, y));
                }
                *c = s;
            }
            col
        })
        .collect();
    let mut costs = alloc::vec![0.0f64; max_d + 1];

    for u in (r + max_d)..(w - r) {
        // texture check on the left window
        let (mut sum, mut sum2) = (0.0, 0.0);
        for y in (v - r)..=(v + r) {
            for x in (u - r)..=(u + r) {
                let i = left.get(x, y);
                sum += i;
                sum2 += i * i;
            }
        }
        let mean = sum / area;
        let variance = sum2 / area - mean * mean;
        if variance < TEXTURE_VARIANCE_MIN {
            continue;
        }

        for (cost, col) in costs.iter_mut().zip(&column_sad) {
            *cost = col[u - r..=u + r].iter().sum();
        }

        let mut best_d = 0;
        for d in 1..=max_d {
            if costs[d] < costs[best_d] {
                best_d = d;
            }
        }
        let runner_up = costs
            .iter()
            .enumerate()
            .filter(|(d, _)| d.abs_diff(best_d) > 1)
            .map(|(_, c)| *c)
            .fold(f64::INFINITY, f64::min);
        if costs[best_d] >= ratio * runner_up {
            continue;
        }
        out[u] = best_d as f64;
    }
    out
}

/// `Z = focal_px * baseline_m / d` for valid disparities `d >= min_disparity_px`.
pub fn disparity_to_depth(disp: &DisparityMap, rig: &StereoRig, min_disparity_px: f64) -> Result<DepthMap, StereoError> {
    if !(min_disparity_px > 0.0) {
        return Err(StereoError::InvalidParameter("minimum disparity must be positive"));
    }
    let fb = rig.focal_px * rig.baseline_m;
    let data = disp
        .data()
        .iter()
        .map(|&d| {
            if d.is_nan() || d < min_disparity_px {
                f64::NAN
            } else {
                let z = fb / d;
                if z.is_finite() {
                    z
                } else {
                    f64::NAN
                }
            }
        })
        .collect();
    Ok(DepthMap::new(disp.width(), disp.height(), data).expect("depth values are positive by construction"))
}

/// Block-mean decimation by an integer factor that divides both dimensions.
pub fn downsample_image(img: &GrayImage, factor: usize) -> Result<GrayImage, StereoError> {
    if factor == 0 || !img.width().is_multiple_of(factor) || !img.height().is_multiple_of(factor) {
        return Err(StereoError::InvalidParameter("factor must divide both image dimensions"));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width() / factor, img.height() / factor);
    let norm = (factor * factor) as f64;
    GrayImage::from_fn(w, h, |u, v| {
        let mut sum = 0.0;
        for y in v * factor..(v + 1) * factor {
            for x in u * factor..(u + 1) * factor {
                sum += img.get(x, y);
            }
        }
        // clamp guards against rounding just above 1
        (sum / norm).clamp(0.0, 1.0)
    })
    .map_err(|_| StereoError::InvalidParameter("image samples out of range"))
}
