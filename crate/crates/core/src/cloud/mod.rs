//! Point clouds: construction from depth, spatial indexing, normals, voxel
//! decimation, and affine alignment of relative depth maps.

mod kdtree;
mod normals;

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

pub use kdtree::SpatialIndex;
pub use normals::{estimate_normals, DEFAULT_NORMAL_NEIGHBORS};

use crate::geom::RigidTransform;
use crate::math::{self, Vec3};
pub use crate::raster::DepthMap;
use crate::raster::RgbImage;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CloudError {
    #[error("dimension mismatch: expected {expected_width}x{expected_height}, got {width}x{height}")]
    DimensionMismatch {
        expected_width: usize,
        expected_height: usize,
        width: usize,
        height: usize,
    },
    #[error("attribute length {got} does not match point count {expected}")]
    AttributeLength { expected: usize, got: usize },
    #[error("normal {index} is not unit length")]
    NonUnitNormal { index: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("fewer than two pixels are valid in both depth maps")]
    InsufficientOverlap,
    #[error("relative depth is constant over the co-valid pixels")]
    DegenerateInput,
}

/// Pinhole camera model; pixel `(u, v)` has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, CloudError> {
        if !(fx > 0.0 && fx.is_finite() && fy > 0.0 && fy.is_finite()) {
            return Err(CloudError::InvalidParameter("focal lengths must be positive"));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(CloudError::InvalidParameter("principal point must lie inside the image"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z component.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Pixel coordinates of a camera-frame point (z must be positive).
    #[inline]
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Intrinsics of the image decimated by `factor`.
    pub fn scaled(&self, factor: usize) -> Result<Self, CloudError> {
        let f = factor as f64;
        Self::new(
            self.fx / f,
            self.fy / f,
            self.cx / f,
            self.cy / f,
            self.width / factor,
            self.height / factor,
        )
    }
}

/// Positions with optional unit normals and RGB colors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    colors: Option<Vec<[f64; 3]>>,
    // Points whose normal came from a degenerate neighborhood.
    unreliable: Option<Vec<bool>>,
}

const UNIT_TOL: f64 = 1e-6;

impl PointCloud {
    pub fn new(positions: Vec<Vec3>) -> Self {
        Self {
            positions,
            ..Default::default()
        }
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self, CloudError> {
        if normals.len() != self.positions.len() {
            return Err(CloudError::AttributeLength {
                expected: self.positions.len(),
                got: normals.len(),
            });
        }
        if let Some(index) = normals
            .iter()
            .position(|n| !(math::abs(math::norm(n) - 1.0) <= UNIT_TOL))
        {
            return Err(CloudError::NonUnitNormal { index });
        }
        self.normals = Some(normals);
        self.unreliable = None;
        Ok(self)
    }

    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> Result<Self, CloudError> {
        if colors.len() != self.positions.len() {
            return Err(CloudError::AttributeLength {
                expected: self.positions.len(),
                got: colors.len(),
            });
        }
        self.colors = Some(colors);
        Ok(self)
    }

    pub(crate) fn set_unreliable(&mut self, flags: Vec<bool>) {
        debug_assert_eq!(flags.len(), self.positions.len());
        self.unreliable = flags.iter().any(|&f| f).then_some(flags);
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self.unreliable = None;
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    /// False when point `i`'s normal was estimated from a degenerate (for
    /// example collinear) neighborhood.
    pub fn normal_is_reliable(&self, i: usize) -> bool {
        self.unreliable.as_ref().is_none_or(|f| !f[i])
    }

    /// Applies `t` to positions and rotates normals.
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            positions: self.positions.iter().map(|p| t.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.rotate(n)).collect()),
            colors: self.colors.clone(),
            unreliable: self.unreliable.clone(),
        }
    }

    /// Concatenates clouds. Normals and colors survive only when every input
    /// carries them.
    pub fn concat(clouds: &[PointCloud]) -> PointCloud {
        let positions = clouds.iter().flat_map(|c| c.positions.iter().copied()).collect();
        let normals = clouds
            .iter()
            .all(|c| c.normals.is_some())
            .then(|| clouds.iter().flat_map(|c| c.normals.as_ref().unwrap().iter().copied()).collect());
        let colors = clouds
            .iter()
            .all(|c| c.colors.is_some())
            .then(|| clouds.iter().flat_map(|c| c.colors.as_ref().unwrap().iter().copied()).collect());
        let mut out = PointCloud {
            positions,
            normals,
            colors,
            unreliable: None,
        };
        if out.normals.is_some() {
            let flags: Vec<bool> = clouds
                .iter()
                .flat_map(|c| (0..c.len()).map(move |i| !c.normal_is_reliable(i)))
                .collect();
            out.set_unreliable(flags);
        }
        out
    }
}

/// Lifts every valid depth pixel to a camera-frame point (+Z forward).
pub fn backproject(
    depth: &DepthMap,
    intr: &PinholeIntrinsics,
    color: Option<&RgbImage>,
) -> Result<PointCloud, CloudError> {
    let mismatch = |w: usize, h: usize| CloudError::DimensionMismatch {
        expected_width: intr.width,
        expected_height: intr.height,
        width: w,
        height: h,
    };
    if depth.width() != intr.width || depth.height() != intr.height {
        return Err(mismatch(depth.width(), depth.height()));
    }
    if let Some(c) = color {
        if c.width() != intr.width || c.height() != intr.height {
            return Err(mismatch(c.width(), c.height()));
        }
    }
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            if let Some(z) = depth.get(u, v) {
                let x = (u as f64 - intr.cx) * z / intr.fx;
                let y = (v as f64 - intr.cy) * z / intr.fy;
                positions.push(Vec3::new(x, y, z));
                if let Some(c) = color {
                    colors.push(c.get(u, v));
                }
            }
        }
    }
    let cloud = PointCloud::new(positions);
    match color {
        Some(_) => cloud.with_colors(colors),
        None => Ok(cloud),
    }
}

#[derive(Default)]
struct VoxelAccum {
    count: usize,
    position: Vec3,
    normal: Vec3,
    color: [f64; 3],
    unreliable: usize,
}

/// Replaces the points of each occupied voxel with their centroid. Output is
/// ordered by ascending voxel key `floor(p / voxel_size)`.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud, CloudError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(CloudError::InvalidParameter("voxel size must be positive"));
    }
    let mut voxels: BTreeMap<(i64, i64, i64), VoxelAccum> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let key = (
            math::floor(p.x / voxel_size) as i64,
            math::floor(p.y / voxel_size) as i64,
            math::floor(p.z / voxel_size) as i64,
        );
        let acc = voxels.entry(key).or_default();
        acc.count += 1;
        acc.position += p;
        if let Some(ns) = &cloud.normals {
            acc.normal += ns[i];
            if !cloud.normal_is_reliable(i) {
                acc.unreliable += 1;
            }
        }
        if let Some(cs) = &cloud.colors {
            for (a, c) in acc.color.iter_mut().zip(cs[i]) {
                *a += c;
            }
        }
    }

    let n = voxels.len();
    let mut positions = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut unreliable = Vec::with_capacity(n);
    for acc in voxels.values() {
        let w = acc.count as f64;
        positions.push(acc.position / w);
        if cloud.normals.is_some() {
            let len = math::norm(&acc.normal);
            // opposing normals can cancel; keep a unit vector and flag it
            if len > 1e-12 {
                normals.push(acc.normal / len);
                unreliable.push(acc.unreliable == acc.count);
            } else {
                normals.push(Vec3::z());
                unreliable.push(true);
            }
        }
        colors.push([acc.color[0] / w, acc.color[1] / w, acc.color[2] / w]);
    }
    let mut out = PointCloud::new(positions);
    if cloud.normals.is_some() {
        out.normals = Some(normals);
        out.set_unreliable(unreliable);
    }
    if cloud.colors.is_some() {
        out.colors = Some(colors);
    }
    Ok(out)
}

/// Result of fitting `reference ~= scale * relative + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleShift {
    pub scale: f64,
    pub shift: f64,
    /// `scale * relative + shift`, with non-positive results marked invalid.
    pub aligned: DepthMap,
}

/// Least-squares scale and shift mapping a relative depth map onto a metric
/// reference over the pixels valid in both.
pub fn align_scale_shift(relative: &DepthMap, reference: &DepthMap) -> Result<ScaleShift, CloudError> {
    if relative.width() != reference.width() || relative.height() != reference.height() {
        return Err(CloudError::DimensionMismatch {
            expected_width: reference.width(),
            expected_height: reference.height(),
            width: relative.width(),
            height: relative.height(),
        });
    }
    let pairs: Vec<(f64, f64)> = relative
        .data()
        .iter()
        .zip(reference.data())
        .filter(|(x, y)| !x.is_nan() && !y.is_nan())
        .map(|(&x, &y)| (x, y))
        .collect();
    if pairs.len() < 2 {
        return Err(CloudError::InsufficientOverlap);
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in &pairs {
        let dx = x - mean_x;
        sxx += dx * dx;
        sxy += dx * (y - mean_y);
    }
    let spread = pairs.iter().fold(0.0, |m, p| f64::max(m, math::abs(p.0 - mean_x)));
    if spread <= 1e-12 * math::abs(mean_x) || sxx == 0.0 {
        return Err(CloudError::DegenerateInput);
    }
    let scale = sxy / sxx;
    let shift = mean_y - scale * mean_x;
    let data = relative
        .data()
        .iter()
        .map(|&x| {
            let z = scale * x + shift;
            if x.is_nan() || !(z > 0.0 && z.is_finite()) {
                f64::NAN
            } else {
                z
            }
        })
        .collect();
    let aligned = DepthMap::new(relative.width(), relative.height(), data).expect("aligned depth is valid by construction");
    Ok(ScaleShift {
        scale,
        shift,
        aligned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr(fx: f64, cx: f64, cy: f64, w: usize, h: usize) -> PinholeIntrinsics {
        PinholeIntrinsics::new(fx, fx, cx, cy, w, h).unwrap()
    }

    #[test]
    fn backproject_principal_ray_and_formula() {
        let mut data = vec![f64::NAN; 8 * 6];
        data[3 * 8 + 4] = 2.0;
        let d = DepthMap::new(8, 6, data).unwrap();
        let c = backproject(&d, &intr(100.0, 4.0, 3.0, 8, 6), None).unwrap();
        assert_eq!(c.positions(), &[Vec3::new(0.0, 0.0, 2.0)]);

        let mut data = vec![f64::NAN; 101];
        data[100] = 1.0;
        let d = DepthMap::new(101, 1, data).unwrap();
        let c = backproject(&d, &intr(100.0, 0.0, 0.0, 101, 1), None).unwrap();
        assert_eq!(c.positions(), &[Vec3::new(1.0, 0.0, 1.0)]);
    }

    #[test]
    fn backproject_invalid_and_mismatch() {
        let d = DepthMap::invalid(4, 4);
        assert!(backproject(&d, &intr(10.0, 2.0, 2.0, 4, 4), None).unwrap().is_empty());
        assert!(matches!(
            backproject(&d, &intr(10.0, 2.0, 2.0, 5, 4), None),
            Err(CloudError::DimensionMismatch { .. })
        ));
        let rgb = RgbImage::new(3, 4, vec![[0.0; 3]; 12]).unwrap();
        assert!(backproject(&d, &intr(10.0, 2.0, 2.0, 4, 4), Some(&rgb)).is_err());
    }

    #[test]
    fn backproject_samples_colors() {
        let d = DepthMap::new(2, 1, vec![1.0, f64::NAN]).unwrap();
        let rgb = RgbImage::new(2, 1, vec![[0.2, 0.4, 0.6], [1.0, 1.0, 1.0]]).unwrap();
        let c = backproject(&d, &intr(1.0, 0.0, 0.0, 2, 1), Some(&rgb)).unwrap();
        assert_eq!(c.colors().unwrap(), &[[0.2, 0.4, 0.6]]);
    }

    #[test]
    fn voxel_basics() {
        let c = PointCloud::new(vec![Vec3::new(0.3, 0.3, 0.3); 2]);
        assert_eq!(voxel_downsample(&c, 1.0).unwrap().positions(), &[Vec3::new(0.3, 0.3, 0.3)]);
        let c = PointCloud::new(vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.9, 0.0, 0.0)]);
        assert_eq!(voxel_downsample(&c, 1.0).unwrap().positions(), &[Vec3::new(0.5, 0.0, 0.0)]);
        assert!(matches!(voxel_downsample(&c, 0.0), Err(CloudError::InvalidParameter(_))));
    }

    #[test]
    fn voxel_order_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<Vec3> = (0..10_000).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let out = voxel_downsample(&PointCloud::new(pts), 0.1).unwrap();
        assert!(out.len() <= 1000);
        let half_diag = 0.5 * 0.1 * math::sqrt(3.0);
        let mut prev: Option<(i64, i64, i64)> = None;
        for p in out.positions() {
            let key = ((p.x / 0.1).floor() as i64, (p.y / 0.1).floor() as i64, (p.z / 0.1).floor() as i64);
            let center = Vec3::new(key.0 as f64 + 0.5, key.1 as f64 + 0.5, key.2 as f64 + 0.5) * 0.1;
            assert!((p - center).norm() <= half_diag + 1e-12);
            if let Some(k) = prev {
                assert!(k < key);
            }
            prev = Some(key);
        }
    }

    #[test]
    fn voxel_averages_attributes() {
        let c = PointCloud::new(vec![Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.2, 0.2, 0.2)])
            .with_normals(vec![Vec3::x(), Vec3::y()])
            .unwrap()
            .with_colors(vec![[0.0, 0.5, 1.0], [1.0, 0.5, 0.0]])
            .unwrap();
        let out = voxel_downsample(&c, 1.0).unwrap();
        assert_eq!(out.colors().unwrap(), &[[0.5, 0.5, 0.5]]);
        let n = out.normals().unwrap()[0];
        assert!((n - Vec3::new(1.0, 1.0, 0.0).normalize()).norm() < 1e-15);
    }

    #[test]
    fn scale_shift_identity_and_affine() {
        let rel = DepthMap::new(3, 1, vec![1.0, 2.0, 4.0]).unwrap();
        let fit = align_scale_shift(&rel, &rel).unwrap();
        assert!((fit.scale - 1.0).abs() < 1e-15 && fit.shift.abs() < 1e-15);
        let reference = DepthMap::new(3, 1, vec![5.0, 7.0, 11.0]).unwrap();
        let fit = align_scale_shift(&rel, &reference).unwrap();
        assert!((fit.scale - 2.0).abs() < 1e-12);
        assert!((fit.shift - 3.0).abs() < 1e-12);
    }

    #[test]
    fn scale_shift_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let rel: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.5..5.0)).collect();
        let reference: Vec<f64> = rel.iter().map(|x| 2.0 * x + 3.0 + rng.random_range(-0.01..0.01)).collect();
        let fit = align_scale_shift(
            &DepthMap::new(100, 100, rel).unwrap(),
            &DepthMap::new(100, 100, reference).unwrap(),
        )
        .unwrap();
        assert!((fit.scale - 2.0).abs() < 0.01);
    }

    #[test]
    fn scale_shift_errors() {
        let a = DepthMap::new(3, 1, vec![1.0, f64::NAN, f64::NAN]).unwrap();
        let b = DepthMap::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(align_scale_shift(&a, &b), Err(CloudError::InsufficientOverlap));
        let c = DepthMap::new(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        assert_eq!(align_scale_shift(&c, &b), Err(CloudError::DegenerateInput));
    }

    #[test]
    fn scale_shift_invalidates_non_positive() {
        let rel = DepthMap::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let reference = DepthMap::new(3, 1, vec![f64::NAN, 1.0, 2.0]).unwrap();
        // fit is z = x - 1, so the first pixel maps to 0
        let fit = align_scale_shift(&rel, &reference).unwrap();
        assert!(fit.aligned.get(0, 0).is_none());
        assert!((fit.aligned.get(2, 0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn attribute_validation() {
        let c = PointCloud::new(vec![Vec3::zeros()]);
        assert!(c.clone().with_normals(vec![Vec3::new(2.0, 0.0, 0.0)]).is_err());
        assert!(c.clone().with_colors(vec![]).is_err());
    }
}
