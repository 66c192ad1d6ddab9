use alloc::vec::Vec;

use super::{CloudError, PointCloud, SpatialIndex};
use crate::math::{self, Mat3, Vec3};
use crate::par;

pub const DEFAULT_NORMAL_NEIGHBORS: usize = 30;

// Relative eigenvalue gap below which a neighborhood counts as degenerate.
const DEGENERATE_GAP: f64 = 1e-12;

/// Surface normals from the covariance of each point and its `k` nearest
/// neighbors: the eigenvector of the smallest eigenvalue, oriented toward
/// `viewpoint`.
///
/// Points whose two smallest eigenvalues coincide (collinear or coincident
/// neighborhoods) keep the solver's vector but are flagged unreliable.
pub fn estimate_normals(cloud: &PointCloud, k: usize, viewpoint: &Vec3) -> Result<PointCloud, CloudError> {
    if k < 3 {
        return Err(CloudError::InvalidParameter("normal estimation needs k >= 3"));
    }
    if cloud.len() < k + 1 {
        return Err(CloudError::TooFewPoints {
            needed: k + 1,
            got: cloud.len(),
        });
    }
    let index = SpatialIndex::new(cloud.positions());
    let positions = cloud.positions();
    let estimates: Vec<(Vec3, bool)> = par::map_range(positions.len(), |i| {
        let p = &positions[i];
        let neighbors = index.knn(p, k + 1);
        let (normal, degenerate) = fit_plane_normal(neighbors.iter().map(|&(j, _)| &positions[j]));
        let n = if normal.dot(&(viewpoint - p)) < 0.0 { -normal } else { normal };
        (n, degenerate)
    });
    let (normals, flags): (Vec<Vec3>, Vec<bool>) = estimates.into_iter().unzip();
    let mut out = cloud.clone().with_normals(normals)?;
    out.set_unreliable(flags);
    Ok(out)
}

/// Smallest-eigenvalue eigenvector of the neighborhood covariance, and
/// whether the neighborhood is degenerate.
pub(crate) fn fit_plane_normal<'a>(points: impl Iterator<Item = &'a Vec3> + Clone) -> (Vec3, bool) {
    let mut count = 0usize;
    let mut mean = Vec3::zeros();
    for p in points.clone() {
        mean += p;
        count += 1;
    }
    mean /= count as f64;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= count as f64;
    let (values, vectors) = math::sorted_symmetric_eigen(&cov);
    let scale = values[2].max(0.0);
    let degenerate = scale == 0.0 || values[1] - values[0] <= DEGENERATE_GAP * scale;
    let n = vectors.column(0).into_owned();
    let len = math::norm(&n);
    (n / len, degenerate)
}
