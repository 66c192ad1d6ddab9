//! Pairwise rigid registration.
//!
//! Both ICP variants share one loop: match every transformed source point to
//! its nearest target point within `max_correspondence_dist`, compute a step,
//! apply it on the left, and stop once the inlier RMSE stops changing. The
//! point-to-plane step solves the damped Gauss-Newton normal equations of
//! `E(T) = sum ((p - T q) . n_p)^2`; the point-to-point step is the
//! closed-form SVD alignment of the matched pairs.

use alloc::vec::Vec;

use crate::cloud::{self, CloudError, PointCloud, SpatialIndex};
use crate::geom::{RigidTransform, Twist};
use crate::math::{self, Mat3, Mat6, Vec3, Vec6};
use crate::par;

/// Tikhonov damping relative to the trace of the normal matrix.
pub const DAMPING: f64 = 1e-10;

/// Largest condition number accepted for the damped normal matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Twist norm below which an ICP step counts as converged.
pub const NEGLIGIBLE_STEP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IcpError {
    #[error("source cloud is empty")]
    EmptySource,
    #[error("target cloud has no normals")]
    MissingNormals,
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("only {found} correspondences at iteration {iteration}, need {required}")]
    TooFewCorrespondences {
        found: usize,
        required: usize,
        iteration: usize,
    },
    #[error("normal equations are rank deficient (condition {condition:e})")]
    DegenerateNormalSystem { condition: f64 },
    #[error("matched points are collinear; rotation is unconstrained")]
    DegenerateGeometry,
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    pub max_correspondence_dist: f64,
    pub max_iterations: usize,
    /// Stop once `|rmse_prev - rmse| / rmse_prev` drops below this.
    pub rel_rmse_tol: f64,
    pub min_correspondences: usize,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_correspondence_dist: 0.1,
            max_iterations: 30,
            rel_rmse_tol: 1e-6,
            min_correspondences: 6,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<(), IcpError> {
        if !(self.max_correspondence_dist > 0.0 && self.max_correspondence_dist.is_finite()) {
            return Err(IcpError::InvalidParameter("max correspondence distance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(IcpError::InvalidParameter("max iterations must be positive"));
        }
        if !(self.rel_rmse_tol > 0.0) {
            return Err(IcpError::InvalidParameter("relative RMSE tolerance must be positive"));
        }
        if self.min_correspondences < 6 {
            return Err(IcpError::InvalidParameter("at least 6 correspondences are required"));
        }
        Ok(())
    }
}

/// Matched `(source id, target id)` pairs, in ascending source id, with the
/// Euclidean distance of each pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn rmse(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.distances.iter().map(|d| d * d).sum();
        math::sqrt(sum / self.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source coordinates into the target frame.
    pub transform: RigidTransform,
    /// Matched fraction of source points.
    pub fitness: f64,
    /// RMS Euclidean distance of the final correspondences.
    pub inlier_rmse: f64,
    /// Number of transform updates applied.
    pub iterations: usize,
    pub converged: bool,
    /// Final objective: point-to-plane `E(T)` for [`icp_point_to_plane`],
    /// summed squared distances for [`icp_point_to_point`] (m^2).
    pub objective: f64,
    pub correspondences: CorrespondenceSet,
    /// Inlier RMSE before every update, then at the returned transform.
    pub rmse_history: Vec<f64>,
}

/// Nearest-neighbor matching of `transform * source` against the index.
/// Pairs whose target fails `usable` are dropped.
pub fn find_correspondences(
    source: &[Vec3],
    target: &SpatialIndex,
    transform: &RigidTransform,
    max_dist: f64,
    usable: impl Fn(usize) -> bool + Sync,
) -> CorrespondenceSet {
    let matches = par::map_range(source.len(), |i| {
        target
            .nearest(&transform.apply(&source[i]), max_dist)
            .filter(|&(j, _)| usable(j))
    });
    let mut set = CorrespondenceSet::default();
    for (i, m) in matches.into_iter().enumerate() {
        if let Some((j, d)) = m {
            set.pairs.push((i, j));
            set.distances.push(d);
        }
    }
    set
}

/// `sum ((p - T q) . n_p)^2` over the correspondences.
pub fn point_to_plane_objective(
    source: &[Vec3],
    target: &[Vec3],
    normals: &[Vec3],
    transform: &RigidTransform,
    corr: &CorrespondenceSet,
) -> f64 {
    corr.pairs
        .iter()
        .map(|&(i, j)| {
            let r = (target[j] - transform.apply(&source[i])).dot(&normals[j]);
            r * r
        })
        .sum()
}

/// Gauss-Newton information `sum J J^T` of the point-to-plane residuals at
/// `transform`, in left-perturbation twist coordinates `(omega, v)`.
pub fn point_to_plane_information(
    source: &[Vec3],
    normals: &[Vec3],
    transform: &RigidTransform,
    corr: &CorrespondenceSet,
) -> Mat6 {
    let mut h = Mat6::zeros();
    for &(i, j) in &corr.pairs {
        let jac = plane_jacobian(&transform.apply(&source[i]), &normals[j]);
        h += jac * jac.transpose();
    }
    h
}

#[inline]
fn plane_jacobian(x: &Vec3, n: &Vec3) -> Vec6 {
    let c = x.cross(n);
    Vec6::new(c.x, c.y, c.z, n.x, n.y, n.z)
}

enum Step {
    Plane,
    Point,
}

/// Point-to-plane ICP. `target` must carry normals; targets whose normal is
/// flagged unreliable are not used as matches.
pub fn icp_point_to_plane(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpResult, IcpError> {
    if target.normals().is_none() {
        return Err(IcpError::MissingNormals);
    }
    run(source, target, init, params, Step::Plane)
}

/// Point-to-point ICP with the closed-form SVD step.
pub fn icp_point_to_point(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpResult, IcpError> {
    if source.len() < 3 || is_collinear(source.positions()) {
        return Err(IcpError::DegenerateGeometry);
    }
    run(source, target, init, params, Step::Point)
}

fn is_collinear(points: &[Vec3]) -> bool {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let cov = points.iter().fold(Mat3::zeros(), |a, p| {
        let d = p - mean;
        a + d * d.transpose()
    });
    let (values, _) = math::sorted_symmetric_eigen(&cov);
    values[2] <= 0.0 || values[1] <= 1e-12 * values[2]
}

fn run(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    params: &IcpParams,
    step: Step,
) -> Result<IcpResult, IcpError> {
    params.validate()?;
    if source.is_empty() {
        return Err(IcpError::EmptySource);
    }
    let index = SpatialIndex::new(target.positions());
    let src = source.positions();
    let tgt = target.positions();
    let normals = target.normals().unwrap_or(&[]);
    let plane = matches!(step, Step::Plane);
    let usable = |j: usize| !plane || target.normal_is_reliable(j);

    let mut transform = *init;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut stalled = false;
    let corr = loop {
        let corr = find_correspondences(src, &index, &transform, params.max_correspondence_dist, usable);
        if corr.len() < params.min_correspondences {
            return Err(IcpError::TooFewCorrespondences {
                found: corr.len(),
                required: params.min_correspondences,
                iteration: iterations,
            });
        }
        let rmse = corr.rmse();
        if let Some(&prev) = history.last() {
            let change = if prev > 0.0 { math::abs(prev - rmse) / prev } else { 0.0 };
            if change < params.rel_rmse_tol || stalled {
                converged = true;
            }
        } else if rmse == 0.0 {
            converged = true;
        }
        history.push(rmse);
        if converged || iterations == params.max_iterations {
            break corr;
        }
        let delta = match step {
            Step::Plane => plane_step(src, tgt, normals, &transform, &corr)?,
            Step::Point => point_step(src, tgt, &transform, &corr)?,
        };
        transform = delta.compose(&transform);
        iterations += 1;
        stalled = delta
            .log()
            .map(|xi| xi.to_vector().norm() < NEGLIGIBLE_STEP)
            .unwrap_or(false);
    };

    let objective = if plane {
        point_to_plane_objective(src, tgt, normals, &transform, &corr)
    } else {
        corr.pairs
            .iter()
            .map(|&(i, j)| (tgt[j] - transform.apply(&src[i])).norm_squared())
            .sum()
    };
    Ok(IcpResult {
        transform,
        fitness: corr.len() as f64 / src.len() as f64,
        inlier_rmse: corr.rmse(),
        iterations,
        converged,
        objective,
        correspondences: corr,
        rmse_history: history,
    })
}

fn plane_step(
    src: &[Vec3],
    tgt: &[Vec3],
    normals: &[Vec3],
    transform: &RigidTransform,
    corr: &CorrespondenceSet,
) -> Result<RigidTransform, IcpError> {
    let mut h = Mat6::zeros();
    let mut g = Vec6::zeros();
    // fixed order (ascending source id) keeps the sums bit-reproducible
    for &(i, j) in &corr.pairs {
        let x = transform.apply(&src[i]);
        let n = &normals[j];
        let r = (x - tgt[j]).dot(n);
        let jac = plane_jacobian(&x, n);
        h += jac * jac.transpose();
        g += jac * r;
    }
    let lambda = DAMPING * h.trace();
    let damped = h + Mat6::identity() * lambda;
    let eig = nalgebra::SymmetricEigen::new(damped);
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(IcpError::DegenerateNormalSystem { condition });
    }
    let chol = damped
        .cholesky()
        .ok_or(IcpError::DegenerateNormalSystem { condition })?;
    let xi = chol.solve(&(-g));
    Ok(RigidTransform::exp(&Twist::from_vector(&xi)))
}

fn point_step(
    src: &[Vec3],
    tgt: &[Vec3],
    transform: &RigidTransform,
    corr: &CorrespondenceSet,
) -> Result<RigidTransform, IcpError> {
    let n = corr.len() as f64;
    let (mut mx, mut mp) = (Vec3::zeros(), Vec3::zeros());
    for &(i, j) in &corr.pairs {
        mx += transform.apply(&src[i]);
        mp += tgt[j];
    }
    mx /= n;
    mp /= n;
    let mut cross = Mat3::zeros();
    for &(i, j) in &corr.pairs {
        cross += (transform.apply(&src[i]) - mx) * (tgt[j] - mp).transpose();
    }
    let svd = cross.svd(true, true);
    let s = svd.singular_values;
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    if !(s[order[0]] > 0.0) || s[order[1]] <= 1e-12 * s[order[0]] {
        return Err(IcpError::DegenerateGeometry);
    }
    let v = vt.transpose();
    let mut d = Mat3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let r = v * d * u.transpose();
    Ok(RigidTransform::from_parts_unchecked(r, mp - r * mx))
}

/// Coarse-to-fine schedule for [`pairwise_register`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseParams {
    pub coarse_voxel: f64,
    pub fine_voxel: f64,
    /// Iteration limit, tolerance and minimum matches for both stages; the
    /// correspondence distance is replaced by 1.5 voxels per stage.
    pub icp: IcpParams,
    pub normal_neighbors: usize,
}

impl Default for PairwiseParams {
    fn default() -> Self {
        Self {
            coarse_voxel: 0.1,
            fine_voxel: 0.02,
            icp: IcpParams::default(),
            normal_neighbors: cloud::DEFAULT_NORMAL_NEIGHBORS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseResult {
    pub transform: RigidTransform,
    /// `sum J J^T` on the fine-stage correspondences at the final transform.
    pub information: Mat6,
    pub fitness: f64,
    pub inlier_rmse: f64,
    pub coarse: IcpResult,
    pub fine: IcpResult,
}

/// Downsamples and attaches normals, estimating them when the input has
/// none. Normals are oriented toward the frame origin.
pub fn prepare_target(cloud: &PointCloud, voxel: f64, k: usize) -> Result<PointCloud, CloudError> {
    let down = cloud::voxel_downsample(cloud, voxel)?;
    if down.normals().is_some() {
        return Ok(down);
    }
    let k = k.min(down.len().saturating_sub(1));
    cloud::estimate_normals(&down, k, &Vec3::zeros())
}

/// Two-stage point-to-plane registration returning the transform that maps
/// `source` into `target`'s frame and its information matrix.
pub fn pairwise_register(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    params: &PairwiseParams,
) -> Result<PairwiseResult, IcpError> {
    if !(params.fine_voxel > 0.0 && params.coarse_voxel > params.fine_voxel) {
        return Err(IcpError::InvalidParameter("voxel sizes must satisfy coarse > fine > 0"));
    }
    if source.is_empty() {
        return Err(IcpError::EmptySource);
    }
    let stage = |voxel: f64, start: &RigidTransform| -> Result<(IcpResult, PointCloud, PointCloud), IcpError> {
        let src = cloud::voxel_downsample(source, voxel)?.without_normals();
        let tgt = prepare_target(target, voxel, params.normal_neighbors)?;
        let icp = IcpParams {
            max_correspondence_dist: 1.5 * voxel,
            ..params.icp
        };
        let result = icp_point_to_plane(&src, &tgt, start, &icp)?;
        Ok((result, src, tgt))
    };
    let (coarse, _, _) = stage(params.coarse_voxel, init)?;
    let (fine, src, tgt) = stage(params.fine_voxel, &coarse.transform)?;
    let information = point_to_plane_information(
        src.positions(),
        tgt.normals().expect("prepared target has normals"),
        &fine.transform,
        &fine.correspondences,
    );
    Ok(PairwiseResult {
        transform: fine.transform,
        information,
        fitness: fine.fitness,
        inlier_rmse: fine.inlier_rmse,
        coarse,
        fine,
    })
}
