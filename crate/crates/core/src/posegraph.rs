//! Multiway registration: build a pose graph from pairwise registrations,
//! optimize it globally, and fuse the fragments into one cloud.
//!
//! Node `k` holds the pose of fragment `k` in the frame of fragment 0, so node
//! 0 is the identity and stays fixed. Edge `(i, j)` measures the pose of `j`
//! relative to `i`, and its residual is `log(Z_ij^-1 N_i^-1 N_j)`. Increments
//! are applied on the left, `N <- exp(delta) N`, like every update in the
//! crate.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::cloud::{self, CloudError, PointCloud};
use crate::geom::{left_jacobian, GeomError, RigidTransform, Twist};
use crate::math::{self, Mat6, Vec3, Vec6};
use crate::par;
use crate::registration::{pairwise_register, IcpError, PairwiseParams};

/// Symmetry tolerance for information matrices.
pub const INFORMATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PoseGraphError {
    #[error("need at least {needed} fragments, got {got}")]
    TooFewFragments { needed: usize, got: usize },
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("registration failed for fragment {j} against fragment {i}: {source}")]
    RegistrationFailed {
        i: usize,
        j: usize,
        #[source]
        source: IcpError,
    },
    #[error("reduced Hessian is singular; the graph does not constrain every node")]
    SingularSystem,
    #[error("invalid graph: {0}")]
    InvalidGraph(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("edge residual undefined: {0}")]
    Residual(#[from] GeomError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    LoopClosure,
}

impl EdgeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::Odometry => "odometry",
            EdgeKind::LoopClosure => "loop_closure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "odometry" => Some(EdgeKind::Odometry),
            "loop_closure" => Some(EdgeKind::LoopClosure),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEdge {
    pub i: usize,
    pub j: usize,
    /// Pose of node `j` relative to node `i`.
    pub measurement: RigidTransform,
    /// Weight of the edge residual, symmetric positive semidefinite.
    pub information: Mat6,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    nodes: Vec<RigidTransform>,
    edges: Vec<PoseEdge>,
}

impl PoseGraph {
    /// Validates node 0 (identity), edge indices (`i < j < n`) and
    /// information matrices.
    pub fn new(mut nodes: Vec<RigidTransform>, edges: Vec<PoseEdge>) -> Result<Self, PoseGraphError> {
        let first = nodes.first().ok_or(PoseGraphError::InvalidGraph("graph has no nodes"))?;
        let off_identity = first
            .to_row_major()
            .iter()
            .zip(RigidTransform::identity().to_row_major())
            .fold(0.0, |m, (a, b)| f64::max(m, math::abs(a - b)));
        if off_identity > 1e-12 {
            return Err(PoseGraphError::InvalidGraph("node 0 must be the identity"));
        }
        nodes[0] = RigidTransform::identity();
        for e in &edges {
            if !(e.i < e.j && e.j < nodes.len()) {
                return Err(PoseGraphError::InvalidGraph("edge must satisfy i < j < node count"));
            }
            if (e.information - e.information.transpose()).abs().max() > INFORMATION_TOL * (1.0 + e.information.abs().max()) {
                return Err(PoseGraphError::InvalidGraph("information matrix is not symmetric"));
            }
            let eig = nalgebra::SymmetricEigen::new(e.information);
            let scale = eig.eigenvalues.abs().max();
            if eig.eigenvalues.min() < -INFORMATION_TOL * (1.0 + scale) {
                return Err(PoseGraphError::InvalidGraph("information matrix is not positive semidefinite"));
            }
        }
        Ok(Self { nodes, edges })
    }

    pub fn nodes(&self) -> &[RigidTransform] {
        &self.nodes
    }

    pub fn edges(&self) -> &[PoseEdge] {
        &self.edges
    }

    fn with_nodes(&self, nodes: Vec<RigidTransform>) -> Self {
        Self {
            nodes,
            edges: self.edges.clone(),
        }
    }

    /// Residual of one edge at the current node poses.
    pub fn edge_residual(&self, edge: &PoseEdge) -> Result<Twist, GeomError> {
        residual(&self.nodes, edge)
    }

    /// Robust objective `sum rho(r^T L r)` at the current node poses.
    pub fn objective(&self, huber_delta: f64) -> Result<f64, GeomError> {
        objective(&self.nodes, &self.edges, huber_delta)
    }
}

fn residual(nodes: &[RigidTransform], e: &PoseEdge) -> Result<Twist, GeomError> {
    e.measurement
        .inverse()
        .compose(&nodes[e.i].inverse())
        .compose(&nodes[e.j])
        .log()
}

// Huber on the squared Mahalanobis norm; odometry edges stay quadratic.
fn robust(kind: EdgeKind, s: f64, delta: f64) -> (f64, f64) {
    if kind == EdgeKind::Odometry || s <= delta * delta {
        (s, 1.0)
    } else {
        let root = math::sqrt(s);
        (2.0 * delta * root - delta * delta, delta / root)
    }
}

fn objective(nodes: &[RigidTransform], edges: &[PoseEdge], delta: f64) -> Result<f64, GeomError> {
    let mut total = 0.0;
    for e in edges {
        let r = residual(nodes, e)?.to_vector();
        let s = r.dot(&(e.information * r));
        total += robust(e.kind, s, delta).0;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeParams {
    pub max_iterations: usize,
    /// Huber threshold on loop-closure edges (twist units).
    pub huber_delta: f64,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            huber_delta: 1.0,
        }
    }
}

/// Stop once an accepted step lowers the objective by less than this
/// fraction.
pub const MIN_RELATIVE_DECREASE: f64 = 1e-9;

const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub graph: PoseGraph,
    /// Objective before the first step and after every accepted step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

/// Gauss-Newton over left increments of nodes `1..n`, with step halving
/// whenever a full step would raise the objective.
pub fn optimize_pose_graph(graph: &PoseGraph, params: &OptimizeParams) -> Result<OptimizeReport, PoseGraphError> {
    if !(params.huber_delta > 0.0) {
        return Err(PoseGraphError::InvalidParameter("huber delta must be positive"));
    }
    let n = graph.nodes.len();
    let mut nodes = graph.nodes.clone();
    let mut current = objective(&nodes, &graph.edges, params.huber_delta)?;
    let mut history = alloc::vec![current];
    let mut iterations = 0;
    if n == 1 {
        return Ok(OptimizeReport {
            graph: graph.clone(),
            objective_history: history,
            iterations,
        });
    }

    while iterations < params.max_iterations {
        let delta = solve_increment(&nodes, &graph.edges, params.huber_delta)?;
        if current == 0.0 {
            break;
        }
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let trial = apply_increment(&nodes, &delta, scale);
            if let Ok(f) = objective(&trial, &graph.edges, params.huber_delta) {
                if f <= current {
                    accepted = Some((trial, f));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((trial, f)) = accepted else { break };
        iterations += 1;
        let decrease = (current - f) / current;
        nodes = trial;
        current = f;
        history.push(f);
        if decrease < MIN_RELATIVE_DECREASE {
            break;
        }
    }
    Ok(OptimizeReport {
        graph: graph.with_nodes(nodes),
        objective_history: history,
        iterations,
    })
}

fn apply_increment(nodes: &[RigidTransform], delta: &DVector<f64>, scale: f64) -> Vec<RigidTransform> {
    let mut out = nodes.to_vec();
    for (k, node) in out.iter_mut().enumerate().skip(1) {
        let d = Vec6::from_iterator(delta.rows(6 * (k - 1), 6).iter().map(|x| x * scale));
        *node = RigidTransform::exp(&Twist::from_vector(&d)).compose(node);
    }
    out
}

/// Jacobians of an edge residual with respect to left increments of its two
/// nodes.
pub fn edge_jacobians(nodes: &[RigidTransform], edge: &PoseEdge) -> Result<(Vec6, Mat6, Mat6), GeomError> {
    let r = residual(nodes, edge)?;
    let adj = edge.measurement.inverse().compose(&nodes[edge.i].inverse()).adjoint();
    let jl_inv = left_jacobian(&r).try_inverse().ok_or(GeomError::NonFinite)?;
    let jj = jl_inv * adj;
    Ok((r.to_vector(), -jj, jj))
}

fn solve_increment(nodes: &[RigidTransform], edges: &[PoseEdge], delta: f64) -> Result<DVector<f64>, PoseGraphError> {
    let dim = 6 * (nodes.len() - 1);
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    for e in edges {
        let (r, ji, jj) = edge_jacobians(nodes, e)?;
        let lr = e.information * r;
        let w = robust(e.kind, r.dot(&lr), delta).1;
        let blocks = [(e.i, ji), (e.j, jj)];
        for (a, ja) in &blocks {
            if *a == 0 {
                continue;
            }
            let oa = 6 * (a - 1);
            let mut rows = b.rows_mut(oa, 6);
            rows += ja.transpose() * lr * w;
            for (c, jc) in &blocks {
                if *c == 0 {
                    continue;
                }
                let oc = 6 * (c - 1);
                let mut block = h.view_mut((oa, oc), (6, 6));
                block += ja.transpose() * e.information * jc * w;
            }
        }
    }
    let max_diag = h.diagonal().iter().fold(0.0f64, |m, x| m.max(*x));
    if !(max_diag > 0.0) || !h.iter().all(|x| x.is_finite()) {
        return Err(PoseGraphError::SingularSystem);
    }
    let chol = h.clone().cholesky().ok_or(PoseGraphError::SingularSystem)?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, x| m.min(x * x));
    if min_pivot < 1e-12 * max_diag {
        return Err(PoseGraphError::SingularSystem);
    }
    Ok(chol.solve(&(-b)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildParams {
    /// Loop closures are attempted for `1 < j - i <= loop_window`.
    pub loop_window: usize,
    pub min_loop_fitness: f64,
    pub pairwise: PairwiseParams,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            loop_window: 3,
            min_loop_fitness: 0.3,
            pairwise: PairwiseParams::default(),
        }
    }
}

/// Registers consecutive fragments (odometry edges) and nearby
/// non-consecutive pairs (loop closures), seeding each registration with the
/// relative odometry. Node poses chain the registered odometry edges.
pub fn build_pose_graph(
    fragments: &[PointCloud],
    odometry: &[RigidTransform],
    params: &BuildParams,
) -> Result<PoseGraph, PoseGraphError> {
    if fragments.len() < 2 {
        return Err(PoseGraphError::TooFewFragments {
            needed: 2,
            got: fragments.len(),
        });
    }
    if odometry.len() != fragments.len() {
        return Err(PoseGraphError::LengthMismatch {
            expected: fragments.len(),
            got: odometry.len(),
        });
    }
    let n = fragments.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n.min(i + params.loop_window.max(1) + 1) {
            pairs.push((i, j));
        }
    }
    let results = par::map_range(pairs.len(), |k| {
        let (i, j) = pairs[k];
        let seed = odometry[i].inverse().compose(&odometry[j]);
        pairwise_register(&fragments[j], &fragments[i], &seed, &params.pairwise)
    });

    let mut edges = Vec::new();
    for (&(i, j), result) in pairs.iter().zip(results) {
        let kind = if j == i + 1 { EdgeKind::Odometry } else { EdgeKind::LoopClosure };
        let reg = match (kind, result) {
            (_, Ok(reg)) => reg,
            (EdgeKind::Odometry, Err(source)) => return Err(PoseGraphError::RegistrationFailed { i, j, source }),
            (EdgeKind::LoopClosure, Err(err)) => {
                log::info!("dropping loop closure {i}-{j}: {err}");
                continue;
            }
        };
        if kind == EdgeKind::LoopClosure && reg.fitness < params.min_loop_fitness {
            log::info!("dropping loop closure {i}-{j}: fitness {:.3}", reg.fitness);
            continue;
        }
        let measurement = reg.transform;
        // registration information weights left perturbations of the
        // measurement; re-express it in the residual's tangent frame
        let ad = measurement.adjoint();
        let info = ad.transpose() * reg.information * ad;
        let information = 0.5 * (info + info.transpose());
        edges.push(PoseEdge {
            i,
            j,
            measurement,
            information,
            kind,
        });
    }

    let mut nodes = alloc::vec![RigidTransform::identity()];
    for e in edges.iter().filter(|e| e.kind == EdgeKind::Odometry) {
        let next = nodes[e.i].compose(&e.measurement);
        nodes.push(next);
    }
    PoseGraph::new(nodes, edges)
}

/// Moves every fragment into node 0's frame, concatenates and voxel
/// downsamples. Normals are re-estimated when any input lacked them.
pub fn integrate(fragments: &[PointCloud], graph: &PoseGraph, voxel_size: f64) -> Result<PointCloud, PoseGraphError> {
    if fragments.len() != graph.nodes.len() {
        return Err(PoseGraphError::LengthMismatch {
            expected: graph.nodes.len(),
            got: fragments.len(),
        });
    }
    let moved: Vec<PointCloud> = fragments
        .iter()
        .zip(&graph.nodes)
        .map(|(f, pose)| f.transformed(pose))
        .collect();
    let all_normals = moved.iter().all(|c| c.normals().is_some());
    let merged = PointCloud::concat(&moved);
    let down = cloud::voxel_downsample(&merged, voxel_size)?;
    if all_normals || down.len() < 4 {
        return Ok(down);
    }
    let k = cloud::DEFAULT_NORMAL_NEIGHBORS.min(down.len() - 1);
    Ok(cloud::estimate_normals(&down, k, &Vec3::zeros())?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiwayParams {
    pub build: BuildParams,
    pub optimize: OptimizeParams,
    /// Extra build + optimize rounds seeded with the previous solution.
    pub refine_rounds: usize,
    pub integrate_voxel: f64,
}

impl Default for MultiwayParams {
    fn default() -> Self {
        Self {
            build: BuildParams::default(),
            optimize: OptimizeParams::default(),
            refine_rounds: 0,
            integrate_voxel: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiwayResult {
    /// Graph as built, before optimization (last round).
    pub initial: PoseGraph,
    pub optimized: PoseGraph,
    pub merged: PointCloud,
}

/// Build, optimize and integrate. A single fragment yields a one-node graph
/// and a downsampled copy of the fragment.
pub fn multiway_register(
    fragments: &[PointCloud],
    odometry: &[RigidTransform],
    params: &MultiwayParams,
) -> Result<MultiwayResult, PoseGraphError> {
    if odometry.len() != fragments.len() {
        return Err(PoseGraphError::LengthMismatch {
            expected: fragments.len(),
            got: odometry.len(),
        });
    }
    if fragments.is_empty() {
        return Err(PoseGraphError::TooFewFragments { needed: 1, got: 0 });
    }
    if fragments.len() == 1 {
        let graph = PoseGraph::new(alloc::vec![RigidTransform::identity()], Vec::new())?;
        let merged = integrate(fragments, &graph, params.integrate_voxel)?;
        return Ok(MultiwayResult {
            initial: graph.clone(),
            optimized: graph,
            merged,
        });
    }
    let mut seeds = odometry.to_vec();
    let mut round = 0;
    loop {
        let initial = build_pose_graph(fragments, &seeds, &params.build)?;
        let optimized = optimize_pose_graph(&initial, &params.optimize)?.graph;
        if round == params.refine_rounds {
            let merged = integrate(fragments, &optimized, params.integrate_voxel)?;
            return Ok(MultiwayResult {
                initial,
                optimized,
                merged,
            });
        }
        seeds = optimized.nodes.clone();
        round += 1;
    }
}
