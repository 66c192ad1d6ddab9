mod common;

use common::{composite, perturbation, pose_error, rng};
use recon3d_core::math::{Mat6, Vec3};
use recon3d_core::posegraph::{
    build_pose_graph, multiway_register, optimize_pose_graph, BuildParams, EdgeKind, MultiwayParams, OptimizeParams,
    PoseEdge, PoseGraph, PoseGraphError,
};
use recon3d_core::synth::{noisy_odometry, render_fragments, standard_intrinsics, standard_room, standard_trajectory};
use recon3d_core::RigidTransform;

#[test]
fn two_identical_fragments_give_identity_edge() {
    let c = composite(3000, 1);
    let ids = [RigidTransform::identity(); 2];
    let g = build_pose_graph(&[c.clone(), c], &ids, &BuildParams::default()).unwrap();
    assert_eq!(g.edges().len(), 1);
    let e = &g.edges()[0];
    assert_eq!((e.i, e.j, e.kind), (0, 1, EdgeKind::Odometry));
    let (rot, trans) = pose_error(&e.measurement, &RigidTransform::identity());
    assert!(rot < 1e-9 && trans < 1e-9, "{rot} {trans}");
}

#[test]
fn six_view_room_edges_match_ground_truth() {
    let scene = standard_room(1.0, 0);
    let truth = standard_trajectory();
    let fragments = render_fragments(&scene, &truth, &standard_intrinsics());
    let g = build_pose_graph(&fragments, &truth, &BuildParams::default()).unwrap();
    let odometry: Vec<&PoseEdge> = g.edges().iter().filter(|e| e.kind == EdgeKind::Odometry).collect();
    assert_eq!(odometry.len(), 5);
    for e in odometry {
        let expected = truth[e.i].inverse().compose(&truth[e.j]);
        let (rot, trans) = pose_error(&e.measurement, &expected);
        assert!(rot < 1e-3 && trans < 1e-3, "edge {}-{}: {rot} {trans}", e.i, e.j);
    }
}

#[test]
fn fragments_without_overlap_fail_registration() {
    let a = composite(2000, 2);
    let b = a.transformed(&RigidTransform::from_translation(Vec3::new(30.0, 0.0, 0.0)));
    let ids = [RigidTransform::identity(); 2];
    assert!(matches!(
        build_pose_graph(&[a, b], &ids, &BuildParams::default()),
        Err(PoseGraphError::RegistrationFailed { i: 0, j: 1, .. })
    ));
}

fn loop_graph(drift_seed: u64) -> (Vec<RigidTransform>, PoseGraph) {
    let mut r = rng(drift_seed);
    let mut truth = vec![RigidTransform::identity()];
    for _ in 1..6 {
        let step = perturbation(0.4, 1.0, &mut r);
        truth.push(truth.last().unwrap().compose(&step));
    }
    let edge = |i: usize, j: usize, kind| PoseEdge {
        i,
        j,
        measurement: truth[i].inverse().compose(&truth[j]),
        information: Mat6::identity(),
        kind,
    };
    let mut edges: Vec<PoseEdge> = (0..5).map(|i| edge(i, i + 1, EdgeKind::Odometry)).collect();
    edges.push(edge(0, 5, EdgeKind::LoopClosure));
    // drift every node after the first
    let nodes: Vec<RigidTransform> = truth
        .iter()
        .enumerate()
        .map(|(k, t)| if k == 0 { *t } else { t.compose(&perturbation(0.05, 0.08, &mut r)) })
        .collect();
    (truth, PoseGraph::new(nodes, edges).unwrap())
}

#[test]
fn drifted_loop_closes_exactly() {
    let (truth, graph) = loop_graph(3);
    let report = optimize_pose_graph(&graph, &OptimizeParams::default()).unwrap();
    let closing = report.graph.edges().iter().find(|e| e.kind == EdgeKind::LoopClosure).unwrap();
    let residual = report.graph.edge_residual(closing).unwrap();
    assert!(residual.to_vector().norm() < 1e-6);
    for (a, b) in report.graph.nodes().iter().zip(&truth) {
        let (rot, trans) = pose_error(a, b);
        assert!(rot < 1e-6 && trans < 1e-6);
    }
}

#[test]
fn optimum_is_a_fixed_point() {
    let (_, graph) = loop_graph(4);
    let once = optimize_pose_graph(&graph, &OptimizeParams::default()).unwrap().graph;
    let twice = optimize_pose_graph(&once, &OptimizeParams::default()).unwrap().graph;
    for (a, b) in once.nodes().iter().zip(twice.nodes()) {
        let (rot, trans) = pose_error(a, b);
        assert!(rot < 1e-10 && trans < 1e-10);
    }
}

#[test]
fn single_fragment_is_copied_through() {
    let c = composite(1500, 5);
    let params = MultiwayParams::default();
    let r = multiway_register(std::slice::from_ref(&c), &[RigidTransform::identity()], &params).unwrap();
    assert_eq!(r.optimized.nodes(), &[RigidTransform::identity()]);
    assert!(r.optimized.edges().is_empty());
    let down = recon3d_core::cloud::voxel_downsample(&c, params.integrate_voxel).unwrap();
    assert_eq!(r.merged.positions(), down.positions());
}

#[test]
fn noisy_six_view_room_is_fused_onto_the_surfaces() {
    let scene = standard_room(1.0, 0);
    let truth = standard_trajectory();
    let fragments = render_fragments(&scene, &truth, &standard_intrinsics());
    let odometry = noisy_odometry(&truth, 3f64.to_radians(), 0.05, 21);
    let r = multiway_register(&fragments, &odometry, &MultiwayParams::default()).unwrap();
    let mut chained = 0.0;
    let mut optimized = 0.0;
    for k in 0..truth.len() {
        let t = truth[0].inverse().compose(&truth[k]);
        chained += (odometry[0].inverse().compose(&odometry[k]).translation() - t.translation()).norm();
        optimized += (r.optimized.nodes()[k].translation() - t.translation()).norm();
    }
    assert!(optimized <= 0.5 * chained, "{optimized} vs {chained}");
    let near = r
        .merged
        .positions()
        .iter()
        .filter(|p| scene.surface_distance(&truth[0].apply(p)) <= 0.04)
        .count();
    assert!(near as f64 >= 0.9 * r.merged.len() as f64);
}
