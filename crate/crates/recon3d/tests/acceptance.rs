//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recon3d::io::ply::{decode_ply, encode_ply};
use recon3d::io::{self, image, FormatError, Location, PlyEncoding, Trajectory};
use recon3d_core::cloud::estimate_normals;
use recon3d_core::math::{Mat6, Vec3};
use recon3d_core::posegraph::{multiway_register, optimize_pose_graph, EdgeKind, MultiwayParams, OptimizeParams, PoseEdge, PoseGraph};
use recon3d_core::registration::{icp_point_to_plane, icp_point_to_point, IcpParams};
use recon3d_core::stereo::{compute_disparity, disparity_to_depth, BlockMatchParams, StereoRig};
use recon3d_core::synth::{self, Primitive, SceneSpec};
use recon3d_core::{PointCloud, RigidTransform, SpatialIndex, Twist};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_vector(r: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn perturbation(angle: f64, dist: f64, r: &mut ChaCha8Rng) -> RigidTransform {
    let rot = RigidTransform::exp(&Twist::new(unit_vector(r) * angle, Vec3::zeros()));
    RigidTransform::from_parts_unchecked(*rot.rotation(), unit_vector(r) * dist)
}

/// Plane, sphere and box sampled to about `n` points.
fn composite(n: usize, seed: u64) -> PointCloud {
    let spec = |density| SceneSpec {
        primitives: vec![
            Primitive::Plane {
                pose: RigidTransform::identity(),
                size: [2.0, 2.0],
            },
            Primitive::Sphere {
                center: Vec3::new(0.3, -0.2, 0.5),
                radius: 0.4,
            },
            Primitive::Cuboid {
                pose: RigidTransform::from_axis_angle(&Vec3::z(), 0.4)
                    .compose(&RigidTransform::from_translation(Vec3::new(-0.5, 0.4, 0.25))),
                half_extents: Vec3::new(0.2, 0.3, 0.25),
            },
        ],
        density,
        seed,
    };
    let area: f64 = spec(1.0).primitives.iter().map(Primitive::area).sum();
    synth::sample_scene(&spec(n as f64 / area)).unwrap()
}

fn pose_error(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    (a.inverse().compose(b).rotation_angle(), (a.translation() - b.translation()).norm())
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn criterion_1() -> Outcome {
    let target = composite(5000, 1);
    let truth = perturbation(10f64.to_radians(), 0.1, &mut rng(2));
    let source = target.transformed(&truth).without_normals();
    let params = IcpParams {
        max_correspondence_dist: 0.5,
        ..IcpParams::default()
    };
    let start = Instant::now();
    let r = single_thread(|| icp_point_to_plane(&source, &target, &RigidTransform::identity(), &params)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (rot, trans) = pose_error(&r.transform, &truth.inverse());
    check(
        rot < 1e-4 && trans < 1e-4 && r.inlier_rmse < 1e-6 && r.iterations <= 30 && elapsed < Duration::from_secs(5),
        format!(
            "{} points, rotation error {rot:.2e} rad, translation error {trans:.2e} m, inlier RMSE {:.2e} m, {} iterations, {:.2} s on one thread",
            source.len(),
            r.inlier_rmse,
            r.iterations,
            elapsed.as_secs_f64()
        ),
    )
}

fn median(v: &mut [usize]) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2]) as f64
    }
}

fn criterion_2() -> Outcome {
    let params = IcpParams {
        max_correspondence_dist: 0.5,
        max_iterations: 200,
        ..IcpParams::default()
    };
    let mut plane = Vec::new();
    let mut point = Vec::new();
    let mut unconverged = 0;
    for trial in 0..20u64 {
        let mut r = rng(100 + trial);
        let target = composite(5000, 200 + trial);
        let angle = r.random_range(0.0..=10f64.to_radians());
        let dist = r.random_range(0.0..=0.2);
        let truth = perturbation(angle, dist, &mut r);
        let source = target.transformed(&truth).without_normals();
        let a = icp_point_to_plane(&source, &target, &RigidTransform::identity(), &params).map_err(|e| e.to_string())?;
        let b = icp_point_to_point(&source, &target, &RigidTransform::identity(), &params).map_err(|e| e.to_string())?;
        unconverged += usize::from(!a.converged) + usize::from(!b.converged);
        plane.push(a.iterations);
        point.push(b.iterations);
    }
    let (mp, mq) = (median(&mut plane), median(&mut point));
    check(
        mp <= mq,
        format!("median iterations point-to-plane {mp}, point-to-point {mq} over 20 trials ({unconverged} runs hit the 200-iteration cap)"),
    )
}

fn criterion_3() -> Outcome {
    let (w, h) = (320, 240);
    let params = BlockMatchParams {
        block_radius: 4,
        max_disparity: 24,
        uniqueness_ratio: 0.9,
    };
    let rig = StereoRig::new(500.0, 0.12, 159.5, 119.5).map_err(|e| e.to_string())?;
    let r = params.block_radius;
    let mut worst = 1.0f64;
    let mut worst_rel = 0.0f64;
    for shift in 1..=20usize {
        let (left, right) = synth::make_stereo_pair(&synth::random_texture(w, h, shift as u64), shift).map_err(|e| e.to_string())?;
        let disp = compute_disparity(&left, &right, &params).map_err(|e| e.to_string())?;
        let (mut total, mut exact) = (0usize, 0usize);
        for v in r..h - r {
            for u in r + params.max_disparity..w - r {
                total += 1;
                exact += usize::from(disp.get(u, v) == Some(shift as f64));
            }
        }
        worst = worst.min(exact as f64 / total as f64);
        let depth = disparity_to_depth(&disp, &rig, 0.5).map_err(|e| e.to_string())?;
        for (z, d) in depth.data().iter().zip(disp.data()) {
            if !z.is_nan() {
                let expected = rig.focal_px * rig.baseline_m / d;
                worst_rel = worst_rel.max((z - expected).abs() / expected);
            }
        }
    }
    check(
        worst >= 0.95 && worst_rel < 1e-12,
        format!("lowest exact-shift fraction {:.4} over shifts 1-20, largest depth relative error {worst_rel:.1e}", worst),
    )
}

fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

fn criterion_4() -> Outcome {
    let plane_spec = SceneSpec {
        primitives: vec![Primitive::Plane {
            pose: RigidTransform::identity(),
            size: [1.0, 1.0],
        }],
        density: 10_000.0,
        seed: 1,
    };
    let plane = synth::sample_scene(&plane_spec).map_err(|e| e.to_string())?.without_normals();
    let est = estimate_normals(&plane, 30, &Vec3::new(0.0, 0.0, 1.0)).map_err(|e| e.to_string())?;
    let plane_worst = est.normals().unwrap().iter().map(|n| angle_deg(n, &Vec3::z())).fold(0.0, f64::max);

    let sphere_spec = SceneSpec {
        primitives: vec![Primitive::Sphere {
            center: Vec3::zeros(),
            radius: 1.0,
        }],
        density: 10_000.0 / (4.0 * std::f64::consts::PI),
        seed: 2,
    };
    let sphere = synth::sample_scene(&sphere_spec).map_err(|e| e.to_string())?.without_normals();
    // viewpoint at the center: normals point inward along the radius
    let est = estimate_normals(&sphere, 30, &Vec3::zeros()).map_err(|e| e.to_string())?;
    let within = est
        .positions()
        .iter()
        .zip(est.normals().unwrap())
        .filter(|(p, n)| angle_deg(n, &-*p) < 2.0)
        .count();
    let frac = within as f64 / sphere.len() as f64;
    check(
        plane_worst < 0.5 && frac >= 0.99,
        format!(
            "plane ({} points) worst error {plane_worst:.2e} deg; sphere ({} points) {:.2}% within 2 deg",
            plane.len(),
            sphere.len(),
            100.0 * frac
        ),
    )
}

fn criterion_5() -> Outcome {
    let scene = synth::standard_room(1.0, 0);
    let truth = synth::standard_trajectory();
    let fragments = synth::render_fragments(&scene, &truth, &synth::standard_intrinsics());
    let mut lines = Vec::new();
    let mut ok = true;
    let start = Instant::now();
    for seed in [1u64, 2, 3] {
        let odometry = synth::noisy_odometry(&truth, 3f64.to_radians(), 0.05, seed);
        let r = multiway_register(&fragments, &odometry, &MultiwayParams::default()).map_err(|e| e.to_string())?;
        let (mut chained, mut optimized) = (0.0, 0.0);
        for k in 0..truth.len() {
            let t = truth[0].inverse().compose(&truth[k]);
            chained += (odometry[0].inverse().compose(&odometry[k]).translation() - t.translation()).norm();
            optimized += (r.optimized.nodes()[k].translation() - t.translation()).norm();
        }
        let n = truth.len() as f64;
        let near = r
            .merged
            .positions()
            .iter()
            .filter(|p| scene.surface_distance(&truth[0].apply(p)) <= 0.04)
            .count();
        let frac = near as f64 / r.merged.len() as f64;
        ok &= optimized <= 0.5 * chained && frac >= 0.9;
        lines.push(format!(
            "seed {seed}: mean translation error {:.4} m -> {:.5} m, {:.1}% of {} points within 0.04 m",
            chained / n,
            optimized / n,
            100.0 * frac,
            r.merged.len()
        ));
    }
    let per_run = start.elapsed().as_secs_f64() / 3.0;
    ok &= per_run < 60.0;
    check(ok, format!("{}; {per_run:.2} s per run", lines.join("; ")))
}

fn criterion_6() -> Outcome {
    let mut r = rng(6);
    let mut mismatches = 0;
    let mut queries = 0;
    for _ in 0..10 {
        let n = r.random_range(1..=2000);
        let pts: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
            .collect();
        let index = SpatialIndex::new(&pts);
        for _ in 0..100 {
            let q = Vec3::new(r.random_range(-1.5..1.5), r.random_range(-1.5..1.5), r.random_range(-1.5..1.5));
            let brute = pts
                .iter()
                .enumerate()
                .map(|(i, p)| ((p - q).norm(), i))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap();
            queries += 1;
            if index.nearest(&q, f64::INFINITY) != Some((brute.1, brute.0)) {
                mismatches += 1;
            }
        }
    }

    let target = composite(3000, 7);
    let truth = perturbation(6f64.to_radians(), 0.08, &mut r);
    let source = target.transformed(&truth).without_normals();
    let params = IcpParams {
        max_correspondence_dist: 0.3,
        ..IcpParams::default()
    };
    let res = icp_point_to_plane(&source, &target, &RigidTransform::identity(), &params).map_err(|e| e.to_string())?;
    let normals = target.normals().unwrap();
    let recomputed: f64 = res
        .correspondences
        .pairs
        .iter()
        .map(|&(i, j)| {
            let d = (target.positions()[j] - res.transform.apply(&source.positions()[i])).dot(&normals[j]);
            d * d
        })
        .sum();
    let rel = (res.objective - recomputed).abs() / recomputed.abs().max(f64::MIN_POSITIVE);
    check(
        mismatches == 0 && rel <= 1e-10,
        format!("{mismatches} index mismatches over {queries} queries; objective {:.6e} vs recomputed {recomputed:.6e} (relative difference {rel:.1e})", res.objective),
    )
}

fn criterion_7() -> Outcome {
    let mut r = rng(7);
    let mut worst_roundtrip = 0.0f64;
    for _ in 0..100 {
        let omega = unit_vector(&mut r) * r.random_range(0.0..3.0);
        let v = unit_vector(&mut r) * r.random_range(0.0..10.0);
        let xi = Twist::new(omega, v);
        let back = RigidTransform::exp(&xi).log().map_err(|e| e.to_string())?;
        worst_roundtrip = worst_roundtrip.max((back.to_vector() - xi.to_vector()).norm());
    }

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
    edges.push(edge(1, 4, EdgeKind::LoopClosure));
    let consistent = PoseGraph::new(truth.clone(), edges.clone()).map_err(|e| e.to_string())?;
    let fixed = optimize_pose_graph(&consistent, &OptimizeParams::default()).map_err(|e| e.to_string())?;
    let fixed_moved = fixed
        .graph
        .nodes()
        .iter()
        .zip(&truth)
        .map(|(a, b)| {
            let (x, y) = pose_error(a, b);
            x.max(y)
        })
        .fold(0.0, f64::max);

    let drifted: Vec<RigidTransform> = truth
        .iter()
        .enumerate()
        .map(|(k, t)| if k == 0 { *t } else { t.compose(&perturbation(0.05, 0.08, &mut r)) })
        .collect();
    let graph = PoseGraph::new(drifted, edges).map_err(|e| e.to_string())?;
    let solved = optimize_pose_graph(&graph, &OptimizeParams::default()).map_err(|e| e.to_string())?;
    let loop_residual = solved
        .graph
        .edges()
        .iter()
        .filter(|e| e.kind == EdgeKind::LoopClosure)
        .map(|e| solved.graph.edge_residual(e).map(|t| t.to_vector().norm()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?
        .into_iter()
        .fold(0.0, f64::max);
    check(
        worst_roundtrip < 1e-9 && fixed_moved < 1e-10 && loop_residual < 1e-6,
        format!("exp/log roundtrip {worst_roundtrip:.1e}; fixed point moved {fixed_moved:.1e}; loop-closure residual {loop_residual:.1e}"),
    )
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_recon3d"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_8() -> Outcome {
    // lossless roundtrips
    let mut r = rng(8);
    let n = 10_000;
    let positions: Vec<Vec3> = (0..n).map(|_| unit_vector(&mut r) * r.random_range(0.0..20.0)).collect();
    let normals: Vec<Vec3> = (0..n).map(|_| unit_vector(&mut r)).collect();
    let colors: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_: i32| r.random_range(0..=255u8) as f64 / 255.0)).collect();
    let cloud = PointCloud::new(positions).with_normals(normals).unwrap().with_colors(colors).unwrap();
    let mut ply_ok = true;
    for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
        let back = decode_ply(&encode_ply(&cloud, enc)).map_err(|e| e.to_string())?;
        let q = |v: &Vec3| v.map(|x| x as f32 as f64);
        ply_ok &= back.positions().iter().zip(cloud.positions()).all(|(b, a)| *b == q(a));
        ply_ok &= back.normals().unwrap().iter().zip(cloud.normals().unwrap()).all(|(b, a)| *b == q(a));
        ply_ok &= back.colors() == cloud.colors();
    }
    let poses: Vec<RigidTransform> = (0..100)
        .map(|_| RigidTransform::exp(&Twist::new(unit_vector(&mut r) * r.random_range(0.0..3.0), unit_vector(&mut r) * r.random_range(0.0..100.0))))
        .collect();
    let traj = Trajectory::from_poses(&poses);
    let traj_ok = Trajectory::parse(&traj.to_text()).map_err(|e| e.to_string())? == traj;

    // malformed inputs
    let binary = encode_ply(&cloud, PlyEncoding::BinaryLittleEndian);
    let ascii = String::from_utf8(encode_ply(&cloud, PlyEncoding::Ascii)).unwrap();
    let mut bad_ascii = ascii.clone().into_bytes();
    let at = ascii.find("end_header\n").unwrap() + 40;
    bad_ascii[at] = b'x';
    let located = |res: Result<PointCloud, FormatError>| matches!(res, Err(FormatError::Parse { .. }));
    let mut malformed_ok = located(decode_ply(&binary[..binary.len() - 7]))
        && located(decode_ply(&bad_ascii))
        && located(decode_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header"))
        && matches!(decode_ply(b"ply\nformat binary_big_endian 1.0\nend_header\n"), Err(FormatError::UnsupportedFormat(_)))
        && matches!(
            Trajectory::parse("0 1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1\n1 1 0 0 0 0 1 0 0 0 0 2 0 0 0 0 1\n").map_err(|e| e.location()),
            Err(Some(Location::Line(2)))
        )
        && matches!(io::parse_scene("room\nbox radius=2\n").map_err(|e| e.location()), Err(Some(Location::Line(2))));
    // random corruption must be rejected or accepted, never crash
    for trial in 0..300 {
        let mut bytes = if trial % 2 == 0 { binary[..600].to_vec() } else { ascii.as_bytes()[..600].to_vec() };
        for _ in 0..r.random_range(1..6) {
            let i = r.random_range(0..bytes.len());
            bytes[i] = r.random();
        }
        bytes.truncate(r.random_range(0..=bytes.len()));
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let survived = std::panic::catch_unwind(|| {
            let _ = decode_ply(&bytes);
            let _ = Trajectory::parse(&text);
            let _ = io::parse_scene(&text);
            let _ = io::graph_file::parse_graph(&text);
            let _ = image::decode_raster(&bytes);
        });
        malformed_ok &= survived.is_ok();
    }

    // byte-reproducible command runs
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    std::fs::write(d.join("scene.txt"), "density = 1000\nseed = 3\nroom\n").unwrap();
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get().max(2)).to_string();
    let mut outputs = Vec::new();
    for (tag, t) in [("a", "1"), ("b", threads.as_str()), ("c", "1")] {
        let out = d.join(tag);
        let syn = out.join("syn");
        let mut stdout = run_cli(&["synth", "--scene", &s(&d.join("scene.txt")), "--out", &s(&syn), "--odometry-rot-deg", "3", "--odometry-trans-m", "0.05", "--stereo-shift", "9", "--threads", t])?;
        stdout.extend(run_cli(&["multiway", "--fragments", &s(&syn.join("fragments")), "--odometry", &s(&syn.join("odometry.txt")), "--out", &s(&out.join("mw")), "--threads", t])?);
        stdout.extend(run_cli(&["disparity", "--left", &s(&syn.join("left_000.png")), "--right", &s(&syn.join("right_000.png")), "--out-depth", &s(&out.join("depth.png")), "--out-disparity", &s(&out.join("disp.png")), "--max-disparity", "16", "--threads", t])?);
        stdout.extend(run_cli(&["icp", "--source", &s(&syn.join("fragments/fragment_001.ply")), "--target", &s(&syn.join("fragments/fragment_000.ply")), "--max-corr", "0.2", "--out", &s(&out.join("icp.ply")), "--threads", t])?);
        outputs.push((stdout, tree_bytes(&out)));
    }
    let files = outputs[0].1.len();
    let reproducible = outputs[0] == outputs[1] && outputs[0] == outputs[2];
    check(
        ply_ok && traj_ok && malformed_ok && reproducible,
        format!(
            "PLY roundtrip {ply_ok}, trajectory roundtrip {traj_ok}, malformed inputs located {malformed_ok}, {files} output files identical across reruns and --threads 1 vs {threads}: {reproducible}"
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("ICP exact recovery", criterion_1),
        ("point-to-plane converges no slower than point-to-point", criterion_2),
        ("stereo exactness", criterion_3),
        ("normal estimation", criterion_4),
        ("multiway improvement", criterion_5),
        ("oracle equivalences", criterion_6),
        ("numerical kernels", criterion_7),
        ("I/O roundtrips and reproducibility", criterion_8),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail} [{secs:.2} s]", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {detail} [{secs:.2} s]", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
