use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recon3d::io::ply::{decode_ply, encode_ply};
use recon3d::io::{self, FormatError, Location, PlyEncoding, Trajectory};
use recon3d_core::math::Vec3;
use recon3d_core::{PointCloud, RigidTransform, Twist};

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = || Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
    let positions: Vec<Vec3> = (0..n).map(|_| v()).collect();
    let normals: Vec<Vec3> = (0..n).map(|_| v().normalize()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let colors: Vec<[f64; 3]> = (0..n)
        .map(|_| [0; 3].map(|_: i32| rng.random_range(0..=255u8) as f64 / 255.0))
        .collect();
    PointCloud::new(positions).with_normals(normals).unwrap().with_colors(colors).unwrap()
}

fn f32_quantized(v: &Vec3) -> Vec3 {
    v.map(|x| x as f32 as f64)
}

#[test]
fn ten_thousand_points_binary_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.ply");
    let cloud = random_cloud(10_000, 1);
    io::write_ply(&cloud, &path, PlyEncoding::BinaryLittleEndian).unwrap();
    let back = io::read_ply(&path).unwrap();
    assert_eq!(back.len(), cloud.len());
    for (a, b) in cloud.positions().iter().zip(back.positions()) {
        assert_eq!(f32_quantized(a), *b);
        assert!((a - b).norm() <= 5.0 * f32::EPSILON as f64);
    }
    for (a, b) in cloud.normals().unwrap().iter().zip(back.normals().unwrap()) {
        assert_eq!(f32_quantized(a), *b);
    }
    assert_eq!(back.colors(), cloud.colors());
}

#[test]
fn hundred_random_poses_roundtrip_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let poses: Vec<RigidTransform> = (0..100)
        .map(|_| {
            let mut v = |s: f64| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
            RigidTransform::exp(&Twist::new(v(1.7), v(50.0)))
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.txt");
    let t = Trajectory::from_poses(&poses);
    io::write_trajectory(&path, &t).unwrap();
    assert_eq!(io::read_trajectory(&path).unwrap(), t);
}

#[test]
fn missing_files_are_io_errors() {
    let missing = std::path::Path::new("/nonexistent/recon3d/file");
    assert!(matches!(io::read_ply(missing), Err(FormatError::Io { .. })));
    assert!(matches!(io::read_trajectory(missing), Err(FormatError::Io { .. })));
}

fn assert_located(result: Result<impl std::fmt::Debug, FormatError>) {
    match result {
        Ok(v) => panic!("accepted malformed input: {v:?}"),
        Err(FormatError::Parse { .. }) | Err(FormatError::UnsupportedFormat(_)) => {}
        Err(e) => panic!("unexpected error kind: {e}"),
    }
}

#[test]
fn every_truncation_of_a_binary_ply_is_rejected() {
    let bytes = encode_ply(&random_cloud(20, 3), PlyEncoding::BinaryLittleEndian);
    let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
    for cut in 0..bytes.len() {
        let result = decode_ply(&bytes[..cut]);
        if cut >= header_end {
            let err = result.unwrap_err();
            let Some(Location::Byte(offset)) = err.location() else { panic!("{err}") };
            // the reported offset is the start of the incomplete record
            assert_eq!((offset as usize - header_end) % 27, 0);
            assert!(offset as usize <= cut);
        } else {
            assert!(result.is_err());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ply_roundtrip_is_stable(n in 0usize..200, seed in any::<u64>(), ascii in any::<bool>()) {
        let enc = if ascii { PlyEncoding::Ascii } else { PlyEncoding::BinaryLittleEndian };
        let cloud = random_cloud(n, seed);
        let bytes = encode_ply(&cloud, enc);
        let back = decode_ply(&bytes).unwrap();
        prop_assert_eq!(back.positions().len(), n);
        for (a, b) in cloud.positions().iter().zip(back.positions()) {
            prop_assert_eq!(f32_quantized(a), *b);
        }
        prop_assert_eq!(encode_ply(&back, enc), bytes);
    }

    #[test]
    fn mutated_ply_never_panics(seed in any::<u64>(), flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8), ascii in any::<bool>()) {
        let enc = if ascii { PlyEncoding::Ascii } else { PlyEncoding::BinaryLittleEndian };
        let mut bytes = encode_ply(&random_cloud(5, seed), enc);
        for (at, b) in flips {
            let i = at.index(bytes.len());
            bytes[i] = b;
        }
        let _ = decode_ply(&bytes);
    }

    #[test]
    fn mutated_trajectory_text_never_panics(text in "[0-9 .#e+\\-\n]{0,200}") {
        let _ = Trajectory::parse(&text);
        let _ = io::parse_scene(&text);
        let _ = io::graph_file::parse_graph(&text);
    }

    #[test]
    fn trajectory_roundtrip(ws in prop::collection::vec((-1.7f64..1.7, -1.7f64..1.7, -1.7f64..1.7, -1e3f64..1e3), 0..20)) {
        let poses: Vec<RigidTransform> = ws
            .iter()
            .map(|&(a, b, c, t)| RigidTransform::exp(&Twist::new(Vec3::new(a, b, c), Vec3::new(t, -t, 0.5 * t))))
            .collect();
        let t = Trajectory::from_poses(&poses);
        prop_assert_eq!(Trajectory::parse(&t.to_text()).unwrap(), t);
    }
}

#[test]
fn malformed_text_inputs_are_located() {
    assert_located(Trajectory::parse("0 1 0 0\n"));
    assert_located(decode_ply(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n"));
    assert_located(decode_ply(b"ply\nformat binary_big_endian 1.0\nend_header\n"));
}
