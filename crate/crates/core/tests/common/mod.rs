#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recon3d_core::math::Vec3;
use recon3d_core::synth::{sample_scene, Primitive, SceneSpec};
use recon3d_core::{PointCloud, RigidTransform, Twist};

/// Plane, sphere and yawed box, about 7.5 m^2 of surface.
pub fn composite_spec(density: f64, seed: u64) -> SceneSpec {
    SceneSpec {
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
    }
}

/// Roughly `n` points with analytic normals.
pub fn composite(n: usize, seed: u64) -> PointCloud {
    let spec = composite_spec(1.0, seed);
    let area: f64 = spec.primitives.iter().map(Primitive::area).sum();
    sample_scene(&composite_spec(n as f64 / area, seed)).unwrap()
}

pub fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Rotation of exactly `angle` about a random axis, then a translation of
/// exactly `dist` in a random direction.
pub fn perturbation(angle: f64, dist: f64, rng: &mut ChaCha8Rng) -> RigidTransform {
    let rot = RigidTransform::exp(&Twist::new(unit_vector(rng) * angle, Vec3::zeros()));
    RigidTransform::from_parts_unchecked(*rot.rotation(), unit_vector(rng) * dist)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rotation angle and translation distance between two transforms.
pub fn pose_error(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    let d = a.inverse().compose(b);
    (d.rotation_angle(), (a.translation() - b.translation()).norm())
}
