//! Analytic synthetic scenes: deterministic surface sampling, exact depth
//! rendering by ray casting, shifted stereo pairs, and the standard six-view
//! room used as ground truth across the crate.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{backproject, PinholeIntrinsics, PointCloud};
use crate::geom::{RigidTransform, Twist};
use crate::math::{self, Mat3, Vec3};
use crate::par;
use crate::raster::{DepthMap, GrayImage};

// Ray hits closer than this to the camera are ignored.
const MIN_HIT: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Scene primitive. Planes and boxes live in their own local frame given by
/// `pose` (local to world).
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Rectangle spanning `[-w/2, w/2] x [-h/2, h/2]` in local x/y with
    /// normal local +z.
    Plane { pose: RigidTransform, size: [f64; 2] },
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box in its local frame.
    Cuboid { pose: RigidTransform, half_extents: Vec3 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Surface samples per square meter.
    pub density: f64,
    pub seed: u64,
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match self {
            Primitive::Plane { size, .. } => size[0] * size[1],
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Cuboid { half_extents: h, .. } => 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z),
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let ok = match self {
            Primitive::Plane { pose, size } => pose.is_valid() && size.iter().all(|s| *s > 0.0 && s.is_finite()),
            Primitive::Sphere { center, radius } => center.iter().all(|c| c.is_finite()) && *radius > 0.0 && radius.is_finite(),
            Primitive::Cuboid { pose, half_extents } => pose.is_valid() && half_extents.iter().all(|s| *s > 0.0 && s.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidParameter("primitive has invalid dimensions or pose"))
        }
    }

    /// Smallest ray parameter `t > MIN_HIT` with `origin + t * dir` on the
    /// surface.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        match self {
            Primitive::Plane { pose, size } => {
                let inv = pose.inverse();
                let o = inv.apply(origin);
                let d = inv.rotate(dir);
                if d.z == 0.0 {
                    return None;
                }
                let t = -o.z / d.z;
                if t <= MIN_HIT {
                    return None;
                }
                let hit = o + d * t;
                (math::abs(hit.x) <= 0.5 * size[0] && math::abs(hit.y) <= 0.5 * size[1]).then_some(t)
            }
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.dot(dir);
                let b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = math::sqrt(disc);
                // stable root pair
                let q = if b > 0.0 { -(b + sq) } else { -b + sq };
                if q == 0.0 {
                    return None;
                }
                let (t0, t1) = (q / a, c / q);
                let (near, far) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
                if near > MIN_HIT {
                    Some(near)
                } else if far > MIN_HIT {
                    Some(far)
                } else {
                    None
                }
            }
            Primitive::Cuboid { pose, half_extents } => {
                let inv = pose.inverse();
                let o = inv.apply(origin);
                let d = inv.rotate(dir);
                let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if d[k] == 0.0 {
                        if math::abs(o[k]) > half_extents[k] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half_extents[k] - o[k]) / d[k];
                    let t2 = (half_extents[k] - o[k]) / d[k];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    t_near = t_near.max(lo);
                    t_far = t_far.min(hi);
                }
                if t_near > t_far {
                    None
                } else if t_near > MIN_HIT {
                    Some(t_near)
                } else if t_far > MIN_HIT {
                    Some(t_far)
                } else {
                    None
                }
            }
        }
    }

    /// Euclidean distance from `p` to the primitive's surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Plane { pose, size } => {
                let q = pose.inverse().apply(p);
                let dx = (math::abs(q.x) - 0.5 * size[0]).max(0.0);
                let dy = (math::abs(q.y) - 0.5 * size[1]).max(0.0);
                math::sqrt(dx * dx + dy * dy + q.z * q.z)
            }
            Primitive::Sphere { center, radius } => math::abs(math::norm(&(p - center)) - radius),
            Primitive::Cuboid { pose, half_extents } => {
                let q = pose.inverse().apply(p);
                let d = Vec3::new(
                    math::abs(q.x) - half_extents.x,
                    math::abs(q.y) - half_extents.y,
                    math::abs(q.z) - half_extents.z,
                );
                let outside = Vec3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0));
                let inside = d.x.max(d.y).max(d.z).min(0.0);
                math::norm(&outside) + math::abs(inside)
            }
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(SynthError::InvalidParameter("density must be positive"));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    /// Distance from `p` to the nearest surface of any primitive.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|s| s.surface_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Nearest hit along the ray, if any.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|s| s.intersect(origin, dir))
            .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = math::sqrt((1.0 - z * z).max(0.0));
    let v = Vec3::new(r * math::cos(phi), r * math::sin(phi), z);
    v / math::norm(&v)
}

fn sample_rectangle(
    rng: &mut ChaCha8Rng,
    pose: &RigidTransform,
    size: [f64; 2],
    count: usize,
    positions: &mut Vec<Vec3>,
    normals: &mut Vec<Vec3>,
) {
    let n = pose.rotate(&Vec3::z());
    for _ in 0..count {
        let x = rng.random_range(-0.5..=0.5) * size[0];
        let y = rng.random_range(-0.5..=0.5) * size[1];
        positions.push(pose.apply(&Vec3::new(x, y, 0.0)));
        normals.push(n);
    }
}

/// Uniform surface samples with analytic normals, `round(area * density)`
/// per primitive (per face for boxes). Deterministic in `spec.seed`.
pub fn sample_scene(spec: &SceneSpec) -> Result<PointCloud, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    for prim in &spec.primitives {
        match prim {
            Primitive::Plane { pose, size } => {
                let count = math::round(prim.area() * spec.density) as usize;
                sample_rectangle(&mut rng, pose, *size, count, &mut positions, &mut normals);
            }
            Primitive::Sphere { center, radius } => {
                let count = math::round(prim.area() * spec.density) as usize;
                for _ in 0..count {
                    let dir = unit_vector(&mut rng);
                    positions.push(center + dir * *radius);
                    normals.push(dir);
                }
            }
            Primitive::Cuboid { pose, half_extents: h } => {
                // faces as (local center, local rotation, size)
                let faces = cuboid_faces(h);
                for (offset, rot, size) in faces {
                    let face_pose = pose.compose(&RigidTransform::from_parts_unchecked(rot, offset));
                    let count = math::round(size[0] * size[1] * spec.density) as usize;
                    sample_rectangle(&mut rng, &face_pose, size, count, &mut positions, &mut normals);
                }
            }
        }
    }
    Ok(PointCloud::new(positions)
        .with_normals(normals)
        .expect("analytic normals are unit length"))
}

fn cuboid_faces(h: &Vec3) -> [(Vec3, Mat3, [f64; 2]); 6] {
    // columns: local x, local y, outward normal
    let frame = |x: Vec3, y: Vec3, n: Vec3| Mat3::from_columns(&[x, y, n]);
    let (ex, ey, ez) = (Vec3::x(), Vec3::y(), Vec3::z());
    [
        (ex * h.x, frame(ey, ez, ex), [2.0 * h.y, 2.0 * h.z]),
        (-ex * h.x, frame(ez, ey, -ex), [2.0 * h.z, 2.0 * h.y]),
        (ey * h.y, frame(ez, ex, ey), [2.0 * h.z, 2.0 * h.x]),
        (-ey * h.y, frame(ex, ez, -ey), [2.0 * h.x, 2.0 * h.z]),
        (ez * h.z, frame(ex, ey, ez), [2.0 * h.x, 2.0 * h.y]),
        (-ez * h.z, frame(ey, ex, -ez), [2.0 * h.y, 2.0 * h.x]),
    ]
}

/// Depth map seen by a camera at `pose` (camera to world; +Z forward, +X
/// right, +Y down). Depth is the camera-frame z of the nearest hit; misses are
/// invalid.
pub fn render_depth(scene: &SceneSpec, pose: &RigidTransform, intr: &PinholeIntrinsics) -> DepthMap {
    let origin = *pose.translation();
    let rows: Vec<Vec<f64>> = par::map_range(intr.height, |v| {
        (0..intr.width)
            .map(|u| {
                let dir = pose.rotate(&intr.ray(u as f64, v as f64));
                // the camera ray has unit z, so the ray parameter is the depth
                scene.cast(&origin, &dir).unwrap_or(f64::NAN)
            })
            .collect()
    });
    DepthMap::new(intr.width, intr.height, rows.into_iter().flatten().collect()).expect("ray hits are positive")
}

/// Adds zero-mean Gaussian noise to valid depths; samples pushed to
/// non-positive values become invalid.
pub fn add_depth_noise(depth: &DepthMap, sigma: f64, seed: u64) -> DepthMap {
    if sigma <= 0.0 {
        return depth.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = depth
        .data()
        .iter()
        .map(|&z| {
            let n = gaussian(&mut rng) * sigma;
            if z.is_nan() || z + n <= 0.0 {
                f64::NAN
            } else {
                z + n
            }
        })
        .collect();
    DepthMap::new(depth.width(), depth.height(), data).expect("noisy depth stays positive")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * PI * u2)
}

/// Uniform random intensities in `[0, 1)`.
pub fn random_texture(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(width, height, |_, _| rng.random()).expect("samples in [0, 1)")
}

/// `left = texture`; `right` is the texture shifted left by `disparity_px`
/// so that `right(u) = left(u + disparity_px)`. The trailing
/// `disparity_px` columns replicate the last column and carry no valid
/// correspondence.
pub fn make_stereo_pair(texture: &GrayImage, disparity_px: usize) -> Result<(GrayImage, GrayImage), SynthError> {
    let w = texture.width();
    if 2 * disparity_px >= w {
        return Err(SynthError::InvalidParameter("disparity must be below half the width"));
    }
    let right = GrayImage::from_fn(w, texture.height(), |u, v| texture.get((u + disparity_px).min(w - 1), v))
        .expect("copied samples are in range");
    Ok((texture.clone(), right))
}

/// Camera-to-world pose at `eye` looking at `target` with world +Z up.
pub fn look_at(eye: &Vec3, target: &Vec3) -> RigidTransform {
    let forward = (target - eye).normalize();
    let right = forward.cross(&Vec3::z()).normalize();
    let down = forward.cross(&right);
    RigidTransform::from_parts_unchecked(Mat3::from_columns(&[right, down, forward]), *eye)
}

/// Room footprint and height of the standard scene (meters).
pub const ROOM_SIZE: [f64; 3] = [4.0, 4.0, 2.5];

/// The standard room: floor and four walls of a 4 x 4 x 2.5 m room with two
/// boxes and a sphere on the floor. World +Z is up, the floor is `z = 0`.
pub fn standard_room(density: f64, seed: u64) -> SceneSpec {
    let [lx, ly, lz] = ROOM_SIZE;
    let placed = |rot: Mat3, t: Vec3| RigidTransform::from_parts_unchecked(rot, t);
    let (ex, ey, ez) = (Vec3::x(), Vec3::y(), Vec3::z());
    let frame = |x: Vec3, y: Vec3, n: Vec3| Mat3::from_columns(&[x, y, n]);
    let yaw = |deg: f64, t: Vec3| {
        let r = RigidTransform::rotation_z(deg * PI / 180.0);
        RigidTransform::from_parts_unchecked(*r.rotation(), t)
    };
    let primitives = alloc::vec![
        // floor, normal up
        Primitive::Plane { pose: placed(Mat3::identity(), Vec3::zeros()), size: [lx, ly] },
        // walls, normals facing inward
        Primitive::Plane { pose: placed(frame(ez, ey, -ex), Vec3::new(0.5 * lx, 0.0, 0.5 * lz)), size: [lz, ly] },
        Primitive::Plane { pose: placed(frame(ey, ez, ex), Vec3::new(-0.5 * lx, 0.0, 0.5 * lz)), size: [ly, lz] },
        Primitive::Plane { pose: placed(frame(ex, ez, -ey), Vec3::new(0.0, 0.5 * ly, 0.5 * lz)), size: [lx, lz] },
        Primitive::Plane { pose: placed(frame(ez, ex, ey), Vec3::new(0.0, -0.5 * ly, 0.5 * lz)), size: [lz, lx] },
        Primitive::Cuboid { pose: yaw(20.0, Vec3::new(0.6, -0.5, 0.35)), half_extents: Vec3::new(0.35, 0.25, 0.35) },
        Primitive::Cuboid { pose: yaw(-35.0, Vec3::new(-0.7, 0.3, 0.5)), half_extents: Vec3::new(0.2, 0.3, 0.5) },
        Primitive::Sphere { center: Vec3::new(0.2, 0.7, 0.4), radius: 0.4 },
    ];
    SceneSpec {
        primitives,
        density,
        seed,
    }
}

/// Six camera poses on a 2 m radius circle around the room center at 1.5 m
/// height, 20 degrees of yaw apart, all looking at `(0, 0, 0.5)`.
pub fn standard_trajectory() -> Vec<RigidTransform> {
    let target = Vec3::new(0.0, 0.0, 0.5);
    (0..6)
        .map(|k| {
            let angle = (-50.0 + 20.0 * k as f64) * PI / 180.0;
            let eye = Vec3::new(2.0 * math::cos(angle), 2.0 * math::sin(angle), 1.5);
            look_at(&eye, &target)
        })
        .collect()
}

/// 160 x 120 camera with a roughly 67 degree horizontal field of view.
pub fn standard_intrinsics() -> PinholeIntrinsics {
    PinholeIntrinsics::new(120.0, 120.0, 79.5, 59.5, 160, 120).expect("constants are valid")
}

/// Renders every pose and back-projects it into a camera-frame fragment.
pub fn render_fragments(scene: &SceneSpec, poses: &[RigidTransform], intr: &PinholeIntrinsics) -> Vec<PointCloud> {
    poses
        .iter()
        .map(|pose| backproject(&render_depth(scene, pose, intr), intr, None).expect("rendered depth matches intrinsics"))
        .collect()
}

/// Chains ground-truth relative motions, each perturbed on the right by a
/// rotation of exactly `rot_noise` radians and a translation of exactly
/// `trans_noise` meters in random directions.
pub fn noisy_odometry(ground_truth: &[RigidTransform], rot_noise: f64, trans_noise: f64, seed: u64) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<RigidTransform> = Vec::with_capacity(ground_truth.len());
    for (k, gt) in ground_truth.iter().enumerate() {
        if k == 0 {
            out.push(*gt);
            continue;
        }
        let rel = ground_truth[k - 1].inverse().compose(gt);
        let noise = RigidTransform::exp(&Twist::new(unit_vector(&mut rng) * rot_noise, Vec3::zeros()))
            .compose(&RigidTransform::from_translation(unit_vector(&mut rng) * trans_noise));
        out.push(out[k - 1].compose(&rel).compose(&noise));
    }
    out
}
