//! Subcommands of the `recon3d` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use recon3d_core::cloud::{self, align_scale_shift, backproject, estimate_normals};
use recon3d_core::math::Vec3;
use recon3d_core::posegraph::multiway_register;
use recon3d_core::registration::{icp_point_to_plane, icp_point_to_point, IcpResult};
use recon3d_core::stereo::{compute_disparity, disparity_to_depth};
use recon3d_core::synth::{self, SceneSpec};
use recon3d_core::{DepthMap, PointCloud, RigidTransform};

use crate::config::{Overrides, PipelineConfig};
use crate::io::{self, image, graph_file, PlyEncoding, Trajectory};

#[derive(Debug, Parser)]
#[command(name = "recon3d", version, about = "Stereo depth, point-cloud registration and multiway fusion")]
pub struct Cli {
    /// `key = value` settings file, overridden by flags
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// More log output on stderr (repeatable)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Disparity and depth from a rectified stereo pair
    Disparity {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// 8-bit normalized disparity image
        #[arg(long)]
        out_disparity: Option<PathBuf>,
        /// 16-bit depth image
        #[arg(long)]
        out_depth: PathBuf,
    },
    /// Point cloud from a depth image
    Backproject {
        #[arg(long)]
        depth: PathBuf,
        /// RGB image aligned with the depth image
        #[arg(long)]
        color: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ascii: bool,
    },
    /// Register a source cloud onto a target cloud
    Icp {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Plane)]
        method: Method,
        /// Source cloud moved into the target frame
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        ascii: bool,
    },
    /// Pose-graph registration and fusion of camera-frame fragments
    Multiway {
        /// Directory of camera-frame fragment PLY files, taken in file-name order
        #[arg(long)]
        fragments: PathBuf,
        /// Initial camera poses, one per fragment
        #[arg(long)]
        odometry: PathBuf,
        /// Receives trajectory.txt, pose_graph.txt and merged.ply
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ascii: bool,
    },
    /// Generate depth maps, fragments and trajectories from a scene file
    Synth {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Gaussian depth noise in meters
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        /// Per-step odometry rotation error in degrees
        #[arg(long, default_value_t = 0.0)]
        odometry_rot_deg: f64,
        /// Per-step odometry translation error in meters
        #[arg(long, default_value_t = 0.0)]
        odometry_trans_m: f64,
        /// Also write a 320x240 random-texture stereo pair with this shift
        #[arg(long)]
        stereo_shift: Option<usize>,
    },
    /// Fit scale and shift of a relative depth image to a metric one
    AlignDepth {
        #[arg(long)]
        relative: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Depth (from stereo pairs or depth images), fragments and fusion in one run
    Pipeline {
        /// Directory holding left_*/right_* pairs or depth_* images
        #[arg(long)]
        input: PathBuf,
        /// Initial poses [default: <input>/odometry.txt]
        #[arg(long)]
        odometry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ascii: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Plane,
    Point,
}

fn encoding(ascii: bool) -> PlyEncoding {
    if ascii {
        PlyEncoding::Ascii
    } else {
        PlyEncoding::BinaryLittleEndian
    }
}

/// Runs a parsed command line; text for standard output is returned.
pub fn run(cli: &Cli) -> Result<String> {
    let config = PipelineConfig::resolve(cli.config.as_deref(), &cli.overrides).context("invalid configuration")?;
    let threads = config.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("cannot start worker threads")?;
    pool.install(|| dispatch(&cli.command, &config))
}

fn dispatch(command: &Command, config: &PipelineConfig) -> Result<String> {
    match command {
        Command::Disparity {
            left,
            right,
            out_disparity,
            out_depth,
        } => {
            let depth = stereo_depth(left, right, out_disparity.as_deref(), config)?;
            image::write_depth(out_depth, &depth, config.depth_scale)?;
            Ok(format!("valid_pixels {}\n", depth.valid_count()))
        }
        Command::Backproject { depth, color, out, ascii } => {
            let depth = image::read_depth(depth, config.depth_scale)?;
            let color = color.as_deref().map(image::read_rgb).transpose()?;
            let intr = config.intrinsics(depth.width(), depth.height())?;
            let cloud = backproject(&depth, &intr, color.as_ref())?;
            io::write_ply(&cloud, out, encoding(*ascii))?;
            Ok(format!("points {}\n", cloud.len()))
        }
        Command::Icp {
            source,
            target,
            method,
            out,
            ascii,
        } => cmd_icp(source, target, *method, out.as_deref(), *ascii, config),
        Command::Multiway {
            fragments,
            odometry,
            out,
            ascii,
        } => {
            let fragments = read_fragments(fragments)?;
            let odometry = io::read_trajectory(odometry)?.poses();
            fuse(&fragments, &odometry, out, *ascii, config)
        }
        Command::Synth {
            scene,
            out,
            noise_sigma,
            odometry_rot_deg,
            odometry_trans_m,
            stereo_shift,
        } => {
            let mut spec = io::read_scene(scene)?;
            if let Some(seed) = config.seed {
                spec.seed = seed;
            }
            let noise = SynthNoise {
                depth_sigma: *noise_sigma,
                rot: odometry_rot_deg.to_radians(),
                trans: *odometry_trans_m,
                stereo_shift: *stereo_shift,
            };
            cmd_synth(&spec, out, &noise, config)
        }
        Command::AlignDepth { relative, reference, out } => {
            let relative = image::read_depth(relative, config.depth_scale)?;
            let reference = image::read_depth(reference, config.depth_scale)?;
            let fit = align_scale_shift(&relative, &reference)?;
            image::write_depth(out, &fit.aligned, config.depth_scale)?;
            Ok(format!("scale {}\nshift {}\n", fit.scale, fit.shift))
        }
        Command::Pipeline {
            input,
            odometry,
            out,
            ascii,
        } => cmd_pipeline(input, odometry.as_deref(), out, *ascii, config),
    }
}

fn stereo_depth(left: &Path, right: &Path, out_disparity: Option<&Path>, config: &PipelineConfig) -> Result<DepthMap> {
    let left = image::read_gray(left).with_context(|| format!("reading {}", left.display()))?;
    let right = image::read_gray(right).with_context(|| format!("reading {}", right.display()))?;
    let disp = compute_disparity(&left, &right, &config.block_match())?;
    if let Some(path) = out_disparity {
        image::write_raster(path, &image::disparity_visualization(&disp))?;
    }
    let rig = config.rig(left.width(), left.height())?;
    Ok(disparity_to_depth(&disp, &rig, config.min_disparity)?)
}

fn format_transform(t: &RigidTransform) -> String {
    let m = t.to_row_major();
    let mut s = String::new();
    for row in m.chunks(4) {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

fn icp_report(r: &IcpResult) -> String {
    let mut s = String::from("transform\n");
    s.push_str(&format_transform(&r.transform));
    writeln!(s, "fitness {}", r.fitness).unwrap();
    writeln!(s, "inlier_rmse {}", r.inlier_rmse).unwrap();
    writeln!(s, "iterations {}", r.iterations).unwrap();
    writeln!(s, "converged {}", r.converged).unwrap();
    s
}

fn cmd_icp(source: &Path, target: &Path, method: Method, out: Option<&Path>, ascii: bool, config: &PipelineConfig) -> Result<String> {
    let src = io::read_ply(source)?;
    let mut tgt = io::read_ply(target)?;
    let init = RigidTransform::identity();
    let result = match method {
        Method::Plane => {
            if tgt.normals().is_none() {
                let k = cloud::DEFAULT_NORMAL_NEIGHBORS.min(tgt.len().saturating_sub(1));
                tgt = estimate_normals(&tgt, k, &Vec3::zeros()).context("estimating target normals")?;
            }
            icp_point_to_plane(&src, &tgt, &init, &config.icp())?
        }
        Method::Point => icp_point_to_point(&src, &tgt, &init, &config.icp())?,
    };
    if let Some(path) = out {
        io::write_ply(&src.transformed(&result.transform), path, encoding(ascii))?;
    }
    Ok(icp_report(&result))
}

fn read_fragments(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")));
    paths.sort();
    if paths.is_empty() {
        bail!("no .ply fragments in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| io::read_ply(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn fuse(fragments: &[PointCloud], odometry: &[RigidTransform], out: &Path, ascii: bool, config: &PipelineConfig) -> Result<String> {
    if fragments.len() != odometry.len() {
        bail!("{} fragments but {} odometry poses", fragments.len(), odometry.len());
    }
    // the graph is anchored at the first camera
    let anchor = odometry[0].inverse();
    let relative: Vec<RigidTransform> = odometry.iter().map(|p| anchor.compose(p)).collect();
    let result = multiway_register(fragments, &relative, &config.multiway())?;
    let poses: Vec<RigidTransform> = result.optimized.nodes().iter().map(|n| odometry[0].compose(n)).collect();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_trajectory(&out.join("trajectory.txt"), &Trajectory::from_poses(&poses))?;
    graph_file::write_pose_graph(&out.join("pose_graph.txt"), &result.optimized)?;
    let merged = result.merged.transformed(&odometry[0]);
    io::write_ply(&merged, &out.join("merged.ply"), encoding(ascii))?;
    info!("fused {} fragments into {} points", fragments.len(), merged.len());
    Ok(format!(
        "fragments {}\nedges {}\nmerged_points {}\n",
        fragments.len(),
        result.optimized.edges().len(),
        merged.len()
    ))
}

struct SynthNoise {
    depth_sigma: f64,
    rot: f64,
    trans: f64,
    stereo_shift: Option<usize>,
}

fn cmd_synth(spec: &SceneSpec, out: &Path, noise: &SynthNoise, config: &PipelineConfig) -> Result<String> {
    spec.validate()?;
    if !(noise.depth_sigma >= 0.0 && noise.rot >= 0.0 && noise.trans >= 0.0) {
        bail!("noise levels must be non-negative");
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let poses = synth::standard_trajectory();
    let standard = synth::standard_intrinsics();
    let intr = recon3d_core::PinholeIntrinsics::new(
        config.focal_px,
        config.focal_px,
        config.cx.unwrap_or(standard.cx),
        config.cy.unwrap_or(standard.cy),
        standard.width,
        standard.height,
    )?;
    io::write_ply(&synth::sample_scene(spec)?, &out.join("scene.ply"), PlyEncoding::BinaryLittleEndian)?;
    let fragment_dir = out.join("fragments");
    std::fs::create_dir_all(&fragment_dir).with_context(|| format!("creating {}", fragment_dir.display()))?;
    for (k, pose) in poses.iter().enumerate() {
        let mut depth = synth::render_depth(spec, pose, &intr);
        if noise.depth_sigma > 0.0 {
            depth = synth::add_depth_noise(&depth, noise.depth_sigma, spec.seed.wrapping_add(k as u64));
        }
        image::write_depth(&out.join(format!("depth_{k:03}.png")), &depth, config.depth_scale)?;
        let fragment = backproject(&depth, &intr, None)?;
        io::write_ply(&fragment, &fragment_dir.join(format!("fragment_{k:03}.ply")), PlyEncoding::BinaryLittleEndian)?;
    }
    io::write_trajectory(&out.join("groundtruth.txt"), &Trajectory::from_poses(&poses))?;
    let odometry = synth::noisy_odometry(&poses, noise.rot, noise.trans, spec.seed);
    io::write_trajectory(&out.join("odometry.txt"), &Trajectory::from_poses(&odometry))?;
    let camera = format!(
        "# camera used to render the depth images\nfocal-px = {}\ncx = {}\ncy = {}\ndepth-scale = {}\n",
        intr.fx, intr.cx, intr.cy, config.depth_scale
    );
    std::fs::write(out.join("camera.cfg"), camera).context("writing camera.cfg")?;
    if let Some(shift) = noise.stereo_shift {
        let texture = synth::random_texture(320, 240, spec.seed);
        let (left, right) = synth::make_stereo_pair(&texture, shift)?;
        image::write_gray(&out.join("left_000.png"), &left)?;
        image::write_gray(&out.join("right_000.png"), &right)?;
    }
    Ok(format!("views {}\n", poses.len()))
}

fn numbered_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"));
        if name.starts_with(prefix) && is_image {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_pipeline(input: &Path, odometry: Option<&Path>, out: &Path, ascii: bool, config: &PipelineConfig) -> Result<String> {
    let lefts = numbered_files(input, "left_")?;
    let rights = numbered_files(input, "right_")?;
    let depth_files = numbered_files(input, "depth_")?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let depths: Vec<DepthMap> = if !lefts.is_empty() {
        if lefts.len() != rights.len() {
            bail!("{} left images but {} right images", lefts.len(), rights.len());
        }
        let mut depths = Vec::new();
        for (k, (l, r)) in lefts.iter().zip(&rights).enumerate() {
            let depth = stereo_depth(l, r, Some(&out.join(format!("disparity_{k:03}.png"))), config)?;
            image::write_depth(&out.join(format!("depth_{k:03}.png")), &depth, config.depth_scale)?;
            depths.push(depth);
        }
        depths
    } else if !depth_files.is_empty() {
        depth_files
            .iter()
            .map(|p| image::read_depth(p, config.depth_scale).with_context(|| format!("reading {}", p.display())))
            .collect::<Result<_>>()?
    } else {
        bail!("{} holds no left_*/right_* pairs and no depth_* images", input.display());
    };
    let mut fragments = Vec::new();
    for (k, depth) in depths.iter().enumerate() {
        let intr = config.intrinsics(depth.width(), depth.height())?;
        let fragment = backproject(depth, &intr, None)?;
        io::write_ply(&fragment, &out.join(format!("fragment_{k:03}.ply")), encoding(ascii))?;
        fragments.push(fragment);
    }
    let odometry_path = odometry.map(Path::to_path_buf).unwrap_or_else(|| input.join("odometry.txt"));
    let odometry = if odometry_path.exists() || fragments.len() > 1 {
        io::read_trajectory(&odometry_path)?.poses()
    } else {
        vec![RigidTransform::identity()]
    };
    if odometry.len() < fragments.len() {
        bail!("{} fragments but only {} odometry poses", fragments.len(), odometry.len());
    }
    fuse(&fragments, &odometry[..fragments.len()], out, ascii, config)
}
