//! Pipeline settings: built-in defaults, then a `key = value` config file,
//! then command-line flags. Everything is validated before a stage runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use clap::Args;
use recon3d_core::posegraph::{BuildParams, MultiwayParams, OptimizeParams};
use recon3d_core::registration::{IcpParams, PairwiseParams};
use recon3d_core::stereo::{BlockMatchParams, StereoRig};
use recon3d_core::PinholeIntrinsics;

use crate::io::{content_lines, read_text, FormatError};

/// Tuning flags shared by every subcommand. Each may also be set in the
/// config file under the same name without the leading dashes.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Focal length in pixels (fx = fy)
    #[arg(long, global = true)]
    pub focal_px: Option<f64>,
    /// Stereo baseline in meters
    #[arg(long, global = true)]
    pub baseline_m: Option<f64>,
    /// Principal point x in pixels [default: image center]
    #[arg(long, global = true)]
    pub cx: Option<f64>,
    /// Principal point y in pixels [default: image center]
    #[arg(long, global = true)]
    pub cy: Option<f64>,
    /// Block-matching window radius
    #[arg(long, global = true)]
    pub block_radius: Option<usize>,
    /// Largest disparity searched, in pixels
    #[arg(long, global = true)]
    pub max_disparity: Option<usize>,
    /// Uniqueness ratio in (0, 1]; lower is stricter
    #[arg(long, global = true)]
    pub uniqueness: Option<f64>,
    /// Smallest disparity converted to depth, in pixels
    #[arg(long, global = true)]
    pub min_disparity: Option<f64>,
    /// Coarse registration voxel size in meters
    #[arg(long, global = true)]
    pub voxel_coarse: Option<f64>,
    /// Fine registration and integration voxel size in meters
    #[arg(long, global = true)]
    pub voxel_fine: Option<f64>,
    /// ICP correspondence distance in meters
    #[arg(long, global = true)]
    pub max_corr: Option<f64>,
    /// ICP iteration limit
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    /// ICP relative RMSE change that counts as converged
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Loop closures are tried between fragments up to this many apart
    #[arg(long, global = true)]
    pub loop_window: Option<usize>,
    /// Extra build-and-optimize rounds in multiway registration
    #[arg(long, global = true)]
    pub refine_rounds: Option<usize>,
    /// Worker threads [default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for synthetic data
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Depth image units per meter
    #[arg(long, global = true)]
    pub depth_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub focal_px: f64,
    pub baseline_m: f64,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub block_radius: usize,
    pub max_disparity: usize,
    pub uniqueness: f64,
    pub min_disparity: f64,
    pub voxel_coarse: f64,
    pub voxel_fine: f64,
    pub max_corr: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub loop_window: usize,
    pub refine_rounds: usize,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub depth_scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let block = BlockMatchParams::default();
        let pairwise = PairwiseParams::default();
        let icp = IcpParams::default();
        let build = BuildParams::default();
        Self {
            focal_px: 120.0,
            baseline_m: 0.1,
            cx: None,
            cy: None,
            block_radius: block.block_radius,
            max_disparity: block.max_disparity,
            uniqueness: block.uniqueness_ratio,
            min_disparity: 1.0,
            voxel_coarse: pairwise.coarse_voxel,
            voxel_fine: pairwise.fine_voxel,
            max_corr: icp.max_correspondence_dist,
            max_iters: icp.max_iterations,
            tol: icp.rel_rmse_tol,
            loop_window: build.loop_window,
            refine_rounds: MultiwayParams::default().refine_rounds,
            threads: None,
            seed: None,
            depth_scale: crate::io::image::DEFAULT_DEPTH_SCALE,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid setting `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        reason: reason.into(),
    }
}

fn parse_value<T: FromStr>(value: &str, line: usize, key: &str) -> Result<T, FormatError> {
    value
        .parse()
        .map_err(|_| FormatError::at_line(line, format!("bad value `{value}` for `{key}`")))
}

impl PipelineConfig {
    /// Defaults, then `file`, then `flags`; validated.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        if let Some(path) = file {
            config.apply_text(&read_text(path)?)?;
        }
        config.apply_overrides(flags);
        config.validate()?;
        Ok(config)
    }

    /// Applies `key = value` lines. Keys use the flag names, with dashes or
    /// underscores.
    pub fn apply_text(&mut self, text: &str) -> Result<(), FormatError> {
        let mut seen = BTreeMap::new();
        for (line, content) in content_lines(text) {
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| FormatError::at_line(line, "expected `key = value`"))?;
            let key = key.trim().replace('_', "-");
            let value = value.trim();
            if let Some(first) = seen.insert(key.clone(), line) {
                return Err(FormatError::at_line(line, format!("`{key}` already set on line {first}")));
            }
            let k = key.as_str();
            match k {
                "focal-px" => self.focal_px = parse_value(value, line, k)?,
                "baseline-m" => self.baseline_m = parse_value(value, line, k)?,
                "cx" => self.cx = Some(parse_value(value, line, k)?),
                "cy" => self.cy = Some(parse_value(value, line, k)?),
                "block-radius" => self.block_radius = parse_value(value, line, k)?,
                "max-disparity" => self.max_disparity = parse_value(value, line, k)?,
                "uniqueness" => self.uniqueness = parse_value(value, line, k)?,
                "min-disparity" => self.min_disparity = parse_value(value, line, k)?,
                "voxel-coarse" => self.voxel_coarse = parse_value(value, line, k)?,
                "voxel-fine" => self.voxel_fine = parse_value(value, line, k)?,
                "max-corr" => self.max_corr = parse_value(value, line, k)?,
                "max-iters" => self.max_iters = parse_value(value, line, k)?,
                "tol" => self.tol = parse_value(value, line, k)?,
                "loop-window" => self.loop_window = parse_value(value, line, k)?,
                "refine-rounds" => self.refine_rounds = parse_value(value, line, k)?,
                "threads" => self.threads = Some(parse_value(value, line, k)?),
                "seed" => self.seed = Some(parse_value(value, line, k)?),
                "depth-scale" => self.depth_scale = parse_value(value, line, k)?,
                _ => return Err(FormatError::at_line(line, format!("unknown setting `{key}`"))),
            }
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        fn set<T: Copy>(slot: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *slot = v;
            }
        }
        set(&mut self.focal_px, o.focal_px);
        set(&mut self.baseline_m, o.baseline_m);
        self.cx = o.cx.or(self.cx);
        self.cy = o.cy.or(self.cy);
        set(&mut self.block_radius, o.block_radius);
        set(&mut self.max_disparity, o.max_disparity);
        set(&mut self.uniqueness, o.uniqueness);
        set(&mut self.min_disparity, o.min_disparity);
        set(&mut self.voxel_coarse, o.voxel_coarse);
        set(&mut self.voxel_fine, o.voxel_fine);
        set(&mut self.max_corr, o.max_corr);
        set(&mut self.max_iters, o.max_iters);
        set(&mut self.tol, o.tol);
        set(&mut self.loop_window, o.loop_window);
        set(&mut self.refine_rounds, o.refine_rounds);
        self.threads = o.threads.or(self.threads);
        self.seed = o.seed.or(self.seed);
        set(&mut self.depth_scale, o.depth_scale);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(invalid(key, format!("{x} must be positive")))
            }
        };
        positive("focal-px", self.focal_px)?;
        positive("baseline-m", self.baseline_m)?;
        for (key, c) in [("cx", self.cx), ("cy", self.cy)] {
            if c.is_some_and(|c| !c.is_finite()) {
                return Err(invalid(key, "must be finite"));
            }
        }
        if !(1..=15).contains(&self.block_radius) {
            return Err(invalid("block-radius", "must be in 1..=15"));
        }
        if self.max_disparity == 0 {
            return Err(invalid("max-disparity", "must be at least 1"));
        }
        if !(self.uniqueness > 0.0 && self.uniqueness <= 1.0) {
            return Err(invalid("uniqueness", "must be in (0, 1]"));
        }
        positive("min-disparity", self.min_disparity)?;
        positive("voxel-fine", self.voxel_fine)?;
        positive("voxel-coarse", self.voxel_coarse)?;
        if self.voxel_coarse <= self.voxel_fine {
            return Err(invalid("voxel-coarse", "must exceed voxel-fine"));
        }
        self.icp().validate().map_err(|e| invalid("max-corr/max-iters/tol", e.to_string()))?;
        if self.threads == Some(0) {
            return Err(invalid("threads", "must be at least 1"));
        }
        positive("depth-scale", self.depth_scale)?;
        Ok(())
    }

    pub fn block_match(&self) -> BlockMatchParams {
        BlockMatchParams {
            block_radius: self.block_radius,
            max_disparity: self.max_disparity,
            uniqueness_ratio: self.uniqueness,
        }
    }

    /// Camera for a `width x height` image; the principal point defaults to
    /// the image center.
    pub fn intrinsics(&self, width: usize, height: usize) -> anyhow::Result<PinholeIntrinsics> {
        let cx = self.cx.unwrap_or((width as f64 - 1.0) / 2.0);
        let cy = self.cy.unwrap_or((height as f64 - 1.0) / 2.0);
        Ok(PinholeIntrinsics::new(self.focal_px, self.focal_px, cx, cy, width, height)?)
    }

    pub fn rig(&self, width: usize, height: usize) -> anyhow::Result<StereoRig> {
        let intr = self.intrinsics(width, height)?;
        Ok(StereoRig::new(self.focal_px, self.baseline_m, intr.cx, intr.cy)?)
    }

    pub fn icp(&self) -> IcpParams {
        IcpParams {
            max_correspondence_dist: self.max_corr,
            max_iterations: self.max_iters,
            rel_rmse_tol: self.tol,
            ..IcpParams::default()
        }
    }

    pub fn multiway(&self) -> MultiwayParams {
        let pairwise = PairwiseParams {
            coarse_voxel: self.voxel_coarse,
            fine_voxel: self.voxel_fine,
            icp: self.icp(),
            ..PairwiseParams::default()
        };
        MultiwayParams {
            build: BuildParams {
                loop_window: self.loop_window,
                pairwise,
                ..BuildParams::default()
            },
            optimize: OptimizeParams::default(),
            refine_rounds: self.refine_rounds,
            integrate_voxel: self.voxel_fine,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Location;

    #[test]
    fn file_then_flags() {
        let mut c = PipelineConfig::default();
        c.apply_text("# rig\nfocal_px = 500\nbaseline-m = 0.2 # meters\nmax-iters = 12\n").unwrap();
        c.apply_overrides(&Overrides {
            focal_px: Some(600.0),
            ..Default::default()
        });
        assert_eq!((c.focal_px, c.baseline_m, c.max_iters), (600.0, 0.2, 12));
        c.validate().unwrap();
    }

    #[test]
    fn bad_lines_are_located() {
        let cases = [("colour = red\n", 1), ("tol = 1e-6\nfocal-px\n", 2), ("max-iters = -1\n", 1), ("tol = 1\ntol = 2\n", 2)];
        for (text, line) in cases {
            let err = PipelineConfig::default().apply_text(text).unwrap_err();
            assert_eq!(err.location(), Some(Location::Line(line)), "{text}");
        }
    }

    #[test]
    fn validation_rejects_out_of_range_values() {
        let bad: [fn(&mut PipelineConfig); 7] = [
            |c| c.focal_px = 0.0,
            |c| c.block_radius = 0,
            |c| c.uniqueness = 1.5,
            |c| c.voxel_coarse = c.voxel_fine,
            |c| c.max_corr = -1.0,
            |c| c.threads = Some(0),
            |c| c.depth_scale = f64::NAN,
        ];
        for f in bad {
            let mut c = PipelineConfig::default();
            f(&mut c);
            assert!(c.validate().is_err(), "{c:?}");
        }
        PipelineConfig::default().validate().unwrap();
    }
}
