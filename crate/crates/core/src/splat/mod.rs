//! Differentiable grid-Gaussian rasterizer.
//!
//! Gaussians are projected with the affine (EWA) approximation, sorted once
//! per image by camera depth (ties by index), binned into square tiles and
//! alpha-composited front to back. [`render_reference`] is a naive per-pixel
//! loop over every Gaussian used as an oracle for the tiled path.

mod backward;
pub mod covariance;
mod forward;
mod reference;
pub mod sh;

use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::{CameraModel, GaussianGrid};

pub use backward::{render_backward, render_backward_with, Gradients};
pub use covariance::{camera_jacobian, conic, project_covariance, world_covariance};
pub use forward::{rasterize_projected, render, render_with};
pub use reference::{render_reference, render_reference_rows, render_reference_with};
pub use sh::eval_sh;

/// Rasterizer constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Isotropic blur added to every projected covariance (px²).
    pub blur: f64,
    /// Upper bound on a single Gaussian's alpha.
    pub alpha_cap: f64,
    /// Contributions with alpha below this are skipped. It also sets the
    /// screen-space cutoff radius, so tiling never drops a contribution the
    /// naive loop would keep. Zero disables both.
    pub min_alpha: f64,
    /// Gaussians at camera depth at or below this are culled (m).
    pub near: f64,
    /// A pixel counts as splatted when its alpha exceeds this.
    pub coverage_threshold: f64,
    pub tile_size: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            blur: 0.3,
            alpha_cap: 0.99,
            min_alpha: 1.0 / 255.0,
            near: 0.01,
            coverage_threshold: 1e-3,
            tile_size: 16,
        }
    }
}

/// Lower bound on the Mahalanobis cutoff radius.
pub const MIN_CUTOFF_SIGMAS: f64 = 3.0;

impl RenderConfig {
    /// Mahalanobis radius outside which a Gaussian of opacity `opacity`
    /// cannot reach `min_alpha`.
    pub fn cutoff_radius(&self, opacity: f64) -> f64 {
        if self.min_alpha <= 0.0 {
            return f64::INFINITY;
        }
        let r2 = 2.0 * (opacity / self.min_alpha).ln();
        if r2 > 0.0 {
            r2.sqrt().max(MIN_CUTOFF_SIGMAS)
        } else {
            MIN_CUTOFF_SIGMAS
        }
    }
}

/// A Gaussian after projection onto the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub source_index: usize,
    /// Mahalanobis cutoff radius.
    pub cutoff: f64,
}

impl ProjectedGaussian {
    /// Alpha at pixel centre `(x, y)` and the unclamped Gaussian falloff,
    /// or `None` when below the contribution threshold.
    #[inline]
    pub(crate) fn alpha_at(&self, x: f64, y: f64, cfg: &RenderConfig) -> Option<(f64, f64)> {
        let dx = x - self.mean2d[0];
        let dy = y - self.mean2d[1];
        let [a, b, c] = self.conic;
        let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        // Beyond the cutoff radius alpha is below `min_alpha` anyway; this
        // skips the exponential for most pixel and Gaussian pairs.
        if q > self.cutoff * self.cutoff {
            return None;
        }
        let power = -0.5 * q;
        if power > 0.0 {
            return None;
        }
        let falloff = power.exp();
        let alpha = (self.opacity * falloff).min(cfg.alpha_cap);
        if alpha < cfg.min_alpha || alpha <= 0.0 {
            return None;
        }
        Some((alpha, falloff))
    }

    /// Inclusive pixel bounds of the cutoff ellipse clipped to the image.
    pub(crate) fn pixel_bounds(&self, width: usize, height: usize) -> Option<[usize; 4]> {
        let (w, h) = (width as f64, height as f64);
        let (x0, x1, y0, y1) = if self.cutoff.is_finite() {
            let ex = self.cutoff * self.cov2d[(0, 0)].sqrt() * (1.0 + 1e-9);
            let ey = self.cutoff * self.cov2d[(1, 1)].sqrt() * (1.0 + 1e-9);
            (
                (self.mean2d[0] - ex).ceil(),
                (self.mean2d[0] + ex).floor(),
                (self.mean2d[1] - ey).ceil(),
                (self.mean2d[1] + ey).floor(),
            )
        } else {
            (0.0, w - 1.0, 0.0, h - 1.0)
        };
        let x0 = x0.max(0.0);
        let y0 = y0.max(0.0);
        let x1 = x1.min(w - 1.0);
        let y1 = y1.min(h - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some([x0 as usize, x1 as usize, y0 as usize, y1 as usize])
    }
}

/// Rendered image with alpha, expected depth and coverage mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub alpha: Image,
    pub depth: Image,
    pub coverage: Vec<bool>,
}

impl RenderOutput {
    pub(crate) fn from_pixels(
        width: usize,
        height: usize,
        pixels: impl Iterator<Item = PixelResult>,
        cfg: &RenderConfig,
    ) -> Self {
        let mut rgb = Image::new(width, height, 3);
        let mut alpha = Image::new(width, height, 1);
        let mut depth = Image::new(width, height, 1);
        let mut coverage = vec![false; width * height];
        for (i, px) in pixels.enumerate() {
            rgb.data[3 * i..3 * i + 3].copy_from_slice(&px.rgb);
            let a = 1.0 - px.transmittance;
            alpha.data[i] = a;
            depth.data[i] = if px.weight_sum > 0.0 {
                px.depth_sum / px.weight_sum
            } else {
                0.0
            };
            coverage[i] = a > cfg.coverage_threshold;
        }
        RenderOutput {
            rgb,
            alpha,
            depth,
            coverage,
        }
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelResult {
    pub rgb: [f64; 3],
    pub transmittance: f64,
    pub depth_sum: f64,
    pub weight_sum: f64,
}

impl Default for PixelResult {
    fn default() -> Self {
        PixelResult {
            rgb: [0.0; 3],
            transmittance: 1.0,
            depth_sum: 0.0,
            weight_sum: 0.0,
        }
    }
}

pub(crate) fn check_inputs(grid: &GaussianGrid, cam: &CameraModel) -> Result<()> {
    cam.validate()?;
    let n = grid.elevation.values.len();
    if grid.sh.len() != n || grid.rotation.len() != n || grid.opacity.len() != n {
        return Err(Error::shape(
            format!("{n} entries per Gaussian field"),
            format!(
                "sh {}, rotation {}, opacity {}",
                grid.sh.len(),
                grid.rotation.len(),
                grid.opacity.len()
            ),
        ));
    }
    Ok(())
}

/// Projects Gaussian `i`; `None` if it lies at or in front of the near plane
/// or its screen-space covariance is degenerate.
pub fn project_gaussian(
    grid: &GaussianGrid,
    cam: &CameraModel,
    cam_center: &Vector3<f64>,
    cfg: &RenderConfig,
    i: usize,
) -> Option<ProjectedGaussian> {
    let mu = grid.center(i);
    let t = cam.to_camera(&mu);
    if !(t.z > cfg.near) {
        return None;
    }
    let sigma = covariance::covariance_unchecked(&grid.scale, &grid.rotation[i]);
    let jac = camera_jacobian(&t, cam);
    let cov2d = project_covariance(&sigma, &cam.rotation, &jac, cfg.blur);
    let conic = conic(&cov2d)?;
    let (u, v) = cam.project_cam(&t);
    let dir = (mu - cam_center).normalize();
    let color = eval_sh(&grid.sh[i], &dir);
    let opacity = grid.opacity[i];
    Some(ProjectedGaussian {
        mean2d: [u, v],
        cov2d,
        conic,
        depth: t.z,
        color,
        opacity,
        source_index: i,
        cutoff: cfg.cutoff_radius(opacity),
    })
}

/// Projects every Gaussian and sorts front to back (ties by index).
pub fn project_sorted(
    grid: &GaussianGrid,
    cam: &CameraModel,
    cfg: &RenderConfig,
) -> Vec<ProjectedGaussian> {
    let center = cam.center();
    let mut out: Vec<ProjectedGaussian> = (0..grid.len())
        .into_par_iter()
        .filter_map(|i| project_gaussian(grid, cam, &center, cfg, i))
        .collect();
    out.par_sort_unstable_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.source_index.cmp(&b.source_index))
    });
    out
}

/// Depth order of visible Gaussians as source indices.
pub fn depth_order(grid: &GaussianGrid, cam: &CameraModel, cfg: &RenderConfig) -> Vec<usize> {
    project_sorted(grid, cam, cfg)
        .into_iter()
        .map(|g| g.source_index)
        .collect()
}
