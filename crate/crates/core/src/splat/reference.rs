//! Naive renderer: every pixel walks the full depth-sorted list.

use super::{check_inputs, project_sorted, PixelResult, RenderConfig, RenderOutput};
use crate::error::Result;
use crate::scene::{CameraModel, GaussianGrid};

pub fn render_reference(grid: &GaussianGrid, cam: &CameraModel) -> Result<RenderOutput> {
    render_reference_with(grid, cam, &RenderConfig::default())
}

pub fn render_reference_with(
    grid: &GaussianGrid,
    cam: &CameraModel,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    render_reference_rows(grid, cam, cfg, 0..cam.height)
}

/// Reference render restricted to pixel rows `rows`; other rows stay empty.
pub fn render_reference_rows(
    grid: &GaussianGrid,
    cam: &CameraModel,
    cfg: &RenderConfig,
    rows: std::ops::Range<usize>,
) -> Result<RenderOutput> {
    check_inputs(grid, cam)?;
    let sorted = project_sorted(grid, cam, cfg);
    let (width, height) = (cam.width, cam.height);
    let mut pixels = vec![PixelResult::default(); width * height];
    for y in rows.start..rows.end.min(height) {
        for x in 0..width {
            let (px, py) = (x as f64, y as f64);
            let mut acc = PixelResult::default();
            for g in &sorted {
                let dx = px - g.mean2d[0];
                let dy = py - g.mean2d[1];
                let q = g.conic[0] * dx * dx + 2.0 * g.conic[1] * dx * dy + g.conic[2] * dy * dy;
                let alpha = (g.opacity * (-0.5 * q).exp()).min(cfg.alpha_cap);
                if alpha < cfg.min_alpha || alpha <= 0.0 {
                    continue;
                }
                let w = alpha * acc.transmittance;
                for c in 0..3 {
                    acc.rgb[c] += w * g.color[c];
                }
                acc.depth_sum += w * g.depth;
                acc.weight_sum += w;
                acc.transmittance *= 1.0 - alpha;
            }
            pixels[y * width + x] = acc;
        }
    }
    Ok(RenderOutput::from_pixels(
        width,
        height,
        pixels.into_iter(),
        cfg,
    ))
}
