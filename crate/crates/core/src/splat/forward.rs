use rayon::prelude::*;

use super::{
    check_inputs, project_sorted, PixelResult, ProjectedGaussian, RenderConfig, RenderOutput,
};
use crate::error::Result;
use crate::scene::{CameraModel, GaussianGrid};

/// Per-tile lists of indices into the depth-sorted projection, each list
/// itself in depth order.
pub(crate) struct TileBins {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub offsets: Vec<usize>,
    pub entries: Vec<u32>,
}

impl TileBins {
    pub fn build(
        projected: &[ProjectedGaussian],
        width: usize,
        height: usize,
        tile_size: usize,
    ) -> Self {
        let tiles_x = width.div_ceil(tile_size);
        let tiles_y = height.div_ceil(tile_size);
        let bounds: Vec<Option<[usize; 4]>> = projected
            .par_iter()
            .map(|g| {
                g.pixel_bounds(width, height).map(|[x0, x1, y0, y1]| {
                    [
                        x0 / tile_size,
                        x1 / tile_size,
                        y0 / tile_size,
                        y1 / tile_size,
                    ]
                })
            })
            .collect();
        let mut counts = vec![0usize; tiles_x * tiles_y + 1];
        for b in bounds.iter().flatten() {
            for ty in b[2]..=b[3] {
                for tx in b[0]..=b[1] {
                    counts[ty * tiles_x + tx + 1] += 1;
                }
            }
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let offsets = counts;
        let mut cursor = offsets.clone();
        let mut entries = vec![0u32; *offsets.last().unwrap()];
        for (gi, b) in bounds.iter().enumerate() {
            let Some(b) = b else { continue };
            for ty in b[2]..=b[3] {
                for tx in b[0]..=b[1] {
                    let t = ty * tiles_x + tx;
                    entries[cursor[t]] = gi as u32;
                    cursor[t] += 1;
                }
            }
        }
        TileBins {
            tile_size,
            tiles_x,
            tiles_y,
            offsets,
            entries,
        }
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    pub fn list(&self, tile: usize) -> &[u32] {
        &self.entries[self.offsets[tile]..self.offsets[tile + 1]]
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` of a tile.
    pub fn rect(&self, tile: usize, width: usize, height: usize) -> [usize; 4] {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        [
            x0,
            (x0 + self.tile_size).min(width),
            y0,
            (y0 + self.tile_size).min(height),
        ]
    }
}

/// Renders the scene. Gaussians only touch pixels within their cutoff box.
pub fn render(grid: &GaussianGrid, cam: &CameraModel) -> Result<RenderOutput> {
    render_with(grid, cam, &RenderConfig::default())
}

pub fn render_with(
    grid: &GaussianGrid,
    cam: &CameraModel,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    check_inputs(grid, cam)?;
    let projected = project_sorted(grid, cam, cfg);
    Ok(rasterize(&projected, cam.width, cam.height, cfg))
}

/// Sorts an arbitrary list of projected Gaussians front to back and
/// composites it.
pub fn rasterize_projected(
    mut projected: Vec<ProjectedGaussian>,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> RenderOutput {
    projected.sort_unstable_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.source_index.cmp(&b.source_index))
    });
    rasterize(&projected, width, height, cfg)
}

pub(crate) fn rasterize(
    projected: &[ProjectedGaussian],
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> RenderOutput {
    let bins = TileBins::build(projected, width, height, cfg.tile_size.max(1));
    let tiles: Vec<Vec<PixelResult>> = (0..bins.tile_count())
        .into_par_iter()
        .map(|t| {
            let [x0, x1, y0, y1] = bins.rect(t, width, height);
            let list = bins.list(t);
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    out.push(composite_pixel(projected, list, x as f64, y as f64, cfg));
                }
            }
            out
        })
        .collect();
    let mut pixels = vec![PixelResult::default(); width * height];
    for (t, tile) in tiles.into_iter().enumerate() {
        let [x0, x1, y0, _] = bins.rect(t, width, height);
        let w = x1 - x0;
        for (k, px) in tile.into_iter().enumerate() {
            pixels[(y0 + k / w) * width + x0 + k % w] = px;
        }
    }
    RenderOutput::from_pixels(width, height, pixels.into_iter(), cfg)
}

#[inline]
fn composite_pixel(
    projected: &[ProjectedGaussian],
    list: &[u32],
    x: f64,
    y: f64,
    cfg: &RenderConfig,
) -> PixelResult {
    let mut px = PixelResult::default();
    for &gi in list {
        let g = &projected[gi as usize];
        let Some((alpha, _)) = g.alpha_at(x, y, cfg) else {
            continue;
        };
        let w = alpha * px.transmittance;
        for c in 0..3 {
            px.rgb[c] += w * g.color[c];
        }
        px.depth_sum += w * g.depth;
        px.weight_sum += w;
        px.transmittance *= 1.0 - alpha;
    }
    px
}
