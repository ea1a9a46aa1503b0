//! Vector-Jacobian product of [`super::render`] w.r.t. every Gaussian
//! parameter, for a loss `L = Σ_p dL/dI(p) · I(p)`.
//!
//! Per-pixel partials are accumulated per tile, then reduced into per-Gaussian
//! buffers sequentially in tile order so the result does not depend on the
//! thread schedule.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::covariance::{
    camera_jacobian, camera_jacobian_vjp, conic_vjp, covariance_unchecked, covariance_vjp,
    project_covariance, project_covariance_vjp,
};
use super::forward::TileBins;
use super::sh::{eval_sh_vjp, eval_sh_with_mask};
use super::{check_inputs, project_sorted, ProjectedGaussian, RenderConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::{CameraModel, GaussianGrid, SH_COEFFS};

/// Gradients of a scalar loss w.r.t. the scene parameters. `elevation` is
/// per Gaussian in row-major lattice order; `scale` is the shared scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub sh: Vec<[f64; SH_COEFFS]>,
    pub opacity: Vec<f64>,
    pub rotation: Vec<[f64; 4]>,
    pub scale: [f64; 3],
    pub elevation: Vec<f64>,
}

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Gradients {
            sh: vec![[0.0; SH_COEFFS]; n],
            opacity: vec![0.0; n],
            rotation: vec![[0.0; 4]; n],
            scale: [0.0; 3],
            elevation: vec![0.0; n],
        }
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            for k in 0..SH_COEFFS {
                a[k] += b[k];
            }
        }
        for (a, b) in self.rotation.iter_mut().zip(&other.rotation) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.opacity.iter_mut().zip(&other.opacity) {
            *a += b;
        }
        for (a, b) in self.elevation.iter_mut().zip(&other.elevation) {
            *a += b;
        }
        for k in 0..3 {
            self.scale[k] += other.scale[k];
        }
    }

    pub fn scale_by(&mut self, s: f64) {
        self.sh.iter_mut().flatten().for_each(|v| *v *= s);
        self.rotation.iter_mut().flatten().for_each(|v| *v *= s);
        self.opacity.iter_mut().for_each(|v| *v *= s);
        self.elevation.iter_mut().for_each(|v| *v *= s);
        self.scale.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.sh.iter().flatten().all(|&v| v == 0.0)
            && self.rotation.iter().flatten().all(|&v| v == 0.0)
            && self.opacity.iter().all(|&v| v == 0.0)
            && self.elevation.iter().all(|&v| v == 0.0)
            && self.scale.iter().all(|&v| v == 0.0)
    }
}

/// Screen-space partials of one Gaussian.
#[derive(Debug, Clone, Copy, Default)]
struct Partial {
    mean: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

impl Partial {
    fn add(&mut self, o: &Partial) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

pub fn render_backward(grid: &GaussianGrid, cam: &CameraModel, dl_di: &Image) -> Result<Gradients> {
    render_backward_with(grid, cam, dl_di, &RenderConfig::default())
}

pub fn render_backward_with(
    grid: &GaussianGrid,
    cam: &CameraModel,
    dl_di: &Image,
    cfg: &RenderConfig,
) -> Result<Gradients> {
    check_inputs(grid, cam)?;
    if dl_di.width != cam.width || dl_di.height != cam.height || dl_di.channels != 3 {
        return Err(Error::shape(
            format!("{}x{}x3 adjoint", cam.width, cam.height),
            format!("{}x{}x{}", dl_di.width, dl_di.height, dl_di.channels),
        ));
    }
    let (width, height) = (cam.width, cam.height);
    let projected = project_sorted(grid, cam, cfg);
    let bins = TileBins::build(&projected, width, height, cfg.tile_size.max(1));

    let tile_partials: Vec<Vec<Partial>> = (0..bins.tile_count())
        .into_par_iter()
        .map(|t| tile_backward(&projected, &bins, t, width, height, dl_di, cfg))
        .collect();

    let mut screen = vec![Partial::default(); projected.len()];
    for (t, partials) in tile_partials.iter().enumerate() {
        for (&gi, p) in bins.list(t).iter().zip(partials) {
            screen[gi as usize].add(p);
        }
    }

    let center = cam.center();
    let per_gaussian: Vec<GaussianGrad> = projected
        .par_iter()
        .zip(screen.par_iter())
        .map(|(g, p)| chain_to_parameters(grid, cam, &center, cfg, g, p))
        .collect();

    let mut out = Gradients::zeros(grid.len());
    for (g, d) in projected.iter().zip(&per_gaussian) {
        let i = g.source_index;
        out.sh[i] = d.sh;
        out.opacity[i] = d.opacity;
        out.rotation[i] = d.rotation;
        out.elevation[i] = d.elevation;
        for k in 0..3 {
            out.scale[k] += d.scale[k];
        }
    }
    Ok(out)
}

struct Contribution {
    slot: usize,
    alpha: f64,
    falloff: f64,
    capped: bool,
    transmittance: f64,
}

fn tile_backward(
    projected: &[ProjectedGaussian],
    bins: &TileBins,
    tile: usize,
    width: usize,
    height: usize,
    dl_di: &Image,
    cfg: &RenderConfig,
) -> Vec<Partial> {
    let list = bins.list(tile);
    let mut partials = vec![Partial::default(); list.len()];
    if list.is_empty() {
        return partials;
    }
    let [x0, x1, y0, y1] = bins.rect(tile, width, height);
    let mut stack: Vec<Contribution> = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let base = dl_di.index(x, y, 0);
            let grad = [dl_di.data[base], dl_di.data[base + 1], dl_di.data[base + 2]];
            if grad == [0.0; 3] {
                continue;
            }
            let (px, py) = (x as f64, y as f64);
            stack.clear();
            let mut t = 1.0;
            for (slot, &gi) in list.iter().enumerate() {
                let g = &projected[gi as usize];
                let Some((alpha, falloff)) = g.alpha_at(px, py, cfg) else {
                    continue;
                };
                stack.push(Contribution {
                    slot,
                    alpha,
                    falloff,
                    capped: g.opacity * falloff > cfg.alpha_cap,
                    transmittance: t,
                });
                t *= 1.0 - alpha;
            }
            // Colour accumulated behind the current Gaussian.
            let mut behind = [0.0; 3];
            for c in stack.iter().rev() {
                let g = &projected[list[c.slot] as usize];
                let w = c.alpha * c.transmittance;
                let p = &mut partials[c.slot];
                let mut d_alpha = 0.0;
                for k in 0..3 {
                    p.color[k] += grad[k] * w;
                    d_alpha +=
                        grad[k] * (g.color[k] * c.transmittance - behind[k] / (1.0 - c.alpha));
                    behind[k] += g.color[k] * w;
                }
                if c.capped {
                    continue;
                }
                p.opacity += d_alpha * c.falloff;
                let d_power = d_alpha * g.opacity * c.falloff;
                // power = -q/2, q = a dx² + 2 b dx dy + c dy²
                let d_q = -0.5 * d_power;
                let dx = px - g.mean2d[0];
                let dy = py - g.mean2d[1];
                let [a, b, cc] = g.conic;
                p.conic[0] += d_q * dx * dx;
                p.conic[1] += d_q * 2.0 * dx * dy;
                p.conic[2] += d_q * dy * dy;
                p.mean[0] -= d_q * 2.0 * (a * dx + b * dy);
                p.mean[1] -= d_q * 2.0 * (b * dx + cc * dy);
            }
        }
    }
    partials
}

struct GaussianGrad {
    sh: [f64; SH_COEFFS],
    opacity: f64,
    rotation: [f64; 4],
    scale: [f64; 3],
    elevation: f64,
}

fn chain_to_parameters(
    grid: &GaussianGrid,
    cam: &CameraModel,
    cam_center: &Vector3<f64>,
    cfg: &RenderConfig,
    g: &ProjectedGaussian,
    p: &Partial,
) -> GaussianGrad {
    let i = g.source_index;
    let mu = grid.center(i);
    let t = cam.to_camera(&mu);
    let q = &grid.rotation[i];
    let sigma = covariance_unchecked(&grid.scale, q);
    let jac = camera_jacobian(&t, cam);
    let cov2d = project_covariance(&sigma, &cam.rotation, &jac, cfg.blur);

    let d_cov2d = conic_vjp(&cov2d, &p.conic);
    let (d_sigma, d_jac) = project_covariance_vjp(&sigma, &cam.rotation, &jac, &d_cov2d);
    let (d_scale, d_rot) = covariance_vjp(&grid.scale, q, &d_sigma);

    let iz = 1.0 / t.z;
    let mut d_t = Vector3::new(
        p.mean[0] * cam.fx * iz,
        p.mean[1] * cam.fy * iz,
        -(p.mean[0] * cam.fx * t.x + p.mean[1] * cam.fy * t.y) * iz * iz,
    );
    d_t += camera_jacobian_vjp(&t, cam, &d_jac);
    let mut d_mu = cam.rotation.transpose() * d_t;

    let v = mu - cam_center;
    let n = v.norm();
    let dir = v / n;
    let (_, pass) = eval_sh_with_mask(&grid.sh[i], &dir);
    let mut d_sh = [0.0; SH_COEFFS];
    let d_dir = eval_sh_vjp(&grid.sh[i], &dir, &pass, &p.color, &mut d_sh);
    d_mu += (d_dir - dir * dir.dot(&d_dir)) / n;

    GaussianGrad {
        sh: d_sh,
        opacity: p.opacity,
        rotation: d_rot,
        scale: d_scale,
        elevation: d_mu.z,
    }
}
