//! Shared fixtures: randomized small scenes and a central-difference
//! gradient checker that only uses the forward renderer.
#![allow(dead_code)]

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roadsplat::image::Image;
use roadsplat::scene::{CameraModel, ElevationMap, GaussianGrid, GridLevel, GridSpec, SH_COEFFS};
use roadsplat::splat::{depth_order, render_with, Gradients, RenderConfig};

/// A lattice of at most `max_gaussians` Gaussians with random SH, opacity,
/// rotation and elevation, seen by a random downward-looking camera.
pub fn random_scene(
    seed: u64,
    max_gaussians: usize,
    width: usize,
    height: usize,
) -> (GaussianGrid, CameraModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = rng.gen_range(2..=7usize.min(max_gaussians / 2));
    let ny = rng.gen_range(2..=7usize.min(max_gaussians / nx));
    let pitch_m = 0.1;
    let spec = GridSpec {
        roi_width_m: nx as f64 * pitch_m,
        roi_length_m: ny as f64 * pitch_m,
        roi_start_m: 0.5,
        geom_interval_m: pitch_m,
        nx_g: nx,
        ny_g: ny,
        texture_factor: 1,
        gaussian_factor: 1,
        ..GridSpec::default()
    };
    let n = nx * ny;
    let elevation = Array2::from_shape_fn((ny, nx), |_| rng.gen_range(-0.05..0.05));
    let sh = (0..n)
        .map(|_| {
            let mut k = [0.0; SH_COEFFS];
            for (i, v) in k.iter_mut().enumerate() {
                *v = if i % 4 == 0 {
                    rng.gen_range(-0.8..0.8)
                } else {
                    rng.gen_range(-0.25..0.25)
                };
            }
            k
        })
        .collect();
    let rotation = (0..n)
        .map(|_| {
            let v: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.map(|x| x / norm)
        })
        .collect();
    let opacity = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
    let scale = std::array::from_fn(|_| rng.gen_range(0.02..0.05));
    let grid = GaussianGrid {
        elevation: ElevationMap::new(
            &spec,
            GridLevel::Gaussian,
            elevation,
            Array2::from_elem((ny, nx), true),
        )
        .unwrap(),
        spec: spec.clone(),
        sh,
        scale,
        rotation,
        opacity,
    };
    grid.validate().unwrap();

    let h = rng.gen_range(0.8..1.2);
    let pitch = rng.gen_range(0.8..1.3);
    let yaw = rng.gen_range(-0.2..0.2);
    let (sp, cp) = f64::sin_cos(pitch);
    let (sy, cy) = f64::sin_cos(yaw);
    let forward = Vector3::new(-sy * cp, cy * cp, -sp);
    let target = Vector3::new(0.0, spec.roi_start_m + 0.5 * spec.lattice_length(), 0.0);
    let dist = h / sp;
    let center = target - forward * dist;
    let extent = spec.lattice_width().max(spec.lattice_length()) * 1.2;
    let f = 0.9 * width.min(height) as f64 * dist / extent;
    let cam = CameraModel::looking_down(
        f,
        f * rng.gen_range(0.9..1.1),
        width as f64 / 2.0 + rng.gen_range(-1.0..1.0),
        height as f64 / 2.0 + rng.gen_range(-1.0..1.0),
        width,
        height,
        center,
        pitch,
        yaw,
    )
    .unwrap();
    (grid, cam)
}

pub fn random_adjoint(seed: u64, width: usize, height: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    Image::from_fn(width, height, 3, |_, _, _| rng.gen_range(-1.0..1.0))
}

pub fn weighted_loss(
    grid: &GaussianGrid,
    cam: &CameraModel,
    adj: &Image,
    cfg: &RenderConfig,
) -> f64 {
    let out = render_with(grid, cam, cfg).unwrap();
    out.rgb.data.iter().zip(&adj.data).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Sh(usize, usize),
    Opacity(usize),
    Rotation(usize, usize),
    Elevation(usize),
    Scale(usize),
}

impl Param {
    pub fn all(n: usize) -> Vec<Param> {
        let mut out = Vec::new();
        for i in 0..n {
            out.extend((0..SH_COEFFS).map(|k| Param::Sh(i, k)));
            out.push(Param::Opacity(i));
            out.extend((0..4).map(|k| Param::Rotation(i, k)));
            out.push(Param::Elevation(i));
        }
        out.extend((0..3).map(Param::Scale));
        out
    }

    pub fn nudge(self, grid: &mut GaussianGrid, delta: f64) {
        match self {
            Param::Sh(i, k) => grid.sh[i][k] += delta,
            Param::Opacity(i) => grid.opacity[i] += delta,
            Param::Rotation(i, k) => grid.rotation[i][k] += delta,
            Param::Elevation(i) => {
                let cols = grid.elevation.values.ncols();
                grid.elevation.values[[i / cols, i % cols]] += delta
            }
            Param::Scale(k) => grid.scale[k] += delta,
        }
    }

    pub fn read(self, g: &Gradients) -> f64 {
        match self {
            Param::Sh(i, k) => g.sh[i][k],
            Param::Opacity(i) => g.opacity[i],
            Param::Rotation(i, k) => g.rotation[i][k],
            Param::Elevation(i) => g.elevation[i],
            Param::Scale(k) => g.scale[k],
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct FdReport {
    /// Components compared (|grad| above the threshold).
    pub checked: usize,
    /// Components below the magnitude threshold.
    pub tiny: usize,
    /// Components whose stencil crosses a depth-order swap, where the
    /// renderer is discontinuous.
    pub order_swaps: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

/// Compares every analytic gradient with a central difference of step `h`.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    grid: &GaussianGrid,
    cam: &CameraModel,
    adj: &Image,
    analytic: &Gradients,
    cfg: &RenderConfig,
    h: f64,
    rel_tol: f64,
    min_grad: f64,
) -> FdReport {
    let mut report = FdReport::default();
    let base_order = depth_order(grid, cam, cfg);
    let mut work = grid.clone();
    for p in Param::all(grid.len()) {
        p.nudge(&mut work, h);
        let plus = weighted_loss(&work, cam, adj, cfg);
        let swapped_plus =
            matches!(p, Param::Elevation(_)) && depth_order(&work, cam, cfg) != base_order;
        p.nudge(&mut work, -2.0 * h);
        let minus = weighted_loss(&work, cam, adj, cfg);
        let swapped_minus =
            matches!(p, Param::Elevation(_)) && depth_order(&work, cam, cfg) != base_order;
        p.nudge(&mut work, h);
        if swapped_plus || swapped_minus {
            report.order_swaps += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * h);
        let a = p.read(analytic);
        if a.abs().max(fd.abs()) <= min_grad {
            report.tiny += 1;
            continue;
        }
        report.checked += 1;
        let rel = (a - fd).abs() / a.abs().max(fd.abs());
        report.max_rel_err = report.max_rel_err.max(rel);
        if rel >= rel_tol {
            report
                .failures
                .push(format!("{p:?}: analytic {a:.9e} fd {fd:.9e} rel {rel:.3e}"));
        }
    }
    report
}

/// Render settings for gradient checks: the contribution floor sits far
/// below finite-difference resolution so the loss is continuous.
pub fn smooth_config() -> RenderConfig {
    RenderConfig {
        min_alpha: 1e-15,
        ..RenderConfig::default()
    }
}
