//! Procedural road scenes: elevation with tilt, potholes and cracks, a noisy
//! asphalt albedo, camera trajectories and rendered datasets.
//!
//! Dataset directory layout:
//!
//! - `scene.json`: the [`SceneRecipe`]
//! - `cam_####.txt`: cameras (see [`crate::io`])
//! - `img_####.ppm`: 8-bit renders
//! - `gt_elevation.elev`: geometry-level ground-truth elevation
//! - `gt_gaussians.ggrd`: the ground-truth Gaussian grid

use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::Frame;
use crate::image::Image;
use crate::io::{self, quantize_grid, to_f32_precision, to_f32_within};
use crate::scene::{
    downsample_area, init_gaussian_grid, make_grid_spec, upsample_channels, CameraModel,
    ElevationMap, GaussianGrid, GridLevel, GridOverrides, GridSpec, SH_BASIS, SH_COEFFS,
};
use crate::splat::sh::SH_C0;
use crate::splat::{render_with, RenderConfig};

/// A cosine-profile depression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pothole {
    /// Road-frame `(x, y)` of the centre (m).
    pub center_m: [f64; 2],
    pub radius_m: f64,
    /// Depth at the centre (m, positive means down).
    pub depth_m: f64,
}

/// A groove with a cosine cross-section along a polyline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crack {
    pub polyline_m: Vec<[f64; 2]>,
    pub width_m: f64,
    pub depth_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Trajectory {
    pub frames: usize,
    /// Forward advance per frame along +y (m).
    pub step_m: f64,
    pub height_m: f64,
    /// Downward pitch (rad).
    pub pitch_rad: f64,
    /// Right camera offset along the camera x axis; zero gives mono frames.
    pub baseline_m: f64,
    pub fx: f64,
    pub fy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory {
            frames: 2,
            step_m: 0.3,
            height_m: 1.2,
            pitch_rad: 0.77,
            baseline_m: 0.12,
            fx: 430.0,
            fy: 430.0,
            width: 960,
            height: 528,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneRecipe {
    pub seed: u64,
    pub grid: GridOverrides,
    /// Longitudinal slope of the base plane (rad).
    pub tilt_pitch_rad: f64,
    /// Lateral slope of the base plane (rad).
    pub tilt_roll_rad: f64,
    pub potholes: Vec<Pothole>,
    pub cracks: Vec<Crack>,
    /// Mean grey level of the asphalt.
    pub albedo: f64,
    /// Half-width of the uniform per-cell albedo noise.
    pub texture_noise: f64,
    /// Relative darkening at the deepest point of a pothole or crack.
    pub darkening: f64,
    /// Standard deviation of additive Gaussian pixel noise in renders.
    pub image_noise: f64,
    pub trajectory: Trajectory,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        SceneRecipe {
            seed: 0,
            grid: GridOverrides::default(),
            tilt_pitch_rad: 0.0,
            tilt_roll_rad: 0.0,
            potholes: vec![Pothole {
                center_m: [0.2, 2.0],
                radius_m: 0.25,
                depth_m: 0.05,
            }],
            cracks: vec![Crack {
                polyline_m: vec![[-0.7, 3.2], [-0.2, 3.6], [0.4, 3.7]],
                width_m: 0.03,
                depth_m: 0.01,
            }],
            albedo: 0.45,
            texture_noise: 0.15,
            darkening: 0.4,
            image_noise: 0.0,
            trajectory: Trajectory::default(),
        }
    }
}

impl SceneRecipe {
    /// A flat, untextured recipe without defects.
    pub fn empty() -> Self {
        SceneRecipe {
            potholes: Vec::new(),
            cracks: Vec::new(),
            texture_noise: 0.0,
            ..SceneRecipe::default()
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        make_grid_spec(&self.grid)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.potholes.iter().enumerate() {
            if !(p.radius_m > 0.0 && p.radius_m.is_finite()) {
                return Err(Error::config(
                    format!("potholes[{i}].radius_m"),
                    "must be positive",
                ));
            }
            if !p.depth_m.is_finite() || !p.center_m.iter().all(|v| v.is_finite()) {
                return Err(Error::config(format!("potholes[{i}]"), "non-finite value"));
            }
        }
        for (i, c) in self.cracks.iter().enumerate() {
            if c.polyline_m.is_empty() {
                return Err(Error::config(
                    format!("cracks[{i}].polyline_m"),
                    "needs at least one point",
                ));
            }
            if !(c.width_m > 0.0 && c.width_m.is_finite()) {
                return Err(Error::config(
                    format!("cracks[{i}].width_m"),
                    "must be positive",
                ));
            }
            if !c.depth_m.is_finite() {
                return Err(Error::config(
                    format!("cracks[{i}].depth_m"),
                    "non-finite value",
                ));
            }
        }
        for (name, v) in [("albedo", self.albedo), ("darkening", self.darkening)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("{v} is outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("texture_noise", self.texture_noise),
            ("image_noise", self.image_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("{v} must be finite and >= 0")));
            }
        }
        let t = &self.trajectory;
        if t.frames == 0 {
            return Err(Error::config("trajectory.frames", "must be at least 1"));
        }
        if !(t.fx > 0.0 && t.fy > 0.0) || t.width == 0 || t.height == 0 {
            return Err(Error::config(
                "trajectory.fx, fy, width, height",
                "must be positive",
            ));
        }
        if !(t.baseline_m >= 0.0) || !t.step_m.is_finite() || !t.pitch_rad.is_finite() {
            return Err(Error::config(
                "trajectory",
                "baseline must be >= 0 and all values finite",
            ));
        }
        Ok(())
    }
}

/// Pothole profile: `−depth` at the centre rising to 0 at `radius`.
pub fn pothole_profile(p: &Pothole, x: f64, y: f64) -> f64 {
    let r = ((x - p.center_m[0]).powi(2) + (y - p.center_m[1]).powi(2)).sqrt();
    if r >= p.radius_m {
        0.0
    } else {
        -p.depth_m * 0.5 * (1.0 + (std::f64::consts::PI * r / p.radius_m).cos())
    }
}

fn distance_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

/// Crack profile: `−depth` on the polyline rising to 0 at half the width.
pub fn crack_profile(c: &Crack, x: f64, y: f64) -> f64 {
    let d = if c.polyline_m.len() == 1 {
        distance_to_segment([x, y], c.polyline_m[0], c.polyline_m[0])
    } else {
        c.polyline_m
            .windows(2)
            .map(|s| distance_to_segment([x, y], s[0], s[1]))
            .fold(f64::INFINITY, f64::min)
    };
    let half = 0.5 * c.width_m;
    if d >= half {
        0.0
    } else {
        -c.depth_m * 0.5 * (1.0 + (std::f64::consts::PI * d / half).cos())
    }
}

/// Ground truth produced by [`generate_scene`]. All stored values are
/// representable in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: GridSpec,
    /// Geometry-level elevation (area average of the Gaussian level).
    pub elevation: ElevationMap,
    /// Gaussian-level elevation.
    pub elevation_fine: ElevationMap,
    /// Texture-level SH coefficients `(12, rows, cols)`.
    pub sh: Array3<f64>,
}

impl SyntheticScene {
    /// The ground-truth Gaussian grid: Gaussian-level elevation, bilinearly
    /// upsampled texture, default scale, opacity and rotation.
    pub fn gaussian_grid(&self) -> Result<GaussianGrid> {
        let (rows, cols) = self.spec.shape(GridLevel::Gaussian);
        let sh = upsample_channels(&self.sh, rows, cols)?;
        let mut grid = init_gaussian_grid(&self.spec, &self.elevation_fine, &sh)?;
        quantize_grid(&mut grid);
        Ok(grid)
    }
}

/// Evaluates the recipe's surface and albedo on the grid.
pub fn generate_scene(recipe: &SceneRecipe, spec: &GridSpec) -> Result<SyntheticScene> {
    recipe.validate()?;
    spec.validate()?;
    let (lo, hi) = (spec.h_min_m, spec.h_max_m);
    let margin = 0.5 * (hi - lo);
    let y_mid = spec.roi_start_m + 0.5 * spec.lattice_length();
    let (tp, tr) = (recipe.tilt_pitch_rad.tan(), recipe.tilt_roll_rad.tan());
    let defects = |x: f64, y: f64| -> f64 {
        recipe
            .potholes
            .iter()
            .map(|p| pothole_profile(p, x, y))
            .sum::<f64>()
            + recipe
                .cracks
                .iter()
                .map(|c| crack_profile(c, x, y))
                .sum::<f64>()
    };
    let surface = |x: f64, y: f64| (y - y_mid) * tp + x * tr + defects(x, y);

    let (rows, cols) = spec.shape(GridLevel::Gaussian);
    let mut raw = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = spec.cell_center(GridLevel::Gaussian, r, c);
            let h = surface(x, y);
            if h < lo - margin || h > hi + margin {
                return Err(Error::config(
                    "potholes, cracks, tilt",
                    format!("elevation {h:.3} m at ({x:.3}, {y:.3}) is far outside [{lo}, {hi}]"),
                ));
            }
            raw[[r, c]] = h;
        }
    }
    let fine_values = raw.mapv(|h: f64| to_f32_within(h, lo, hi));
    let elevation_fine = ElevationMap::new(
        spec,
        GridLevel::Gaussian,
        fine_values,
        Array2::from_elem((rows, cols), true),
    )?;
    let (gr, gc) = spec.shape(GridLevel::Geometry);
    let coarse =
        downsample_area(&elevation_fine.values, gr, gc)?.mapv(|h| to_f32_within(h, lo, hi));
    let elevation = ElevationMap::new(
        spec,
        GridLevel::Geometry,
        coarse,
        Array2::from_elem((gr, gc), true),
    )?;

    // Per texture cell: shared grey noise, a slight per-channel tint, and
    // darkening proportional to the relative defect depth.
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let (tr_rows, tr_cols) = spec.shape(GridLevel::Texture);
    let mut sh = Array3::zeros((SH_COEFFS, tr_rows, tr_cols));
    let tint = [1.0, 0.97, 0.93];
    let max_depth = recipe
        .potholes
        .iter()
        .map(|p| p.depth_m)
        .chain(recipe.cracks.iter().map(|c| c.depth_m))
        .fold(0.0f64, |a, d| a.max(d.abs()));
    for r in 0..tr_rows {
        for c in 0..tr_cols {
            let (x, y) = spec.cell_center(GridLevel::Texture, r, c);
            let grey = recipe.albedo + recipe.texture_noise * rng.gen_range(-1.0..1.0);
            let dark = if max_depth > 0.0 {
                1.0 - recipe.darkening * (-defects(x, y) / max_depth).clamp(0.0, 1.0)
            } else {
                1.0
            };
            for (ch, t) in tint.iter().enumerate() {
                let a = (grey * t * dark).clamp(0.02, 0.98);
                sh[[ch * SH_BASIS, r, c]] = to_f32_precision((a - 0.5) / SH_C0);
            }
        }
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        elevation,
        elevation_fine,
        sh,
    })
}

/// Cameras along +y at the recipe height. With a baseline, each frame has a
/// left camera followed by a right camera offset by the baseline along the
/// camera x axis.
pub fn make_trajectory(recipe: &SceneRecipe) -> Result<Vec<CameraModel>> {
    recipe.validate()?;
    let t = &recipe.trajectory;
    if !(t.height_m > 0.0) {
        return Err(Error::config(
            "trajectory.height_m",
            format!("camera at {} m is not above the road plane", t.height_m),
        ));
    }
    let (cx, cy) = ((t.width as f64 - 1.0) / 2.0, (t.height as f64 - 1.0) / 2.0);
    let mut out = Vec::new();
    for k in 0..t.frames {
        let left = Vector3::new(0.0, k as f64 * t.step_m, t.height_m);
        let cam = CameraModel::looking_down(
            t.fx,
            t.fy,
            cx,
            cy,
            t.width,
            t.height,
            left,
            t.pitch_rad,
            0.0,
        )?;
        if t.baseline_m > 0.0 {
            let right_axis = cam.rotation.row(0).transpose();
            let right = CameraModel::looking_down(
                t.fx,
                t.fy,
                cx,
                cy,
                t.width,
                t.height,
                left + right_axis * t.baseline_m,
                t.pitch_rad,
                0.0,
            )?;
            out.push(cam);
            out.push(right);
        } else {
            out.push(cam);
        }
    }
    Ok(out)
}

/// Renders every camera; adds Gaussian pixel noise of standard deviation
/// `noise_sigma` (clamped to [0, 1]) drawn from `seed` when positive.
pub fn render_dataset(
    grid: &GaussianGrid,
    cameras: &[CameraModel],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Image>> {
    let cfg = RenderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a9e);
    let normal = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| Error::config("image_noise", e.to_string()))?;
    cameras
        .iter()
        .map(|cam| {
            let mut img = render_with(grid, cam, &cfg)?.rgb;
            if noise_sigma > 0.0 {
                img.data
                    .iter_mut()
                    .for_each(|v| *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0));
            }
            Ok(img)
        })
        .collect()
}

pub fn camera_file_name(i: usize) -> String {
    format!("cam_{i:04}.txt")
}

pub fn image_file_name(i: usize) -> String {
    format!("img_{i:04}.ppm")
}

pub const RECIPE_FILE: &str = "scene.json";
pub const GT_ELEVATION_FILE: &str = "gt_elevation.elev";
pub const GT_GRID_FILE: &str = "gt_gaussians.ggrd";

/// Generates and writes a complete dataset into `dir`.
pub fn write_dataset(recipe: &SceneRecipe, dir: &Path) -> Result<()> {
    let spec = recipe.grid_spec()?;
    let scene = generate_scene(recipe, &spec)?;
    let grid = scene.gaussian_grid()?;
    let cameras = make_trajectory(recipe)?;
    let images = render_dataset(&grid, &cameras, recipe.image_noise, recipe.seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(recipe).expect("recipe serializes");
    io::write_bytes(&dir.join(RECIPE_FILE), json.as_bytes())?;
    for (i, (cam, img)) in cameras.iter().zip(&images).enumerate() {
        io::write_camera(&dir.join(camera_file_name(i)), cam)?;
        img.write_ppm(&dir.join(image_file_name(i)))?;
    }
    io::write_elevation(&dir.join(GT_ELEVATION_FILE), &scene.elevation)?;
    io::write_grid(&dir.join(GT_GRID_FILE), &grid)?;
    Ok(())
}

/// Parses a recipe, reporting the offending field and position.
pub fn parse_recipe(text: &str, path: &Path) -> Result<SceneRecipe> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let recipe: SceneRecipe = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::format(path, format!("field `{field}`: {}", e.into_inner()))
    })?;
    recipe.validate()?;
    Ok(recipe)
}

pub fn read_recipe(path: &Path) -> Result<SceneRecipe> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_recipe(&text, path)
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub recipe: SceneRecipe,
    pub spec: GridSpec,
    pub frames: Vec<Frame>,
    pub gt_elevation: Option<ElevationMap>,
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let recipe = read_recipe(&dir.join(RECIPE_FILE))?;
    let spec = recipe.grid_spec()?;
    let mut frames = Vec::new();
    for i in 0.. {
        let cam_path = dir.join(camera_file_name(i));
        if !cam_path.exists() {
            break;
        }
        let camera = io::read_camera(&cam_path)?;
        let image = Image::read_ppm(&dir.join(image_file_name(i)))?;
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::format(
                dir.join(image_file_name(i)),
                format!(
                    "image is {}x{}, camera expects {}x{}",
                    image.width, image.height, camera.width, camera.height
                ),
            ));
        }
        frames.push(Frame { image, camera });
    }
    let gt_path = dir.join(GT_ELEVATION_FILE);
    let gt_elevation = if gt_path.exists() {
        Some(io::read_elevation(&gt_path)?)
    } else {
        None
    };
    Ok(Dataset {
        recipe,
        spec,
        frames,
        gt_elevation,
    })
}

/// Grid spec of a compact lattice for tests and demos.
pub fn reduced_spec(
    nx_g: usize,
    ny_g: usize,
    texture_factor: usize,
    gaussian_factor: usize,
) -> GridSpec {
    let d = GridSpec::default();
    GridSpec {
        roi_width_m: nx_g as f64 * d.geom_interval_m,
        roi_length_m: ny_g as f64 * d.geom_interval_m,
        nx_g,
        ny_g,
        texture_factor,
        gaussian_factor,
        ..d
    }
}
