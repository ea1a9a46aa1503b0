//! Grid geometry, elevation maps, cameras and the grid-Gaussian scene.
//!
//! Road frame: x lateral (right positive), y longitudinal (forward
//! positive), z up. The elevation reference plane is z = 0. Camera frame
//! follows the usual computer-vision convention: x right, y down, z forward.
//!
//! All 2D grids are stored `(rows, cols) = (ny, nx)`: a row is one
//! longitudinal position, a column one lateral position.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real spherical-harmonics coefficients per Gaussian for degree 1 (3 · 4).
pub const SH_COEFFS: usize = 12;
/// Basis functions per colour channel for degree 1.
pub const SH_BASIS: usize = 4;

/// Resolution level of a BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridLevel {
    Geometry,
    Texture,
    Gaussian,
}

impl GridLevel {
    pub const ALL: [GridLevel; 3] = [GridLevel::Geometry, GridLevel::Texture, GridLevel::Gaussian];
}

impl std::fmt::Display for GridLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GridLevel::Geometry => "geometry",
            GridLevel::Texture => "texture",
            GridLevel::Gaussian => "gaussian",
        };
        f.write_str(s)
    }
}

/// Region of interest and grid resolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub roi_width_m: f64,
    pub roi_length_m: f64,
    pub roi_start_m: f64,
    pub geom_interval_m: f64,
    pub nx_g: usize,
    pub ny_g: usize,
    pub texture_factor: usize,
    pub gaussian_factor: usize,
    pub h_min_m: f64,
    pub h_max_m: f64,
    pub nz_anchors: usize,
    pub nb_bins: usize,
}

/// Lattice counts may differ from `roi / interval` by at most this many
/// grid pitches. The reference configuration (164 rows of 3 cm for a 5 m
/// region) is 2.7 pitches short.
pub const ROI_COUNT_TOLERANCE_PITCHES: f64 = 3.0;

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            roi_width_m: 1.9,
            roi_length_m: 5.0,
            roi_start_m: 0.3,
            geom_interval_m: 0.03,
            nx_g: 64,
            ny_g: 164,
            texture_factor: 4,
            gaussian_factor: 2,
            h_min_m: -0.20,
            h_max_m: 0.20,
            nz_anchors: 20,
            nb_bins: 40,
        }
    }
}

impl GridSpec {
    /// `(nx, ny)` at a level.
    pub fn dims(&self, level: GridLevel) -> (usize, usize) {
        let f = self.factor(level);
        (self.nx_g * f, self.ny_g * f)
    }

    /// `(rows, cols)` at a level, the array shape convention.
    pub fn shape(&self, level: GridLevel) -> (usize, usize) {
        let (nx, ny) = self.dims(level);
        (ny, nx)
    }

    pub fn count(&self, level: GridLevel) -> usize {
        let (nx, ny) = self.dims(level);
        nx * ny
    }

    /// Resolution ratio of `level` relative to the geometry grid.
    pub fn factor(&self, level: GridLevel) -> usize {
        match level {
            GridLevel::Geometry => 1,
            GridLevel::Texture => self.texture_factor,
            GridLevel::Gaussian => self.texture_factor * self.gaussian_factor,
        }
    }

    pub fn pitch(&self, level: GridLevel) -> f64 {
        self.geom_interval_m / self.factor(level) as f64
    }

    /// Lateral extent actually covered by the lattice.
    pub fn lattice_width(&self) -> f64 {
        self.nx_g as f64 * self.geom_interval_m
    }

    pub fn lattice_length(&self) -> f64 {
        self.ny_g as f64 * self.geom_interval_m
    }

    /// Level whose shape is `(rows, cols)`, finest first.
    pub fn level_of_shape(&self, rows: usize, cols: usize) -> Option<GridLevel> {
        GridLevel::ALL
            .iter()
            .rev()
            .copied()
            .find(|&l| self.shape(l) == (rows, cols))
    }

    /// Horizontal centre of cell `(row, col)` at `level`.
    pub fn cell_center(&self, level: GridLevel, row: usize, col: usize) -> (f64, f64) {
        let p = self.pitch(level);
        let x = -0.5 * self.lattice_width() + (col as f64 + 0.5) * p;
        let y = self.roi_start_m + (row as f64 + 0.5) * p;
        (x, y)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("roi_width_m", self.roi_width_m),
            ("roi_length_m", self.roi_length_m),
            ("geom_interval_m", self.geom_interval_m),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.roi_start_m.is_finite() && self.roi_start_m >= 0.0) {
            return Err(Error::config(
                "roi_start_m",
                format!("must be non-negative, got {}", self.roi_start_m),
            ));
        }
        if self.nx_g == 0 || self.ny_g == 0 {
            return Err(Error::config(
                "nx_g, ny_g",
                "grid counts must be at least 1",
            ));
        }
        if self.texture_factor == 0 || self.gaussian_factor == 0 {
            return Err(Error::config(
                "texture_factor, gaussian_factor",
                "factors must be at least 1",
            ));
        }
        let tol = ROI_COUNT_TOLERANCE_PITCHES * self.geom_interval_m + 1e-9;
        if (self.lattice_width() - self.roi_width_m).abs() > tol {
            return Err(Error::config(
                "roi_width_m, geom_interval_m, nx_g",
                format!(
                    "{} cells of {} m span {} m, inconsistent with roi width {} m",
                    self.nx_g,
                    self.geom_interval_m,
                    self.lattice_width(),
                    self.roi_width_m
                ),
            ));
        }
        if (self.lattice_length() - self.roi_length_m).abs() > tol {
            return Err(Error::config(
                "roi_length_m, geom_interval_m, ny_g",
                format!(
                    "{} cells of {} m span {} m, inconsistent with roi length {} m",
                    self.ny_g,
                    self.geom_interval_m,
                    self.lattice_length(),
                    self.roi_length_m
                ),
            ));
        }
        if !(self.h_min_m < 0.0 && self.h_max_m > 0.0) {
            return Err(Error::config(
                "h_min_m, h_max_m",
                format!(
                    "need h_min < 0 < h_max, got [{}, {}]",
                    self.h_min_m, self.h_max_m
                ),
            ));
        }
        if self.nz_anchors < 2 {
            return Err(Error::config("nz_anchors", "need at least 2 anchors"));
        }
        if self.nb_bins < 2 {
            return Err(Error::config("nb_bins", "need at least 2 bins"));
        }
        Ok(())
    }
}

/// Partial configuration for [`make_grid_spec`]. Unset fields keep their
/// defaults, except that grid counts are re-derived from the region size
/// when the region or the interval is overridden without explicit counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridOverrides {
    pub roi_width_m: Option<f64>,
    pub roi_length_m: Option<f64>,
    pub roi_start_m: Option<f64>,
    pub geom_interval_m: Option<f64>,
    pub nx_g: Option<usize>,
    pub ny_g: Option<usize>,
    pub texture_factor: Option<usize>,
    pub gaussian_factor: Option<usize>,
    pub h_min_m: Option<f64>,
    pub h_max_m: Option<f64>,
    pub nz_anchors: Option<usize>,
    pub nb_bins: Option<usize>,
}

pub fn make_grid_spec(o: &GridOverrides) -> Result<GridSpec> {
    let d = GridSpec::default();
    let interval = o.geom_interval_m.unwrap_or(d.geom_interval_m);
    let width = o.roi_width_m.unwrap_or(d.roi_width_m);
    let length = o.roi_length_m.unwrap_or(d.roi_length_m);
    if !(interval.is_finite() && interval > 0.0) {
        return Err(Error::config(
            "geom_interval_m",
            format!("must be positive, got {interval}"),
        ));
    }
    let derive =
        |given: Option<usize>, extent_overridden: bool, extent: f64, default: usize| match given {
            Some(n) => n,
            None if extent_overridden || o.geom_interval_m.is_some() => {
                (extent / interval).round().max(0.0) as usize
            }
            None => default,
        };
    let spec = GridSpec {
        roi_width_m: width,
        roi_length_m: length,
        roi_start_m: o.roi_start_m.unwrap_or(d.roi_start_m),
        geom_interval_m: interval,
        nx_g: derive(o.nx_g, o.roi_width_m.is_some(), width, d.nx_g),
        ny_g: derive(o.ny_g, o.roi_length_m.is_some(), length, d.ny_g),
        texture_factor: o.texture_factor.unwrap_or(d.texture_factor),
        gaussian_factor: o.gaussian_factor.unwrap_or(d.gaussian_factor),
        h_min_m: o.h_min_m.unwrap_or(d.h_min_m),
        h_max_m: o.h_max_m.unwrap_or(d.h_max_m),
        nz_anchors: o.nz_anchors.unwrap_or(d.nz_anchors),
        nb_bins: o.nb_bins.unwrap_or(d.nb_bins),
    };
    spec.validate()?;
    Ok(spec)
}

/// Row-major `(x, y)` cell centres at a level.
pub fn grid_centers(spec: &GridSpec, level: GridLevel) -> Vec<(f64, f64)> {
    let (rows, cols) = spec.shape(level);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(spec.cell_center(level, r, c));
        }
    }
    out
}

/// Per-cell elevation with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationMap {
    pub level: GridLevel,
    pub pitch_m: f64,
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
}

impl ElevationMap {
    pub fn new(
        spec: &GridSpec,
        level: GridLevel,
        values: Array2<f64>,
        valid: Array2<bool>,
    ) -> Result<Self> {
        let map = ElevationMap {
            level,
            pitch_m: spec.pitch(level),
            values,
            valid,
        };
        map.validate(spec)?;
        Ok(map)
    }

    /// All-valid map filled with `h`.
    pub fn constant(spec: &GridSpec, level: GridLevel, h: f64) -> Result<Self> {
        let shape = spec.shape(level);
        Self::new(
            spec,
            level,
            Array2::from_elem(shape, h),
            Array2::from_elem(shape, true),
        )
    }

    pub fn flat(spec: &GridSpec, level: GridLevel) -> Self {
        Self::constant(spec, level, 0.0).expect("zero lies inside any valid bounds")
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        let expected = spec.shape(self.level);
        if self.values.dim() != expected {
            return Err(Error::shape(
                format!("{} grid {:?}", self.level, expected),
                format!("{:?}", self.values.dim()),
            ));
        }
        if self.valid.dim() != expected {
            return Err(Error::shape(
                format!("{} mask {:?}", self.level, expected),
                format!("{:?}", self.valid.dim()),
            ));
        }
        for (&v, &ok) in self.values.iter().zip(self.valid.iter()) {
            if ok && !(v >= spec.h_min_m && v <= spec.h_max_m) {
                return Err(Error::invalid(
                    "elevation",
                    format!("value {v} outside [{}, {}]", spec.h_min_m, spec.h_max_m),
                ));
            }
        }
        Ok(())
    }
}

/// Pinhole camera with a world-to-camera rigid pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at world position `center`, looking along +y, pitched down by
    /// `pitch` radians and turned left by `yaw` radians about world z.
    #[allow(clippy::too_many_arguments)]
    pub fn looking_down(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        center: Vector3<f64>,
        pitch: f64,
        yaw: f64,
    ) -> Result<Self> {
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy_) = yaw.sin_cos();
        let forward = Vector3::new(-sy * cp, cy_ * cp, -sp);
        let right = Vector3::new(cy_, sy, 0.0);
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        Self::new(fx, fy, cx, cy, width, height, rotation, translation)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera", "image size must be non-zero"));
        }
        if !(self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::invalid(
                "camera",
                format!(
                    "principal point ({}, {}) outside {}x{} image",
                    self.cx, self.cy, self.width, self.height
                ),
            ));
        }
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-9 && (r.determinant() - 1.0).abs() <= 1e-9) {
            return Err(Error::invalid(
                "camera",
                "pose rotation must be orthonormal with determinant +1",
            ));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera", "translation must be finite"));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pixel coordinates of a camera-frame point (no depth check).
    pub fn project_cam(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-frame point at `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Isotropic scale for the default lattice.
pub const DEFAULT_SCALE_M: f64 = 0.002;
pub const DEFAULT_OPACITY: f64 = 1.0;

/// Scale that keeps the default scale-to-pitch ratio on any lattice.
pub fn default_scale_for(spec: &GridSpec) -> f64 {
    let reference = GridSpec::default().pitch(GridLevel::Gaussian);
    DEFAULT_SCALE_M * spec.pitch(GridLevel::Gaussian) / reference
}

/// Gaussians pinned to the finest BEV lattice.
///
/// Horizontal centres come from the lattice; only the height is stored.
/// Quaternions are `(w, x, y, z)`. `scale` is shared by every Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrid {
    pub spec: GridSpec,
    pub elevation: ElevationMap,
    pub sh: Vec<[f64; SH_COEFFS]>,
    pub scale: [f64; 3],
    pub rotation: Vec<[f64; 4]>,
    pub opacity: Vec<f64>,
}

impl GaussianGrid {
    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.spec.dims(GridLevel::Gaussian).0
    }

    /// World-space centre of Gaussian `i`.
    pub fn center(&self, i: usize) -> Vector3<f64> {
        let cols = self.cols();
        let (r, c) = (i / cols, i % cols);
        let (x, y) = self.spec.cell_center(GridLevel::Gaussian, r, c);
        Vector3::new(x, y, self.elevation.values[[r, c]])
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.elevation.level != GridLevel::Gaussian {
            return Err(Error::shape(
                "gaussian-level elevation",
                self.elevation.level,
            ));
        }
        self.elevation.validate(&self.spec)?;
        let n = self.spec.count(GridLevel::Gaussian);
        for (name, len) in [
            ("sh", self.sh.len()),
            ("rotation", self.rotation.len()),
            ("opacity", self.opacity.len()),
        ] {
            if len != n {
                return Err(Error::shape(format!("{n} {name} entries"), len));
            }
        }
        if !self.scale.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::invalid("gaussian grid", "scales must be positive"));
        }
        for q in &self.rotation {
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= 1e-6) {
                return Err(Error::invalid(
                    "gaussian grid",
                    format!("quaternion norm {norm} is not 1"),
                ));
            }
        }
        if !self.opacity.iter().all(|&o| (0.0..=1.0).contains(&o)) {
            return Err(Error::invalid("gaussian grid", "opacity outside [0, 1]"));
        }
        if !self.sh.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::invalid("gaussian grid", "non-finite SH coefficient"));
        }
        Ok(())
    }
}

/// Build a scene from Gaussian-resolution elevation and SH coefficients
/// (`sh` shaped `(12, rows, cols)`), with identity rotations, the default
/// scale and opacity.
pub fn init_gaussian_grid(
    spec: &GridSpec,
    elevation: &ElevationMap,
    sh: &Array3<f64>,
) -> Result<GaussianGrid> {
    let (rows, cols) = spec.shape(GridLevel::Gaussian);
    if elevation.level != GridLevel::Gaussian || elevation.shape() != (rows, cols) {
        return Err(Error::shape(
            format!("gaussian elevation {:?}", (rows, cols)),
            format!("{} {:?}", elevation.level, elevation.shape()),
        ));
    }
    if sh.dim() != (SH_COEFFS, rows, cols) {
        return Err(Error::shape(
            format!("SH grid {:?}", (SH_COEFFS, rows, cols)),
            format!("{:?}", sh.dim()),
        ));
    }
    let n = rows * cols;
    let mut coeffs = Vec::with_capacity(n);
    for r in 0..rows {
        for c in 0..cols {
            let mut k = [0.0; SH_COEFFS];
            for (i, v) in k.iter_mut().enumerate() {
                *v = sh[[i, r, c]];
            }
            coeffs.push(k);
        }
    }
    let s = if *spec == GridSpec::default() {
        DEFAULT_SCALE_M
    } else {
        default_scale_for(spec)
    };
    let grid = GaussianGrid {
        spec: spec.clone(),
        elevation: elevation.clone(),
        sh: coeffs,
        scale: [s; 3],
        rotation: vec![[1.0, 0.0, 0.0, 0.0]; n],
        opacity: vec![DEFAULT_OPACITY; n],
    };
    grid.validate()?;
    Ok(grid)
}

/// Half-pixel-aligned bilinear upsampling to `(rows, cols)`, which must be
/// integer multiples of the input shape. Edge samples clamp.
pub fn upsample_bilinear(src: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let (sr, sc) = src.dim();
    if sr == 0
        || sc == 0
        || !rows.is_multiple_of(sr)
        || !cols.is_multiple_of(sc)
        || rows < sr
        || cols < sc
    {
        return Err(Error::shape(
            format!("integer multiple of {:?}", (sr, sc)),
            format!("{:?}", (rows, cols)),
        ));
    }
    let row_taps = upsample_taps(sr, rows / sr);
    let col_taps = upsample_taps(sc, cols / sc);
    let mut out = Array2::zeros((rows, cols));
    for (r, &(r0, r1, wr)) in row_taps.iter().enumerate() {
        for (c, &(c0, c1, wc)) in col_taps.iter().enumerate() {
            let top = src[[r0, c0]] * (1.0 - wc) + src[[r0, c1]] * wc;
            let bottom = src[[r1, c0]] * (1.0 - wc) + src[[r1, c1]] * wc;
            out[[r, c]] = top * (1.0 - wr) + bottom * wr;
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_bilinear`]: scatters a fine-grid gradient back onto
/// the coarse grid of shape `(rows, cols)`.
pub fn upsample_bilinear_adjoint(
    grad: &Array2<f64>,
    rows: usize,
    cols: usize,
) -> Result<Array2<f64>> {
    let (fr, fc) = grad.dim();
    if rows == 0 || cols == 0 || fr % rows != 0 || fc % cols != 0 || fr < rows || fc < cols {
        return Err(Error::shape(
            format!("integer multiple of {:?}", (rows, cols)),
            format!("{:?}", (fr, fc)),
        ));
    }
    let row_taps = upsample_taps(rows, fr / rows);
    let col_taps = upsample_taps(cols, fc / cols);
    let mut out = Array2::zeros((rows, cols));
    for (r, &(r0, r1, wr)) in row_taps.iter().enumerate() {
        for (c, &(c0, c1, wc)) in col_taps.iter().enumerate() {
            let g = grad[[r, c]];
            out[[r0, c0]] += g * (1.0 - wr) * (1.0 - wc);
            out[[r0, c1]] += g * (1.0 - wr) * wc;
            out[[r1, c0]] += g * wr * (1.0 - wc);
            out[[r1, c1]] += g * wr * wc;
        }
    }
    Ok(out)
}

/// Source index pair and weight of the second tap for each output sample.
fn upsample_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|d| {
            let s = ((d as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Block mean of a fine grid down to `(rows, cols)`.
pub fn downsample_area(src: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let (sr, sc) = src.dim();
    if rows == 0 || cols == 0 || sr % rows != 0 || sc % cols != 0 {
        return Err(Error::shape(
            format!("integer multiple of {:?}", (rows, cols)),
            format!("{:?}", (sr, sc)),
        ));
    }
    let (fr, fc) = (sr / rows, sc / cols);
    let norm = (fr * fc) as f64;
    Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
        let mut acc = 0.0;
        for i in 0..fr {
            for j in 0..fc {
                acc += src[[r * fr + i, c * fc + j]];
            }
        }
        acc / norm
    }))
}

/// Bilinear upsampling applied to every channel of a `(C, rows, cols)` stack.
pub fn upsample_channels(src: &Array3<f64>, rows: usize, cols: usize) -> Result<Array3<f64>> {
    let ch = src.dim().0;
    let mut out = Array3::zeros((ch, rows, cols));
    for k in 0..ch {
        let up = upsample_bilinear(&src.index_axis(ndarray::Axis(0), k).to_owned(), rows, cols)?;
        out.index_axis_mut(ndarray::Axis(0), k).assign(&up);
    }
    Ok(out)
}

/// Elevation at another (finer) level by bilinear upsampling. Validity is
/// inherited from the nearest coarse cell.
pub fn elevation_to_level(
    spec: &GridSpec,
    map: &ElevationMap,
    level: GridLevel,
) -> Result<ElevationMap> {
    let (rows, cols) = spec.shape(level);
    let values = upsample_bilinear(&map.values, rows, cols)?;
    let (sr, sc) = map.shape();
    let (fr, fc) = (rows / sr, cols / sc);
    let valid = Array2::from_shape_fn((rows, cols), |(r, c)| map.valid[[r / fr, c / fc]]);
    ElevationMap::new(spec, level, values, valid)
}
