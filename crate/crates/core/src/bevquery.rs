//! BEV feature machinery on plain tensors: anchor voxels, projection,
//! bilinear sampling, softmax height fusion, bin decoding of elevation
//! offsets and the elevation-guided texture query.
//!
//! Tensor layouts follow the `(rows, cols) = (ny, nx)` grid convention:
//! voxel features are `(C, rows, cols, nz)`, BEV features `(C, rows, cols)`.

use nalgebra::Vector3;
use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::scene::{CameraModel, ElevationMap, GridLevel, GridSpec};

/// Perspective-view feature map, `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("feature map", "dimensions must be positive"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("feature map", "non-finite value"));
        }
        Ok(FeatureMap { data })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Anchor features `(C, rows, cols, nz)` with per-anchor logits
/// `(rows, cols, nz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeature {
    pub features: Array4<f64>,
    pub logits: Array3<f64>,
}

impl VoxelFeature {
    pub fn new(features: Array4<f64>, logits: Array3<f64>) -> Result<Self> {
        let (_, r, c, z) = features.dim();
        if logits.dim() != (r, c, z) {
            return Err(Error::shape(
                format!("logits {:?}", (r, c, z)),
                format!("{:?}", logits.dim()),
            ));
        }
        Ok(VoxelFeature { features, logits })
    }

    pub fn check_spec(&self, spec: &GridSpec) -> Result<()> {
        let (rows, cols) = spec.shape(GridLevel::Geometry);
        let (_, r, c, z) = self.features.dim();
        if (r, c, z) != (rows, cols, spec.nz_anchors) {
            return Err(Error::shape(
                format!("voxel grid {:?}", (rows, cols, spec.nz_anchors)),
                format!("{:?}", (r, c, z)),
            ));
        }
        Ok(())
    }
}

/// BEV feature `(C, rows, cols)` at a grid level.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature {
    pub level: GridLevel,
    pub data: Array3<f64>,
}

impl BevFeature {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn check_spec(&self, spec: &GridSpec) -> Result<()> {
        let (_, r, c) = self.data.dim();
        if (r, c) != spec.shape(self.level) {
            return Err(Error::shape(
                format!("{} grid {:?}", self.level, spec.shape(self.level)),
                format!("{:?}", (r, c)),
            ));
        }
        Ok(())
    }
}

/// `n` evenly spaced values over `[lo, hi]`, endpoints included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

/// Anchor heights of every geometry cell.
pub fn anchor_heights(spec: &GridSpec) -> Vec<f64> {
    linspace(spec.h_min_m, spec.h_max_m, spec.nz_anchors)
}

/// World points ordered `(row, col, anchor)`.
pub fn build_anchor_voxels(spec: &GridSpec) -> Vec<Vector3<f64>> {
    let (rows, cols) = spec.shape(GridLevel::Geometry);
    let heights = anchor_heights(spec);
    let mut out = Vec::with_capacity(rows * cols * heights.len());
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = spec.cell_center(GridLevel::Geometry, r, c);
            out.extend(heights.iter().map(|&z| Vector3::new(x, y, z)));
        }
    }
    out
}

/// Pixel positions, depths and validity of projected points.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub uv: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

/// A point is valid when it lies in front of the camera and its pixel
/// position falls within the image area `[-0.5, W - 0.5) × [-0.5, H - 0.5)`.
pub fn project_points(points: &[Vector3<f64>], cam: &CameraModel) -> Projection {
    let mut uv = Vec::with_capacity(points.len());
    let mut depth = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    let (w, h) = (cam.width as f64, cam.height as f64);
    for p in points {
        let t = cam.to_camera(p);
        let (u, v) = if t.z > 0.0 {
            cam.project_cam(&t)
        } else {
            (f64::NAN, f64::NAN)
        };
        let ok = t.z > 0.0 && u >= -0.5 && u < w - 0.5 && v >= -0.5 && v < h - 0.5;
        uv.push([u, v]);
        depth.push(t.z);
        valid.push(ok);
    }
    Projection { uv, depth, valid }
}

/// Bilinear samples `(points, C)`; masked points give zeros and corners
/// beyond the border clamp to the edge pixel.
pub fn sample_bilinear(fmap: &FeatureMap, coords: &[[f64; 2]], mask: &[bool]) -> Array2<f64> {
    let (ch, h, w) = fmap.data.dim();
    let mut out = Array2::zeros((coords.len(), ch));
    for (i, (&[u, v], &ok)) in coords.iter().zip(mask).enumerate() {
        if !ok {
            continue;
        }
        let x0f = u.floor();
        let y0f = v.floor();
        let fx = u - x0f;
        let fy = v - y0f;
        let clamp_x = |x: f64| x.clamp(0.0, (w - 1) as f64) as usize;
        let clamp_y = |y: f64| y.clamp(0.0, (h - 1) as f64) as usize;
        let (x0, x1) = (clamp_x(x0f), clamp_x(x0f + 1.0));
        let (y0, y1) = (clamp_y(y0f), clamp_y(y0f + 1.0));
        let weights = [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x1, fx * (1.0 - fy)),
            (y1, x0, (1.0 - fx) * fy),
            (y1, x1, fx * fy),
        ];
        for c in 0..ch {
            out[[i, c]] = weights
                .iter()
                .map(|&(y, x, wt)| wt * fmap.data[[c, y, x]])
                .sum();
        }
    }
    out
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax-weighted sum of anchor features along the height axis.
pub fn fuse_height(vox: &VoxelFeature) -> BevFeature {
    let (ch, rows, cols, _) = vox.features.dim();
    let mut out = Array3::zeros((ch, rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let logits: Vec<f64> = vox.logits.slice(ndarray::s![r, c, ..]).to_vec();
            let w = softmax(&logits);
            for k in 0..ch {
                out[[k, r, c]] = w
                    .iter()
                    .enumerate()
                    .map(|(z, wz)| vox.features[[k, r, c, z]] * wz)
                    .sum();
            }
        }
    }
    BevFeature {
        level: GridLevel::Geometry,
        data: out,
    }
}

/// Offset bin centres spanning `[h_min / 2, h_max / 2]`.
pub fn bin_values(spec: &GridSpec) -> Vec<f64> {
    linspace(0.5 * spec.h_min_m, 0.5 * spec.h_max_m, spec.nb_bins)
}

/// Per-cell expectation of bin values under the softmax of `logits`
/// (shape `(N_b, rows, cols)` at geometry level).
pub fn decode_offsets(spec: &GridSpec, logits: &BevFeature, bins: &[f64]) -> Result<ElevationMap> {
    if logits.channels() != bins.len() {
        return Err(Error::shape(
            format!("{} bin channels", bins.len()),
            logits.channels(),
        ));
    }
    if logits.level != GridLevel::Geometry {
        return Err(Error::shape("geometry-level logits", logits.level));
    }
    logits.check_spec(spec)?;
    let (_, rows, cols) = logits.data.dim();
    let (lo, hi) = bins
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let mut values = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let l: Vec<f64> = logits.data.slice(ndarray::s![.., r, c]).to_vec();
            let w = softmax(&l);
            let v: f64 = w.iter().zip(bins).map(|(w, e)| w * e).sum();
            // round-off can step a hair outside the convex hull
            values[[r, c]] = v.clamp(lo, hi);
        }
    }
    ElevationMap::new(
        spec,
        GridLevel::Geometry,
        values,
        Array2::from_elem((rows, cols), true),
    )
}

/// Global reference height from a raw activation, squashed into
/// `[h_min / 2, h_max / 2]` by an affine tanh.
pub fn scale_reference(spec: &GridSpec, raw: f64) -> f64 {
    let lo = 0.5 * spec.h_min_m;
    let hi = 0.5 * spec.h_max_m;
    0.5 * (hi + lo) + 0.5 * (hi - lo) * raw.tanh()
}

/// Reference plus offsets, clamped into the elevation bounds. Returns the map
/// and the number of cells that reached or crossed a bound.
pub fn compose_elevation(
    spec: &GridSpec,
    reference: f64,
    offsets: &ElevationMap,
) -> Result<(ElevationMap, usize)> {
    if offsets.level != GridLevel::Geometry {
        return Err(Error::shape("geometry-level offsets", offsets.level));
    }
    let mut clamped = 0;
    let values = offsets.values.mapv(|o| {
        let h = reference + o;
        if h >= spec.h_max_m || h <= spec.h_min_m {
            clamped += 1;
        }
        h.clamp(spec.h_min_m, spec.h_max_m)
    });
    let map = ElevationMap::new(spec, GridLevel::Geometry, values, offsets.valid.clone())?;
    Ok((map, clamped))
}

/// One query per texture cell at its predicted height. Returns the
/// texture-level feature and the projection validity mask.
pub fn elevation_guided_query(
    fmap: &FeatureMap,
    cam: &CameraModel,
    spec: &GridSpec,
    elevation: &ElevationMap,
) -> Result<(BevFeature, Array2<bool>)> {
    if elevation.level != GridLevel::Texture {
        return Err(Error::shape("texture-level elevation", elevation.level));
    }
    elevation.validate(spec)?;
    let (rows, cols) = spec.shape(GridLevel::Texture);
    let mut points = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = spec.cell_center(GridLevel::Texture, r, c);
            points.push(Vector3::new(x, y, elevation.values[[r, c]]));
        }
    }
    let proj = project_points(&points, cam);
    let samples = sample_bilinear(fmap, &proj.uv, &proj.valid);
    let ch = fmap.channels();
    let mut data = Array3::zeros((ch, rows, cols));
    for (i, row) in samples.axis_iter(Axis(0)).enumerate() {
        for k in 0..ch {
            data[[k, i / cols, i % cols]] = row[k];
        }
    }
    let mask = Array2::from_shape_vec((rows, cols), proj.valid).expect("one flag per cell");
    Ok((
        BevFeature {
            level: GridLevel::Texture,
            data,
        },
        mask,
    ))
}

/// Geometry-level voxel features sampled at every anchor, `(C, rows, cols,
/// nz)`, together with the anchor validity mask.
pub fn sample_anchor_voxels(
    fmap: &FeatureMap,
    cam: &CameraModel,
    spec: &GridSpec,
) -> (Array4<f64>, Array3<bool>) {
    let (rows, cols) = spec.shape(GridLevel::Geometry);
    let nz = spec.nz_anchors;
    let points = build_anchor_voxels(spec);
    let proj = project_points(&points, cam);
    let samples = sample_bilinear(fmap, &proj.uv, &proj.valid);
    let ch = fmap.channels();
    let mut feats = Array4::zeros((ch, rows, cols, nz));
    for (i, row) in samples.axis_iter(Axis(0)).enumerate() {
        let (r, c, z) = (i / (cols * nz), (i / nz) % cols, i % nz);
        for k in 0..ch {
            feats[[k, r, c, z]] = row[k];
        }
    }
    let mask = Array3::from_shape_vec((rows, cols, nz), proj.valid).expect("one flag per anchor");
    (feats, mask)
}
