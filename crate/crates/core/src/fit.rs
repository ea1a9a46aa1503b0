//! Gradient-based scene optimization.
//!
//! [`test_time_optimize`] refines the colour, rotation and opacity of an
//! existing scene against one posed frame. [`fit_scene`] recovers elevation
//! and texture jointly from several frames, starting from a flat grey road.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::objective::{psnr_masked, rgb_loss, ssim_masked_with_grad, DEFAULT_LAMBDA};
use crate::scene::{
    default_scale_for, downsample_area, upsample_bilinear, upsample_bilinear_adjoint, CameraModel,
    ElevationMap, GaussianGrid, GridLevel, GridSpec, DEFAULT_OPACITY, DEFAULT_SCALE_M, SH_BASIS,
    SH_COEFFS,
};
use crate::splat::{render_backward_with, render_with, Gradients, RenderConfig, RenderOutput};

/// Per-group learning rates. A rate of zero freezes the group exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Zeroth-order SH coefficients.
    pub sh0: f64,
    /// First-order SH coefficients.
    pub sh1: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub elevation: f64,
    /// The shared scale.
    pub scale: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            sh0: 0.05,
            sh1: 0.001,
            rotation: 0.001,
            opacity: 0.001,
            elevation: 0.0,
            scale: 0.0,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        LearningRates {
            sh0: 0.0,
            sh1: 0.0,
            rotation: 0.0,
            opacity: 0.0,
            elevation: 0.0,
            scale: 0.0,
        }
    }

    fn all(&self) -> [(&'static str, f64); 6] {
        [
            ("sh0", self.sh0),
            ("sh1", self.sh1),
            ("rotation", self.rotation),
            ("opacity", self.opacity),
            ("elevation", self.elevation),
            ("scale", self.scale),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: LearningRates,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the L1 term in the photometric loss.
    pub lambda: f64,
    #[serde(skip)]
    pub render: RenderConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: LearningRates::default(),
            iterations: 60,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda: DEFAULT_LAMBDA,
            render: RenderConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in self.lr.all() {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config(
                    format!("lr.{name}"),
                    format!("{lr} must be finite and >= 0"),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1, beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(
                "lambda",
                format!("{} is outside [0, 1]", self.lambda),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates of one parameter group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam update of `params` at step `t` (1-based).
/// A zero learning rate leaves `params` untouched. Non-finite gradients are
/// rejected before anything is modified.
pub fn adam_update(
    group: &'static str,
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    lr: f64,
    t: u64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            format!("{} {group} gradients", params.len()),
            grads.len(),
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NanGradient { group });
    }
    if moments.m.len() != params.len() {
        moments.m = vec![0.0; params.len()];
        moments.v = vec![0.0; params.len()];
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        moments.m[i] = b1 * moments.m[i] + (1.0 - b1) * g;
        moments.v[i] = b2 * moments.v[i] + (1.0 - b2) * g * g;
        if lr != 0.0 {
            let m_hat = moments.m[i] / c1;
            let v_hat = moments.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Adam state for every parameter group of a [`GaussianGrid`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub sh0: Moments,
    pub sh1: Moments,
    pub rotation: Moments,
    pub opacity: Moments,
    pub elevation: Moments,
    pub scale: Moments,
}

fn split_sh(sh: &[[f64; SH_COEFFS]], first_order: bool) -> Vec<f64> {
    sh.iter()
        .flat_map(|k| {
            k.iter()
                .enumerate()
                .filter(move |(i, _)| (i % SH_BASIS != 0) == first_order)
                .map(|(_, v)| *v)
        })
        .collect()
}

fn merge_sh(sh: &mut [[f64; SH_COEFFS]], flat: &[f64], first_order: bool) {
    let mut it = flat.iter();
    for k in sh.iter_mut() {
        for (i, v) in k.iter_mut().enumerate() {
            if (i % SH_BASIS != 0) == first_order {
                *v = *it.next().expect("flat SH length");
            }
        }
    }
}

/// Applies one Adam step to every group of `grid` with a nonzero rate, then
/// renormalizes quaternions and clamps opacities to `[0, 1]` for the groups
/// that moved.
pub fn adam_step(
    grid: &mut GaussianGrid,
    grads: &Gradients,
    state: &mut AdamState,
    config: &OptimizerConfig,
) -> Result<()> {
    let n = grid.len();
    if grads.sh.len() != n
        || grads.opacity.len() != n
        || grads.rotation.len() != n
        || grads.elevation.len() != n
    {
        return Err(Error::shape(
            format!("gradients for {n} Gaussians"),
            grads.opacity.len(),
        ));
    }
    for (group, ok) in [
        (
            "sh0",
            split_sh(&grads.sh, false).iter().all(|v| v.is_finite()),
        ),
        (
            "sh1",
            split_sh(&grads.sh, true).iter().all(|v| v.is_finite()),
        ),
        (
            "rotation",
            grads.rotation.iter().flatten().all(|v| v.is_finite()),
        ),
        ("opacity", grads.opacity.iter().all(|v| v.is_finite())),
        ("elevation", grads.elevation.iter().all(|v| v.is_finite())),
        ("scale", grads.scale.iter().all(|v| v.is_finite())),
    ] {
        if !ok {
            return Err(Error::NanGradient { group });
        }
    }
    state.step += 1;
    let t = state.step;
    let lr = &config.lr;

    for (first_order, rate, moments, name) in [
        (false, lr.sh0, &mut state.sh0, "sh0"),
        (true, lr.sh1, &mut state.sh1, "sh1"),
    ] {
        let mut p = split_sh(&grid.sh, first_order);
        adam_update(
            name,
            &mut p,
            &split_sh(&grads.sh, first_order),
            moments,
            rate,
            t,
            config,
        )?;
        if rate != 0.0 {
            merge_sh(&mut grid.sh, &p, first_order);
        }
    }

    let mut rot: Vec<f64> = grid.rotation.iter().flatten().copied().collect();
    let g_rot: Vec<f64> = grads.rotation.iter().flatten().copied().collect();
    adam_update(
        "rotation",
        &mut rot,
        &g_rot,
        &mut state.rotation,
        lr.rotation,
        t,
        config,
    )?;
    if lr.rotation != 0.0 {
        for (q, chunk) in grid.rotation.iter_mut().zip(rot.chunks_exact(4)) {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            *q = if norm > 0.0 && norm.is_finite() {
                std::array::from_fn(|k| chunk[k] / norm)
            } else {
                [1.0, 0.0, 0.0, 0.0]
            };
        }
    }

    adam_update(
        "opacity",
        &mut grid.opacity,
        &grads.opacity,
        &mut state.opacity,
        lr.opacity,
        t,
        config,
    )?;
    if lr.opacity != 0.0 {
        grid.opacity.iter_mut().for_each(|o| *o = o.clamp(0.0, 1.0));
    }

    let mut elev: Vec<f64> = grid.elevation.values.iter().copied().collect();
    adam_update(
        "elevation",
        &mut elev,
        &grads.elevation,
        &mut state.elevation,
        lr.elevation,
        t,
        config,
    )?;
    if lr.elevation != 0.0 {
        let (lo, hi) = (grid.spec.h_min_m, grid.spec.h_max_m);
        for (dst, v) in grid.elevation.values.iter_mut().zip(elev) {
            *dst = v.clamp(lo, hi);
        }
    }

    adam_update(
        "scale",
        &mut grid.scale,
        &grads.scale,
        &mut state.scale,
        lr.scale,
        t,
        config,
    )?;
    if lr.scale != 0.0 {
        grid.scale.iter_mut().for_each(|s| *s = s.max(1e-6));
    }
    Ok(())
}

/// A posed image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub camera: CameraModel,
}

/// Per-iteration record; entry 0 is the initial state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub loss: Vec<f64>,
    /// Coverage-masked PSNR on the evaluation view.
    pub psnr: Vec<f64>,
    /// Coverage-masked SSIM on the evaluation view.
    pub ssim: Vec<f64>,
    /// Wall time of the iteration in milliseconds (0 for the initial entry).
    pub ms: Vec<f64>,
}

impl FitTrace {
    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }

    fn push(&mut self, loss: f64, quality: (f64, f64), ms: f64) {
        self.loss.push(loss);
        self.psnr.push(quality.0);
        self.ssim.push(quality.1);
        self.ms.push(ms);
    }

    /// `iteration,loss,psnr,ssim,ms` lines with a header.
    pub fn to_csv(&self) -> String {
        self.csv(true)
    }

    /// Same as [`FitTrace::to_csv`] without the timing column, so equal runs
    /// produce equal bytes.
    pub fn to_csv_without_timing(&self) -> String {
        self.csv(false)
    }

    fn csv(&self, timing: bool) -> String {
        let mut s = String::from(if timing {
            "iteration,loss,psnr,ssim,ms\n"
        } else {
            "iteration,loss,psnr,ssim\n"
        });
        for i in 0..self.len() {
            s.push_str(&format!(
                "{i},{},{},{}",
                self.loss[i], self.psnr[i], self.ssim[i]
            ));
            if timing {
                s.push_str(&format!(",{:.3}", self.ms[i]));
            }
            s.push('\n');
        }
        s
    }

    /// Trailing moving average of the loss over `window` entries.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        if self.len() < w {
            return Vec::new();
        }
        self.loss
            .windows(w)
            .map(|s| s.iter().sum::<f64>() / w as f64)
            .collect()
    }

    /// Whether the `window`-smoothed loss never increases.
    pub fn smoothed_non_increasing(&self, window: usize) -> bool {
        self.smoothed_loss(window).windows(2).all(|p| p[1] <= p[0])
    }
}

fn quality(out: &RenderOutput, target: &Image) -> Result<(f64, f64)> {
    let p = psnr_masked(&out.rgb, target, &out.coverage)?.unwrap_or(f64::NAN);
    let s = ssim_masked_with_grad(&out.rgb, target, &out.coverage)?.map_or(f64::NAN, |(s, _)| s);
    Ok((p, s))
}

fn check_loss(loss: f64, iteration: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NanLoss { iteration })
    }
}

/// Refines a scene against a single frame. Metrics in the trace are taken on
/// `eval` when given, otherwise on the training frame.
pub fn test_time_optimize(
    grid: &GaussianGrid,
    frame: &Frame,
    eval: Option<&Frame>,
    config: &OptimizerConfig,
) -> Result<(GaussianGrid, FitTrace)> {
    config.validate()?;
    grid.validate()?;
    let cfg = &config.render;
    let mut grid = grid.clone();
    let mut state = AdamState::default();
    let mut trace = FitTrace::default();
    let eval_quality = |g: &GaussianGrid, train: &RenderOutput| -> Result<(f64, f64)> {
        match eval {
            Some(e) => quality(&render_with(g, &e.camera, cfg)?, &e.image),
            None => quality(train, &frame.image),
        }
    };

    let mut out = render_with(&grid, &frame.camera, cfg)?;
    let mut loss = rgb_loss(
        std::slice::from_ref(&out),
        std::slice::from_ref(&frame.image),
        config.lambda,
    )?;
    check_loss(loss.value, 0)?;
    trace.push(loss.value, eval_quality(&grid, &out)?, 0.0);

    for it in 1..=config.iterations {
        let start = Instant::now();
        let grads = render_backward_with(&grid, &frame.camera, &loss.grads[0], cfg)?;
        adam_step(&mut grid, &grads, &mut state, config)?;
        out = render_with(&grid, &frame.camera, cfg)?;
        loss = rgb_loss(
            std::slice::from_ref(&out),
            std::slice::from_ref(&frame.image),
            config.lambda,
        )?;
        check_loss(loss.value, it)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        trace.push(loss.value, eval_quality(&grid, &out)?, ms);
        log::debug!("tto iteration {it}: loss {:.6}", loss.value);
    }
    Ok((grid, trace))
}

/// Settings of [`fit_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub optimizer: OptimizerConfig,
    /// Optimize elevation at geometry resolution and upsample it to the
    /// Gaussian lattice each iteration.
    pub coarse_elevation: bool,
    /// Iterations during which elevation stays frozen while texture settles.
    pub elevation_warmup: usize,
    /// Elevation learning rate reached at the last iteration. The rate decays
    /// exponentially from `optimizer.lr.elevation` after the warmup.
    pub elevation_lr_final: f64,
    /// Abort when the loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
    /// Frame whose PSNR and SSIM go into the trace.
    pub eval_frame: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            optimizer: OptimizerConfig {
                lr: LearningRates {
                    sh0: 0.05,
                    sh1: 0.001,
                    rotation: 0.0,
                    opacity: 0.0,
                    elevation: 0.001,
                    scale: 0.0,
                },
                iterations: 200,
                ..OptimizerConfig::default()
            },
            coarse_elevation: true,
            elevation_warmup: 40,
            elevation_lr_final: 0.0001,
            divergence_factor: 10.0,
            eval_frame: 0,
        }
    }
}

/// Elevation learning rate at iteration `it` (1-based).
fn elevation_rate(config: &FitConfig, it: usize) -> f64 {
    let (lr0, lr1) = (config.optimizer.lr.elevation, config.elevation_lr_final);
    let warmup = config.elevation_warmup;
    if it <= warmup || lr0 == 0.0 {
        return 0.0;
    }
    let span = config.optimizer.iterations.saturating_sub(warmup + 1);
    if span == 0 {
        return lr0;
    }
    let t = (it - warmup - 1) as f64 / span as f64;
    lr0 * (lr1 / lr0).powf(t)
}

/// Output of [`fit_scene`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub grid: GaussianGrid,
    /// Geometry-resolution elevation (area average of the Gaussian lattice).
    pub elevation: ElevationMap,
    pub trace: FitTrace,
}

/// Flat, mid-grey starting scene with identity rotations.
pub fn neutral_grid(spec: &GridSpec) -> Result<GaussianGrid> {
    spec.validate()?;
    let n = spec.count(GridLevel::Gaussian);
    let s = if *spec == GridSpec::default() {
        DEFAULT_SCALE_M
    } else {
        default_scale_for(spec)
    };
    let grid = GaussianGrid {
        spec: spec.clone(),
        elevation: ElevationMap::flat(spec, GridLevel::Gaussian),
        sh: vec![[0.0; SH_COEFFS]; n],
        scale: [s; 3],
        rotation: vec![[1.0, 0.0, 0.0, 0.0]; n],
        opacity: vec![DEFAULT_OPACITY; n],
    };
    grid.validate()?;
    Ok(grid)
}

/// Joint elevation and texture recovery from at least two posed frames.
pub fn fit_scene(spec: &GridSpec, frames: &[Frame], config: &FitConfig) -> Result<FitResult> {
    if frames.len() < 2 {
        return Err(Error::invalid(
            "frames",
            format!(
                "{} given; recovering geometry needs at least 2 views",
                frames.len()
            ),
        ));
    }
    config.optimizer.validate()?;
    if config.eval_frame >= frames.len() {
        return Err(Error::config(
            "eval_frame",
            format!("{} >= frame count {}", config.eval_frame, frames.len()),
        ));
    }
    if !(config.elevation_lr_final > 0.0 && config.elevation_lr_final.is_finite()) {
        return Err(Error::config("elevation_lr_final", "must be positive"));
    }
    if !(config.divergence_factor > 1.0) {
        return Err(Error::config("divergence_factor", "must exceed 1"));
    }
    let opt = &config.optimizer;
    let cfg = &opt.render;
    let mut grid = neutral_grid(spec)?;
    let (g_rows, g_cols) = spec.shape(GridLevel::Gaussian);
    let level = if config.coarse_elevation {
        GridLevel::Geometry
    } else {
        GridLevel::Gaussian
    };
    let (p_rows, p_cols) = spec.shape(level);
    let mut elevation = Array2::<f64>::zeros((p_rows, p_cols));
    let mut elev_moments = Moments::default();

    // The grid-level optimizer never touches elevation here.
    let mut grid_opt = *opt;
    grid_opt.lr.elevation = 0.0;
    let mut state = AdamState::default();
    let images: Vec<Image> = frames.iter().map(|f| f.image.clone()).collect();

    let evaluate = |grid: &GaussianGrid,
                    iteration: usize|
     -> Result<(Vec<RenderOutput>, crate::objective::RgbLoss)> {
        let outs = frames
            .iter()
            .map(|f| render_with(grid, &f.camera, cfg))
            .collect::<Result<Vec<_>>>()?;
        let loss = rgb_loss(&outs, &images, opt.lambda)?;
        check_loss(loss.value, iteration)?;
        Ok((outs, loss))
    };

    let mut trace = FitTrace::default();
    let (mut outs, mut loss) = evaluate(&grid, 0)?;
    let limit = config.divergence_factor * loss.value;
    trace.push(
        loss.value,
        quality(&outs[config.eval_frame], &images[config.eval_frame])?,
        0.0,
    );

    for it in 1..=opt.iterations {
        let start = Instant::now();
        let mut grads = Gradients::zeros(grid.len());
        for (f, adj) in frames.iter().zip(&loss.grads) {
            grads.accumulate(&render_backward_with(&grid, &f.camera, adj, cfg)?);
        }
        adam_step(&mut grid, &grads, &mut state, &grid_opt)?;

        let fine = Array2::from_shape_vec((g_rows, g_cols), grads.elevation)
            .map_err(|e| Error::invalid("elevation gradient", e.to_string()))?;
        let g_param = if config.coarse_elevation {
            upsample_bilinear_adjoint(&fine, p_rows, p_cols)?
        } else {
            fine
        };
        let rate = elevation_rate(config, it);
        let flat = elevation.as_slice_mut().expect("standard layout");
        adam_update(
            "elevation",
            flat,
            g_param.as_slice().expect("standard layout"),
            &mut elev_moments,
            rate,
            it as u64,
            opt,
        )?;
        flat.iter_mut()
            .for_each(|h| *h = h.clamp(spec.h_min_m, spec.h_max_m));
        grid.elevation.values = if config.coarse_elevation {
            upsample_bilinear(&elevation, g_rows, g_cols)?
        } else {
            elevation.clone()
        };

        (outs, loss) = evaluate(&grid, it)?;
        if loss.value > limit {
            return Err(Error::Diverged {
                iteration: it,
                loss: loss.value,
                limit,
            });
        }
        let ms = start.elapsed().as_secs_f64() * 1e3;
        trace.push(
            loss.value,
            quality(&outs[config.eval_frame], &images[config.eval_frame])?,
            ms,
        );
        log::debug!("fit iteration {it}: loss {:.6}", loss.value);
    }

    let (rows, cols) = spec.shape(GridLevel::Geometry);
    let geometry = downsample_area(&grid.elevation.values, rows, cols)?;
    let elevation = ElevationMap::new(
        spec,
        GridLevel::Geometry,
        geometry,
        Array2::from_elem((rows, cols), true),
    )?;
    Ok(FitResult {
        grid,
        elevation,
        trace,
    })
}
