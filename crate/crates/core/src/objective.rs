//! Losses and evaluation metrics: smooth-L1 elevation loss, coverage-masked
//! L1 + SSIM photometric loss with its analytic gradient, and the elevation
//! and image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::ElevationMap;
use crate::splat::RenderOutput;

/// Side length of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Transition point of the smooth-L1 elevation loss (m).
pub const SMOOTH_L1_BETA: f64 = 0.01;
/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Error threshold of the `>5mm` metric (m).
pub const ERROR_THRESHOLD_M: f64 = 0.005;
pub const DEFAULT_SEGMENTS: usize = 15;
/// Photometric loss weight between L1 and SSIM.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Smooth-L1 with transition `beta`; `beta <= 0` gives `|e|`.
pub fn smooth_l1(e: f64, beta: f64) -> f64 {
    let a = e.abs();
    if a < beta {
        0.5 * e * e / beta
    } else {
        a - 0.5 * beta.max(0.0)
    }
}

/// Derivative of [`smooth_l1`] w.r.t. `e`.
pub fn smooth_l1_grad(e: f64, beta: f64) -> f64 {
    if e.abs() < beta {
        e / beta
    } else {
        e.signum() * (e != 0.0) as u8 as f64
    }
}

fn check_same_grid(pred: &ElevationMap, gt: &ElevationMap) -> Result<()> {
    if pred.level != gt.level || pred.shape() != gt.shape() {
        return Err(Error::shape(
            format!("{} grid {:?}", gt.level, gt.shape()),
            format!("{} grid {:?}", pred.level, pred.shape()),
        ));
    }
    Ok(())
}

/// Errors `pred − gt` on the cells that `gt` marks valid.
fn valid_errors<'a>(
    pred: &'a ElevationMap,
    gt: &'a ElevationMap,
) -> impl Iterator<Item = f64> + 'a {
    pred.values
        .iter()
        .zip(gt.values.iter())
        .zip(gt.valid.iter())
        .filter(|(_, &v)| v)
        .map(|((p, g), _)| p - g)
}

/// Sum of smooth-L1 errors over the valid cells of `gt`.
pub fn elevation_loss(pred: &ElevationMap, gt: &ElevationMap) -> Result<f64> {
    elevation_loss_with(pred, gt, SMOOTH_L1_BETA)
}

pub fn elevation_loss_with(pred: &ElevationMap, gt: &ElevationMap, beta: f64) -> Result<f64> {
    check_same_grid(pred, gt)?;
    Ok(valid_errors(pred, gt).map(|e| smooth_l1(e, beta)).sum())
}

/// Elevation error statistics in metres and percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElevationMetrics {
    pub aae_m: f64,
    pub rmse_m: f64,
    /// Percentage of valid cells with `|e| > 5 mm`.
    pub pct_gt_5mm: f64,
    pub count: usize,
}

pub fn elevation_metrics(pred: &ElevationMap, gt: &ElevationMap) -> Result<ElevationMetrics> {
    check_same_grid(pred, gt)?;
    let (mut abs, mut sq, mut over, mut n) = (0.0, 0.0, 0usize, 0usize);
    for e in valid_errors(pred, gt) {
        abs += e.abs();
        sq += e * e;
        over += (e.abs() > ERROR_THRESHOLD_M) as usize;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("ground truth", "no valid cells"));
    }
    let nf = n as f64;
    Ok(ElevationMetrics {
        aae_m: abs / nf,
        rmse_m: (sq / nf).sqrt(),
        pct_gt_5mm: 100.0 * over as f64 / nf,
        count: n,
    })
}

/// Row ranges of a balanced split of `rows` into `n` contiguous segments;
/// the first `rows % n` segments get one extra row.
pub fn segment_rows(rows: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let (base, extra) = (rows / n.max(1), rows % n.max(1));
    let mut start = 0;
    (0..n)
        .map(|s| {
            let len = base + (s < extra) as usize;
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Mean absolute error per longitudinal segment, nearest first. A segment
/// with no valid cells is `None`.
pub fn segment_aae(
    pred: &ElevationMap,
    gt: &ElevationMap,
    n_segments: usize,
) -> Result<Vec<Option<f64>>> {
    check_same_grid(pred, gt)?;
    if n_segments == 0 {
        return Err(Error::invalid("segment count", "must be at least 1"));
    }
    Ok(segment_rows(gt.values.nrows(), n_segments)
        .into_iter()
        .map(|rows| {
            let (mut sum, mut n) = (0.0, 0usize);
            for r in rows {
                for c in 0..gt.values.ncols() {
                    if gt.valid[[r, c]] {
                        sum += (pred.values[[r, c]] - gt.values[[r, c]]).abs();
                        n += 1;
                    }
                }
            }
            (n > 0).then(|| sum / n as f64)
        })
        .collect())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Peak signal-to-noise ratio for images in [0, 1], capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    let n = a.data.len().max(1) as f64;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

/// PSNR over the pixels where `mask` is set; `None` if none are.
pub fn psnr_masked(a: &Image, b: &Image, mask: &[bool]) -> Result<Option<f64>> {
    a.check_shape(b)?;
    check_mask(a, mask)?;
    let ch = a.channels;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for k in 0..ch {
            let d = a.data[p * ch + k] - b.data[p * ch + k];
            sum += d * d;
        }
        n += ch;
    }
    Ok((n > 0).then(|| psnr_from_mse(sum / n as f64)))
}

fn check_mask(img: &Image, mask: &[bool]) -> Result<()> {
    if mask.len() != img.pixel_count() {
        return Err(Error::shape(
            format!("mask of {} pixels", img.pixel_count()),
            format!("{} entries", mask.len()),
        ));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn window_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut t: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Valid-mode separable window filter of a `w × h` plane; the output is
/// `(w − 10) × (h − 10)`, indexed by the window's top-left pixel.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .zip(&line[x..x + SSIM_WINDOW])
                .map(|(t, v)| t * v)
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let line = &rows[(y + k) * ow..(y + k + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(line) {
                *o += t * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters window values back onto the
/// `w × h` plane.
fn filter_valid_adjoint(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let line = &src[y * ow..(y + 1) * ow];
            for (o, v) in rows[(y + k) * ow..(y + k + 1) * ow].iter_mut().zip(line) {
                *o += t * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (k, t) in taps.iter().enumerate() {
                out[y * w + x + k] += t * v;
            }
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data
        .iter()
        .skip(c)
        .step_by(img.channels)
        .copied()
        .collect()
}

/// Window statistics of one channel pair.
struct WindowStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
}

impl WindowStats {
    fn new(x: &[f64], y: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Self {
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_x = filter_valid(x, w, h, taps);
        let mu_y = filter_valid(y, w, h, taps);
        let exx = filter_valid(&sq(x, x), w, h, taps);
        let eyy = filter_valid(&sq(y, y), w, h, taps);
        let exy = filter_valid(&sq(x, y), w, h, taps);
        let n = mu_x.len();
        WindowStats {
            var_x: (0..n).map(|i| exx[i] - mu_x[i] * mu_x[i]).collect(),
            var_y: (0..n).map(|i| eyy[i] - mu_y[i] * mu_y[i]).collect(),
            cov: (0..n).map(|i| exy[i] - mu_x[i] * mu_y[i]).collect(),
            mu_x,
            mu_y,
        }
    }

    fn ssim(&self, i: usize) -> f64 {
        let (mx, my) = (self.mu_x[i], self.mu_y[i]);
        (2.0 * mx * my + SSIM_C1) * (2.0 * self.cov[i] + SSIM_C2)
            / ((mx * mx + my * my + SSIM_C1) * (self.var_x[i] + self.var_y[i] + SSIM_C2))
    }

    /// Partials of window `i`'s SSIM w.r.t. the raw moments
    /// `(E[x], E[x²], E[xy])` of the first image.
    fn ssim_partials(&self, i: usize) -> [f64; 3] {
        let (mx, my) = (self.mu_x[i], self.mu_y[i]);
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * self.cov[i] + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = self.var_x[i] + self.var_y[i] + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        let d_mu = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
        let d_var = -s / b2;
        let d_cov = 2.0 * a1 / (b1 * b2);
        [d_mu - 2.0 * mx * d_var - my * d_cov, d_var, d_cov]
    }
}

/// SSIM averaged over channels then window positions, and the per-window
/// map (`(w − 10) × (h − 10)`, one channel).
#[derive(Debug, Clone, PartialEq)]
pub struct SsimResult {
    pub mean: f64,
    pub map: Image,
}

fn check_window(a: &Image) -> Result<()> {
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(
            "image",
            format!(
                "{}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
                a.width, a.height
            ),
        ));
    }
    Ok(())
}

pub fn ssim(a: &Image, b: &Image) -> Result<SsimResult> {
    a.check_shape(b)?;
    check_window(a)?;
    let taps = window_taps();
    let (w, h) = (a.width, a.height);
    let mut map = Image::new(w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW, 1);
    let inv_c = 1.0 / a.channels as f64;
    for c in 0..a.channels {
        let stats = WindowStats::new(&plane(a, c), &plane(b, c), w, h, &taps);
        for (i, m) in map.data.iter_mut().enumerate() {
            *m += stats.ssim(i) * inv_c;
        }
    }
    let mean = map.data.iter().sum::<f64>() / map.data.len() as f64;
    Ok(SsimResult { mean, map })
}

/// Window positions (top-left indexed) whose footprint lies entirely inside
/// `mask`.
pub fn full_windows(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Vec::new();
    }
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    // Summed-area table of uncovered pixels.
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                (!mask[y * w + x]) as u32 + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x]
                    - sat[y * (w + 1) + x];
        }
    }
    let k = SSIM_WINDOW;
    let mut out = vec![false; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let holes = sat[(y + k) * (w + 1) + x + k] + sat[y * (w + 1) + x]
                - sat[y * (w + 1) + x + k]
                - sat[(y + k) * (w + 1) + x];
            out[y * ow + x] = holes == 0;
        }
    }
    out
}

/// Mean SSIM over windows fully inside `mask` and its gradient w.r.t. `a`.
/// `None` when no window fits.
pub fn ssim_masked_with_grad(a: &Image, b: &Image, mask: &[bool]) -> Result<Option<(f64, Image)>> {
    a.check_shape(b)?;
    check_mask(a, mask)?;
    let (w, h) = (a.width, a.height);
    let windows = full_windows(mask, w, h);
    let count = windows.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(None);
    }
    let taps = window_taps();
    let norm = 1.0 / (count * a.channels) as f64;
    let mut total = 0.0;
    let mut grad = Image::new(w, h, a.channels);
    for c in 0..a.channels {
        let (x, y) = (plane(a, c), plane(b, c));
        let stats = WindowStats::new(&x, &y, w, h, &taps);
        let n = windows.len();
        let (mut g_mu, mut g_xx, mut g_xy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in (0..n).filter(|&i| windows[i]) {
            total += stats.ssim(i);
            let [d_mu, d_xx, d_xy] = stats.ssim_partials(i);
            g_mu[i] = d_mu * norm;
            g_xx[i] = d_xx * norm;
            g_xy[i] = d_xy * norm;
        }
        let t_mu = filter_valid_adjoint(&g_mu, w, h, &taps);
        let t_xx = filter_valid_adjoint(&g_xx, w, h, &taps);
        let t_xy = filter_valid_adjoint(&g_xy, w, h, &taps);
        for p in 0..w * h {
            grad.data[p * a.channels + c] = t_mu[p] + 2.0 * x[p] * t_xx[p] + y[p] * t_xy[p];
        }
    }
    Ok(Some((total * norm, grad)))
}

/// Mean absolute difference over covered pixels and all channels, with its
/// gradient w.r.t. `a`; `None` when nothing is covered.
pub fn l1_masked_with_grad(a: &Image, b: &Image, mask: &[bool]) -> Result<Option<(f64, Image)>> {
    a.check_shape(b)?;
    check_mask(a, mask)?;
    let covered = mask.iter().filter(|&&m| m).count();
    if covered == 0 {
        return Ok(None);
    }
    let ch = a.channels;
    let inv = 1.0 / (covered * ch) as f64;
    let mut grad = Image::new(a.width, a.height, ch);
    let mut sum = 0.0;
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for k in 0..ch {
            let i = p * ch + k;
            let d = a.data[i] - b.data[i];
            sum += d.abs();
            grad.data[i] = if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    Ok(Some((sum * inv, grad)))
}

/// Photometric loss value, its parts, and the gradient w.r.t. each rendered
/// RGB image.
#[derive(Debug, Clone)]
pub struct RgbLoss {
    pub value: f64,
    pub l1: f64,
    /// Sum over frames of `1 − masked SSIM`.
    pub dssim: f64,
    pub grads: Vec<Image>,
}

/// `Σ_i λ·L1(Î_i, I_i) + (1 − λ)(1 − SSIM(Î_i, I_i))` restricted to each
/// render's coverage. Frames without coverage contribute nothing; a frame
/// with coverage but no fully covered SSIM window contributes its L1 term
/// only.
pub fn rgb_loss(rendered: &[RenderOutput], actual: &[Image], lambda: f64) -> Result<RgbLoss> {
    if rendered.len() != actual.len() {
        return Err(Error::shape(
            format!("{} target images", rendered.len()),
            actual.len(),
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(
            "lambda",
            format!("{lambda} is outside [0, 1]"),
        ));
    }
    let mut out = RgbLoss {
        value: 0.0,
        l1: 0.0,
        dssim: 0.0,
        grads: Vec::with_capacity(rendered.len()),
    };
    let mut any = false;
    for (r, target) in rendered.iter().zip(actual) {
        let mut grad = Image::new(r.rgb.width, r.rgb.height, r.rgb.channels);
        if let Some((l1, g)) = l1_masked_with_grad(&r.rgb, target, &r.coverage)? {
            any = true;
            out.l1 += l1;
            out.value += lambda * l1;
            grad.data
                .iter_mut()
                .zip(&g.data)
                .for_each(|(o, v)| *o += lambda * v);
            if let Some((s, g)) = ssim_masked_with_grad(&r.rgb, target, &r.coverage)? {
                out.dssim += 1.0 - s;
                out.value += (1.0 - lambda) * (1.0 - s);
                grad.data
                    .iter_mut()
                    .zip(&g.data)
                    .for_each(|(o, v)| *o -= (1.0 - lambda) * v);
            }
        }
        out.grads.push(grad);
    }
    if !any {
        return Err(Error::Degenerate(
            "no rendered frame covers any pixel".into(),
        ));
    }
    Ok(out)
}

/// Evaluation summary. Elevation errors are reported in centimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aae_cm: Option<f64>,
    pub rmse_cm: Option<f64>,
    pub pct_gt_5mm: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    /// Per-segment AAE (cm), nearest first; `None` marks an empty segment.
    pub segment_aae_cm: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn empty() -> Self {
        MetricReport {
            aae_cm: None,
            rmse_cm: None,
            pct_gt_5mm: None,
            psnr_db: None,
            ssim: None,
            segment_aae_cm: Vec::new(),
        }
    }

    /// Fills the elevation fields from a prediction and ground truth.
    pub fn with_elevation(
        mut self,
        pred: &ElevationMap,
        gt: &ElevationMap,
        n_segments: usize,
    ) -> Result<Self> {
        let m = elevation_metrics(pred, gt)?;
        self.aae_cm = Some(m.aae_m * 100.0);
        self.rmse_cm = Some(m.rmse_m * 100.0);
        self.pct_gt_5mm = Some(m.pct_gt_5mm);
        self.segment_aae_cm = segment_aae(pred, gt, n_segments)?
            .into_iter()
            .map(|s| s.map(|v| v * 100.0))
            .collect();
        Ok(self)
    }

    /// Fills PSNR and SSIM as means over image pairs.
    pub fn with_images(mut self, pred: &[Image], gt: &[Image]) -> Result<Self> {
        if pred.len() != gt.len() || pred.is_empty() {
            return Err(Error::shape(
                format!("{} ground-truth images", pred.len()),
                gt.len(),
            ));
        }
        let (mut p, mut s) = (0.0, 0.0);
        for (a, b) in pred.iter().zip(gt) {
            p += psnr(a, b)?;
            s += ssim(a, b)?.mean;
        }
        self.psnr_db = Some(p / pred.len() as f64);
        self.ssim = Some(s / pred.len() as f64);
        Ok(self)
    }

    /// One `key=value` line per field; absent values print as `none`.
    pub fn to_key_value(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        let mut s = String::new();
        for (k, v) in [
            ("aae_cm", self.aae_cm),
            ("rmse_cm", self.rmse_cm),
            ("pct_gt_5mm", self.pct_gt_5mm),
            ("psnr_db", self.psnr_db),
            ("ssim", self.ssim),
        ] {
            s.push_str(&format!("{k}={}\n", fmt(v)));
        }
        for (i, v) in self.segment_aae_cm.iter().enumerate() {
            s.push_str(&format!("segment_aae_cm.{i:02}={}\n", fmt(*v)));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }
}
