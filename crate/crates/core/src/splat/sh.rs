//! Degree-1 real spherical harmonics colour.
//!
//! Coefficients are laid out per channel: `[r0, r1, r2, r3, g0, .., b3]`,
//! where index 0 is the constant band and 1..3 the linear band.

use nalgebra::Vector3;

use crate::scene::{SH_BASIS, SH_COEFFS};

pub const SH_C0: f64 = 0.282_094_791_773_878_1;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

#[inline]
fn raw_channel(k: &[f64], d: &Vector3<f64>) -> f64 {
    0.5 + SH_C0 * k[0] + SH_C1 * (-k[1] * d.y + k[2] * d.z - k[3] * d.x)
}

/// RGB in `[0, 1]` seen from unit direction `dir` (camera to Gaussian).
pub fn eval_sh(coeffs: &[f64; SH_COEFFS], dir: &Vector3<f64>) -> [f64; 3] {
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out = raw_channel(&coeffs[c * SH_BASIS..(c + 1) * SH_BASIS], dir).clamp(0.0, 1.0);
    }
    rgb
}

/// Colour together with a per-channel flag telling whether the clamp was
/// inactive (gradient passes).
pub(crate) fn eval_sh_with_mask(
    coeffs: &[f64; SH_COEFFS],
    dir: &Vector3<f64>,
) -> ([f64; 3], [bool; 3]) {
    let mut rgb = [0.0; 3];
    let mut pass = [false; 3];
    for c in 0..3 {
        let raw = raw_channel(&coeffs[c * SH_BASIS..(c + 1) * SH_BASIS], dir);
        pass[c] = (0.0..=1.0).contains(&raw);
        rgb[c] = raw.clamp(0.0, 1.0);
    }
    (rgb, pass)
}

/// Accumulates coefficient gradients into `d_coeffs` and returns the
/// gradient w.r.t. the direction.
pub(crate) fn eval_sh_vjp(
    coeffs: &[f64; SH_COEFFS],
    dir: &Vector3<f64>,
    pass: &[bool; 3],
    d_rgb: &[f64; 3],
    d_coeffs: &mut [f64; SH_COEFFS],
) -> Vector3<f64> {
    let mut d_dir = Vector3::zeros();
    for c in 0..3 {
        if !pass[c] {
            continue;
        }
        let g = d_rgb[c];
        let k = &coeffs[c * SH_BASIS..(c + 1) * SH_BASIS];
        let o = c * SH_BASIS;
        d_coeffs[o] += g * SH_C0;
        d_coeffs[o + 1] += -g * SH_C1 * dir.y;
        d_coeffs[o + 2] += g * SH_C1 * dir.z;
        d_coeffs[o + 3] += -g * SH_C1 * dir.x;
        d_dir += g * SH_C1 * Vector3::new(-k[3], -k[1], k[2]);
    }
    d_dir
}
