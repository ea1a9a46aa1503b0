//! 3D covariance, the perspective Jacobian and the projected 2D covariance,
//! with their vector-Jacobian products.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::scene::CameraModel;

/// Tolerance on `|q| - 1` accepted by [`world_covariance`].
pub const QUATERNION_TOLERANCE: f64 = 1e-6;

/// Rotation matrix of a `(w, x, y, z)` quaternion after normalisation.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = Vector4::from(*q).norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a rotation-matrix gradient back to the raw quaternion components
/// of [`quat_to_matrix`]. The result is tangent to the sphere at `q`.
pub fn quat_to_matrix_vjp(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let raw = Vector4::from(*q);
    let n = raw.norm();
    let u = raw / n;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gu = Vector4::new(dw, dx, dy, dz);
    let gq = (gu - u * u.dot(&gu)) / n;
    [gq[0], gq[1], gq[2], gq[3]]
}

/// `Σ = R S Sᵀ Rᵀ` for a unit quaternion and per-axis scales.
pub fn world_covariance(scale: &[f64; 3], q: &[f64; 4]) -> Result<Matrix3<f64>> {
    let n = Vector4::from(*q).norm();
    if !((n - 1.0).abs() <= QUATERNION_TOLERANCE) {
        return Err(Error::invalid("quaternion", format!("norm {n} is not 1")));
    }
    if !scale.iter().all(|&s| s.is_finite() && s > 0.0) {
        return Err(Error::invalid("scale", "scales must be positive"));
    }
    Ok(covariance_unchecked(scale, q))
}

pub(crate) fn covariance_unchecked(scale: &[f64; 3], q: &[f64; 4]) -> Matrix3<f64> {
    let a = quat_to_matrix(q) * Matrix3::from_diagonal(&Vector3::from(*scale));
    a * a.transpose()
}

/// Affine approximation of the pinhole projection at a camera-frame point.
pub fn camera_jacobian(p: &Vector3<f64>, cam: &CameraModel) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz2,
    )
}

/// `Σ' = J W Σ Wᵀ Jᵀ + blur · I`.
pub fn project_covariance(
    sigma: &Matrix3<f64>,
    cam_rotation: &Matrix3<f64>,
    jac: &Matrix2x3<f64>,
    blur: f64,
) -> Matrix2<f64> {
    let t = jac * cam_rotation;
    let cov = t * sigma * t.transpose();
    // symmetrise against round-off
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    Matrix2::new(cov[(0, 0)] + blur, off, off, cov[(1, 1)] + blur)
}

/// Conic `(a, b, c)` of a 2×2 covariance, i.e. the entries of its inverse
/// `[[a, b], [b, c]]`. `None` when not positive-definite.
pub fn conic(cov: &Matrix2<f64>) -> Option<[f64; 3]> {
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    if !(det > 0.0) || !(cov[(0, 0)] > 0.0) {
        return None;
    }
    Some([cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det])
}

/// Gradient w.r.t. the (symmetric) 2D covariance given the gradient w.r.t.
/// the conic entries, where `b` enters the quadratic form twice.
pub(crate) fn conic_vjp(cov: &Matrix2<f64>, d_conic: &[f64; 3]) -> Matrix2<f64> {
    let k = cov.try_inverse().unwrap_or_else(Matrix2::zeros);
    let gk = Matrix2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
    -(k * gk * k)
}

/// Gradients of a scalar through `Σ' = J W Σ Wᵀ Jᵀ + blur · I` given the
/// symmetric gradient `g` w.r.t. `Σ'`. Returns `(dΣ, dJ)`.
pub(crate) fn project_covariance_vjp(
    sigma: &Matrix3<f64>,
    cam_rotation: &Matrix3<f64>,
    jac: &Matrix2x3<f64>,
    g: &Matrix2<f64>,
) -> (Matrix3<f64>, Matrix2x3<f64>) {
    let m = cam_rotation * sigma * cam_rotation.transpose();
    let d_m = jac.transpose() * g * jac;
    let d_sigma = cam_rotation.transpose() * d_m * cam_rotation;
    let d_jac = 2.0 * g * jac * m;
    (d_sigma, d_jac)
}

/// Gradient w.r.t. the camera-frame point through [`camera_jacobian`].
pub(crate) fn camera_jacobian_vjp(
    p: &Vector3<f64>,
    cam: &CameraModel,
    d_jac: &Matrix2x3<f64>,
) -> Vector3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let dx = d_jac[(0, 2)] * (-cam.fx * iz2);
    let dy = d_jac[(1, 2)] * (-cam.fy * iz2);
    let dz = d_jac[(0, 0)] * (-cam.fx * iz2)
        + d_jac[(0, 2)] * (2.0 * cam.fx * p.x * iz3)
        + d_jac[(1, 1)] * (-cam.fy * iz2)
        + d_jac[(1, 2)] * (2.0 * cam.fy * p.y * iz3);
    Vector3::new(dx, dy, dz)
}

/// Gradients of `Σ = R diag(s)² Rᵀ` w.r.t. scale and raw quaternion given a
/// symmetric `dΣ`.
pub(crate) fn covariance_vjp(
    scale: &[f64; 3],
    q: &[f64; 4],
    d_sigma: &Matrix3<f64>,
) -> ([f64; 3], [f64; 4]) {
    let r = quat_to_matrix(q);
    let a = r * Matrix3::from_diagonal(&Vector3::from(*scale));
    let d_a = 2.0 * d_sigma * a;
    let mut d_scale = [0.0; 3];
    let mut d_r = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            d_r[(i, j)] = d_a[(i, j)] * scale[j];
            d_scale[j] += d_a[(i, j)] * r[(i, j)];
        }
    }
    (d_scale, quat_to_matrix_vjp(q, &d_r))
}
