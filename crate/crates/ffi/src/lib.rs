//! C interface to the roadsplat renderer, metrics and optimizer.
//!
//! Scenes and cameras are opaque handles created by `rs_*_new`/`rs_*_load`
//! functions and released with the matching `rs_*_free`. Every fallible
//! function returns an [`RsStatus`]; on failure a description is available
//! from [`rs_last_error`] on the same thread. Images are exchanged as
//! row-major interleaved `double` buffers owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use roadsplat::fit::{test_time_optimize, Frame, OptimizerConfig};
use roadsplat::image::Image;
use roadsplat::objective::{elevation_metrics, psnr, ssim};
use roadsplat::scene::{CameraModel, ElevationMap, GaussianGrid, GridLevel, SH_COEFFS};
use roadsplat::splat::{render, render_backward};
use roadsplat::synth::{generate_scene, parse_recipe};
use roadsplat::{io, Error};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferSize = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Panic = 7,
}

/// A Gaussian grid scene.
pub struct RsScene {
    grid: GaussianGrid,
}

/// A pinhole camera with its pose.
pub struct RsCamera {
    camera: CameraModel,
}

/// Elevation error summary (metres and percent).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RsElevationMetrics {
    pub aae_m: f64,
    pub rmse_m: f64,
    pub pct_gt_5mm: f64,
    pub count: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior NULs removed"));
}

fn status_of(err: &Error) -> RsStatus {
    match err {
        Error::Io { .. } => RsStatus::Io,
        Error::Format { .. } => RsStatus::Format,
        Error::NanGradient { .. } | Error::NanLoss { .. } | Error::Diverged { .. } => {
            RsStatus::Numeric
        }
        _ => RsStatus::InvalidArgument,
    }
}

/// Failure inside the shim itself, before any library call.
struct Fail(RsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RsStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(RsStatus::NullPointer, format!("`{what}` is NULL"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn string_arg(p: *const c_char, what: &str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(RsStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a>(
    p: *const f64,
    len: usize,
    expected: usize,
    what: &str,
) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != expected {
        return Err(Fail(
            RsStatus::BufferSize,
            format!("`{what}` holds {len} values, expected {expected}"),
        ));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(
    p: *mut f64,
    len: usize,
    expected: usize,
    what: &str,
) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != expected {
        return Err(Fail(
            RsStatus::BufferSize,
            format!("`{what}` holds {len} values, expected {expected}"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn image_of(data: &[f64], width: u32, height: u32, channels: u32) -> Image {
    Image {
        width: width as usize,
        height: height as usize,
        channels: channels as usize,
        data: data.to_vec(),
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn rs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a scene written by the `roadsplat` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rs_scene_load(path: *const c_char, out: *mut *mut RsScene) -> RsStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let path = PathBuf::from(string_arg(path, "path")?);
        let grid = io::read_grid(&path)?;
        *out = Box::into_raw(Box::new(RsScene { grid }));
        Ok(())
    })
}

/// Builds the ground-truth scene of a JSON recipe.
///
/// # Safety
/// `recipe_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rs_scene_from_recipe(
    recipe_json: *const c_char,
    out: *mut *mut RsScene,
) -> RsStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let text = string_arg(recipe_json, "recipe_json")?;
        let recipe = parse_recipe(&text, "<recipe>".as_ref())?;
        let spec = recipe.grid_spec()?;
        let grid = generate_scene(&recipe, &spec)?.gaussian_grid()?;
        *out = Box::into_raw(Box::new(RsScene { grid }));
        Ok(())
    })
}

/// Writes `scene` in the `roadsplat` scene format (single precision).
///
/// # Safety
/// `scene` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rs_scene_save(scene: *const RsScene, path: *const c_char) -> RsStatus {
    guard(|| {
        let scene = borrow(scene, "scene")?;
        let path = PathBuf::from(string_arg(path, "path")?);
        io::write_grid(&path, &scene.grid)?;
        Ok(())
    })
}

/// Number of Gaussians, or 0 for a NULL handle.
///
/// # Safety
/// `scene` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn rs_scene_len(scene: *const RsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.grid.len())
}

/// # Safety
/// `scene` must be NULL or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn rs_scene_free(scene: *mut RsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Creates a camera from intrinsics and a world-to-camera pose
/// (`rotation` row-major 3×3, `translation` 3 values).
///
/// # Safety
/// `rotation` must point to 9 doubles, `translation` to 3, `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn rs_camera_new(
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    rotation: *const f64,
    translation: *const f64,
    out: *mut *mut RsCamera,
) -> RsStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let r = slice_arg(rotation, 9, 9, "rotation")?;
        let t = slice_arg(translation, 3, 3, "translation")?;
        let camera = CameraModel::new(
            fx,
            fy,
            cx,
            cy,
            width as usize,
            height as usize,
            Matrix3::from_row_slice(r),
            Vector3::from_column_slice(t),
        )?;
        *out = Box::into_raw(Box::new(RsCamera { camera }));
        Ok(())
    })
}

/// Camera centred at `(x, y, z)` in road coordinates, pitched down by
/// `pitch` radians and yawed by `yaw`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rs_camera_looking_down(
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    x: f64,
    y: f64,
    z: f64,
    pitch: f64,
    yaw: f64,
    out: *mut *mut RsCamera,
) -> RsStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let camera = CameraModel::looking_down(
            fx,
            fy,
            cx,
            cy,
            width as usize,
            height as usize,
            Vector3::new(x, y, z),
            pitch,
            yaw,
        )?;
        *out = Box::into_raw(Box::new(RsCamera { camera }));
        Ok(())
    })
}

/// Reads a camera text file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rs_camera_load(path: *const c_char, out: *mut *mut RsCamera) -> RsStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let path = PathBuf::from(string_arg(path, "path")?);
        let camera = io::read_camera(&path)?;
        *out = Box::into_raw(Box::new(RsCamera { camera }));
        Ok(())
    })
}

/// Image size of `camera`.
///
/// # Safety
/// `camera` must come from this library; `width` and `height` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rs_camera_size(
    camera: *const RsCamera,
    width: *mut u32,
    height: *mut u32,
) -> RsStatus {
    guard(|| {
        let cam = &borrow(camera, "camera")?.camera;
        *borrow_mut(width, "width")? = cam.width as u32;
        *borrow_mut(height, "height")? = cam.height as u32;
        Ok(())
    })
}

/// # Safety
/// `camera` must be NULL or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn rs_camera_free(camera: *mut RsCamera) {
    if !camera.is_null() {
        drop(Box::from_raw(camera));
    }
}

/// Renders `scene` through `camera` into `rgb` (width × height × 3) and,
/// when `alpha` is not NULL, accumulated opacity (width × height).
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn rs_render(
    scene: *const RsScene,
    camera: *const RsCamera,
    rgb: *mut f64,
    rgb_len: usize,
    alpha: *mut f64,
    alpha_len: usize,
) -> RsStatus {
    guard(|| {
        let grid = &borrow(scene, "scene")?.grid;
        let cam = &borrow(camera, "camera")?.camera;
        let px = cam.width * cam.height;
        let rgb = slice_out(rgb, rgb_len, 3 * px, "rgb")?;
        let alpha = if alpha.is_null() {
            None
        } else {
            Some(slice_out(alpha, alpha_len, px, "alpha")?)
        };
        let out = render(grid, cam)?;
        rgb.copy_from_slice(&out.rgb.data);
        if let Some(a) = alpha {
            a.copy_from_slice(&out.alpha.data);
        }
        Ok(())
    })
}

/// Gradients of `Σ d_rgb · rgb` with respect to the scene parameters.
/// Output sizes for `n` Gaussians: `d_sh` 12n, `d_opacity` n,
/// `d_rotation` 4n, `d_elevation` n, `d_scale` 3.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn rs_render_backward(
    scene: *const RsScene,
    camera: *const RsCamera,
    d_rgb: *const f64,
    d_rgb_len: usize,
    d_sh: *mut f64,
    d_sh_len: usize,
    d_opacity: *mut f64,
    d_opacity_len: usize,
    d_rotation: *mut f64,
    d_rotation_len: usize,
    d_elevation: *mut f64,
    d_elevation_len: usize,
    d_scale: *mut f64,
) -> RsStatus {
    guard(|| {
        let grid = &borrow(scene, "scene")?.grid;
        let cam = &borrow(camera, "camera")?.camera;
        let n = grid.len();
        let adj = slice_arg(d_rgb, d_rgb_len, 3 * cam.width * cam.height, "d_rgb")?;
        let d_sh = slice_out(d_sh, d_sh_len, SH_COEFFS * n, "d_sh")?;
        let d_opacity = slice_out(d_opacity, d_opacity_len, n, "d_opacity")?;
        let d_rotation = slice_out(d_rotation, d_rotation_len, 4 * n, "d_rotation")?;
        let d_elevation = slice_out(d_elevation, d_elevation_len, n, "d_elevation")?;
        let d_scale = slice_out(d_scale, 3, 3, "d_scale")?;
        let g = render_backward(
            grid,
            cam,
            &image_of(adj, cam.width as u32, cam.height as u32, 3),
        )?;
        d_sh.copy_from_slice(g.sh.as_flattened());
        d_opacity.copy_from_slice(&g.opacity);
        d_rotation.copy_from_slice(g.rotation.as_flattened());
        d_elevation.copy_from_slice(&g.elevation);
        d_scale.copy_from_slice(&g.scale);
        Ok(())
    })
}

/// Refines colour, rotation and opacity of `scene` in place against
/// `target_rgb` seen from `camera`, with the default rates. Writes the loss
/// before and after when the pointers are not NULL.
///
/// # Safety
/// `target_rgb` must hold width × height × 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn rs_test_time_optimize(
    scene: *mut RsScene,
    camera: *const RsCamera,
    target_rgb: *const f64,
    target_len: usize,
    iterations: u32,
    loss_initial: *mut f64,
    loss_final: *mut f64,
) -> RsStatus {
    guard(|| {
        let scene = borrow_mut(scene, "scene")?;
        let cam = &borrow(camera, "camera")?.camera;
        let target = slice_arg(
            target_rgb,
            target_len,
            3 * cam.width * cam.height,
            "target_rgb",
        )?;
        let frame = Frame {
            image: image_of(target, cam.width as u32, cam.height as u32, 3),
            camera: cam.clone(),
        };
        let config = OptimizerConfig {
            iterations: iterations as usize,
            ..OptimizerConfig::default()
        };
        let (grid, trace) = test_time_optimize(&scene.grid, &frame, None, &config)?;
        scene.grid = grid;
        if let Some(p) = loss_initial.as_mut() {
            *p = trace.loss[0];
        }
        if let Some(p) = loss_final.as_mut() {
            *p = trace.loss[trace.len() - 1];
        }
        Ok(())
    })
}

/// Elevation errors over `n` cells; `valid` may be NULL (all cells valid).
///
/// # Safety
/// `pred` and `gt` must hold `n` doubles, `valid` NULL or `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn rs_elevation_metrics(
    pred: *const f64,
    gt: *const f64,
    valid: *const u8,
    n: usize,
    out: *mut RsElevationMetrics,
) -> RsStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let pred = slice_arg(pred, n, n, "pred")?;
        let gt = slice_arg(gt, n, n, "gt")?;
        let mask: Vec<bool> = if valid.is_null() {
            vec![true; n]
        } else {
            std::slice::from_raw_parts(valid, n)
                .iter()
                .map(|&v| v != 0)
                .collect()
        };
        let map = |values: &[f64], valid: Vec<bool>| ElevationMap {
            level: GridLevel::Geometry,
            pitch_m: 1.0,
            values: Array2::from_shape_vec((1, n), values.to_vec()).expect("1 x n"),
            valid: Array2::from_shape_vec((1, n), valid).expect("1 x n"),
        };
        let m = elevation_metrics(&map(pred, vec![true; n]), &map(gt, mask))?;
        *out = RsElevationMetrics {
            aae_m: m.aae_m,
            rmse_m: m.rmse_m,
            pct_gt_5mm: m.pct_gt_5mm,
            count: m.count,
        };
        Ok(())
    })
}

/// PSNR (dB) and mean SSIM of two interleaved images with values in [0, 1].
/// Either output pointer may be NULL.
///
/// # Safety
/// `a` and `b` must hold width × height × channels doubles.
#[no_mangle]
pub unsafe extern "C" fn rs_image_metrics(
    a: *const f64,
    b: *const f64,
    width: u32,
    height: u32,
    channels: u32,
    psnr_db: *mut f64,
    ssim_mean: *mut f64,
) -> RsStatus {
    guard(|| {
        let len = width as usize * height as usize * channels as usize;
        if len == 0 {
            return Err(Fail(RsStatus::InvalidArgument, "empty image".into()));
        }
        let a = image_of(slice_arg(a, len, len, "a")?, width, height, channels);
        let b = image_of(slice_arg(b, len, len, "b")?, width, height, channels);
        if let Some(p) = psnr_db.as_mut() {
            *p = psnr(&a, &b)?;
        }
        if let Some(p) = ssim_mean.as_mut() {
            *p = ssim(&a, &b)?.mean;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr::{null, null_mut};

    fn last_error() -> String {
        unsafe { CStr::from_ptr(rs_last_error()) }
            .to_string_lossy()
            .into_owned()
    }

    const RECIPE: &str = r#"{"grid": {"nx_g": 6, "ny_g": 8, "roi_width_m": 0.18, "roi_length_m": 0.24,
        "texture_factor": 1, "gaussian_factor": 1}, "potholes": [], "cracks": []}"#;

    unsafe fn scene_and_camera() -> (*mut RsScene, *mut RsCamera) {
        let json = CString::new(RECIPE).unwrap();
        let mut scene = null_mut();
        assert_eq!(
            rs_scene_from_recipe(json.as_ptr(), &mut scene),
            RsStatus::Ok,
            "{}",
            last_error()
        );
        let mut cam = null_mut();
        let st = rs_camera_looking_down(
            30.0, 30.0, 12.0, 10.0, 24, 20, 0.0, 0.0, 0.6, 1.2, 0.0, &mut cam,
        );
        assert_eq!(st, RsStatus::Ok, "{}", last_error());
        (scene, cam)
    }

    #[test]
    fn render_matches_library() {
        unsafe {
            let (scene, cam) = scene_and_camera();
            assert_eq!(rs_scene_len(scene), 48);
            let (mut w, mut h) = (0, 0);
            assert_eq!(rs_camera_size(cam, &mut w, &mut h), RsStatus::Ok);
            assert_eq!((w, h), (24, 20));
            let mut rgb = vec![0.0; 24 * 20 * 3];
            let mut alpha = vec![0.0; 24 * 20];
            let st = rs_render(
                scene,
                cam,
                rgb.as_mut_ptr(),
                rgb.len(),
                alpha.as_mut_ptr(),
                alpha.len(),
            );
            assert_eq!(st, RsStatus::Ok, "{}", last_error());
            let expect = render(&(*scene).grid, &(*cam).camera).unwrap();
            assert_eq!(rgb, expect.rgb.data);
            assert_eq!(alpha, expect.alpha.data);
            assert!(alpha.iter().any(|&a| a > 0.5));
            rs_scene_free(scene);
            rs_camera_free(cam);
        }
    }

    #[test]
    fn errors_are_reported() {
        unsafe {
            let (scene, cam) = scene_and_camera();
            let mut rgb = vec![0.0; 10];
            let st = rs_render(scene, cam, rgb.as_mut_ptr(), rgb.len(), null_mut(), 0);
            assert_eq!(st, RsStatus::BufferSize);
            assert!(last_error().contains("rgb"), "{}", last_error());
            assert_eq!(
                rs_render(null(), cam, rgb.as_mut_ptr(), 10, null_mut(), 0),
                RsStatus::NullPointer
            );
            assert!(last_error().contains("scene"));

            let bad = CString::new(r#"{"albdo": 1}"#).unwrap();
            let mut s2 = null_mut();
            assert_eq!(
                rs_scene_from_recipe(bad.as_ptr(), &mut s2),
                RsStatus::Format
            );
            assert!(s2.is_null());
            assert!(last_error().contains("albdo"));

            let missing = CString::new("/nonexistent/scene.ggrd").unwrap();
            assert_eq!(rs_scene_load(missing.as_ptr(), &mut s2), RsStatus::Io);

            let mut c2 = null_mut();
            let st = rs_camera_looking_down(
                -1.0, 30.0, 12.0, 10.0, 24, 20, 0.0, 0.0, 0.6, 1.2, 0.0, &mut c2,
            );
            assert_eq!(st, RsStatus::InvalidArgument);
            assert!(c2.is_null());

            // A success clears the message.
            let (mut w, mut h) = (0, 0);
            assert_eq!(rs_camera_size(cam, &mut w, &mut h), RsStatus::Ok);
            assert_eq!(last_error(), "");
            rs_scene_free(scene);
            rs_camera_free(cam);
            rs_scene_free(null_mut());
            rs_camera_free(null_mut());
        }
    }

    #[test]
    fn backward_and_optimize() {
        unsafe {
            let (scene, cam) = scene_and_camera();
            let n = rs_scene_len(scene);
            let px = 24 * 20;
            let adj: Vec<f64> = (0..3 * px).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
            let (mut sh, mut op, mut rot, mut el, mut sc) = (
                vec![0.0; 12 * n],
                vec![0.0; n],
                vec![0.0; 4 * n],
                vec![0.0; n],
                [0.0; 3],
            );
            let st = rs_render_backward(
                scene,
                cam,
                adj.as_ptr(),
                adj.len(),
                sh.as_mut_ptr(),
                sh.len(),
                op.as_mut_ptr(),
                op.len(),
                rot.as_mut_ptr(),
                rot.len(),
                el.as_mut_ptr(),
                el.len(),
                sc.as_mut_ptr(),
            );
            assert_eq!(st, RsStatus::Ok, "{}", last_error());
            let g = render_backward(&(*scene).grid, &(*cam).camera, &image_of(&adj, 24, 20, 3))
                .unwrap();
            assert_eq!(sh, g.sh.as_flattened());
            assert_eq!(el, g.elevation);
            assert_eq!(sc, g.scale);

            let mut target = vec![0.0; 3 * px];
            rs_render(scene, cam, target.as_mut_ptr(), target.len(), null_mut(), 0);
            target.iter_mut().for_each(|v| *v = (*v * 0.8).min(1.0));
            let (mut l0, mut l1) = (0.0, 0.0);
            let st = rs_test_time_optimize(
                scene,
                cam,
                target.as_ptr(),
                target.len(),
                10,
                &mut l0,
                &mut l1,
            );
            assert_eq!(st, RsStatus::Ok, "{}", last_error());
            assert!(l1 < l0, "{l0} -> {l1}");
            rs_scene_free(scene);
            rs_camera_free(cam);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        unsafe {
            let (scene, cam) = scene_and_camera();
            let dir = std::env::temp_dir().join(format!("roadsplat-ffi-{}", std::process::id()));
            std::fs::create_dir_all(&dir).unwrap();
            let path = CString::new(dir.join("s.ggrd").to_str().unwrap()).unwrap();
            assert_eq!(
                rs_scene_save(scene, path.as_ptr()),
                RsStatus::Ok,
                "{}",
                last_error()
            );
            let mut back = null_mut();
            assert_eq!(
                rs_scene_load(path.as_ptr(), &mut back),
                RsStatus::Ok,
                "{}",
                last_error()
            );
            assert_eq!((*back).grid, (*scene).grid);
            std::fs::remove_dir_all(&dir).unwrap();
            rs_scene_free(scene);
            rs_scene_free(back);
            rs_camera_free(cam);
        }
    }

    #[test]
    fn metrics_match_fixtures() {
        unsafe {
            let pred = [0.0, 0.0, 0.01, 0.01];
            let gt = [0.0; 4];
            let mut m = RsElevationMetrics::default();
            assert_eq!(
                rs_elevation_metrics(pred.as_ptr(), gt.as_ptr(), null(), 4, &mut m),
                RsStatus::Ok
            );
            assert!((m.aae_m - 0.005).abs() < 1e-12);
            assert!((m.rmse_m - 0.0002f64.sqrt() / 2.0).abs() < 1e-12);
            assert_eq!((m.pct_gt_5mm, m.count), (50.0, 4));
            let valid = [1u8, 1, 0, 0];
            assert_eq!(
                rs_elevation_metrics(pred.as_ptr(), gt.as_ptr(), valid.as_ptr(), 4, &mut m),
                RsStatus::Ok
            );
            assert_eq!((m.aae_m, m.count), (0.0, 2));

            let a: Vec<f64> = (0..16 * 16 * 3).map(|i| (i % 9) as f64 * 0.1).collect();
            let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
            let (mut p, mut s) = (0.0, 0.0);
            assert_eq!(
                rs_image_metrics(a.as_ptr(), b.as_ptr(), 16, 16, 3, &mut p, &mut s),
                RsStatus::Ok
            );
            assert!((p - 20.0).abs() < 1e-9);
            assert!(s < 1.0);
            assert_eq!(
                rs_image_metrics(a.as_ptr(), a.as_ptr(), 16, 16, 3, &mut p, &mut s),
                RsStatus::Ok
            );
            assert!((s - 1.0).abs() < 1e-12);
            // Smaller than the SSIM window.
            let st = rs_image_metrics(a.as_ptr(), b.as_ptr(), 4, 4, 3, null_mut(), &mut s);
            assert_eq!(st, RsStatus::InvalidArgument);
            assert!(last_error().contains("window"), "{}", last_error());
        }
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(rs_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
