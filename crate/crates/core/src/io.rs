//! File formats.
//!
//! All binary formats are little-endian and start with a four-byte magic and
//! a `u32` version.
//!
//! `ELEV` (elevation map): `u8` level (0 geometry, 1 texture, 2 Gaussian),
//! `u32` rows, `u32` cols, `f64` pitch, `rows·cols` `f32` values row-major,
//! `rows·cols` `u8` validity flags.
//!
//! `GGRD` (Gaussian grid): the grid spec as six `f64` (roi width, length,
//! start, interval, h_min, h_max) and six `u32` (nx_g, ny_g, texture factor,
//! Gaussian factor, anchors, bins), then `u32` count `n`, three `f32` scales,
//! and `f32` arrays of `n` elevations, `12n` SH coefficients, `4n`
//! quaternions `(w, x, y, z)` and `n` opacities.
//!
//! Camera files are plain text, one `key value...` entry per line in this
//! order: `width`, `height`, `fx`, `fy`, `cx`, `cy`, `rotation` (nine values,
//! row-major world-to-camera), `translation` (three values). Lines starting
//! with `#` are comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scene::{CameraModel, ElevationMap, GaussianGrid, GridLevel, GridSpec, SH_COEFFS};

pub const ELEV_MAGIC: &[u8; 4] = b"ELEV";
pub const GGRD_MAGIC: &[u8; 4] = b"GGRD";
pub const FORMAT_VERSION: u32 = 1;
/// Name of the checksum file written next to command outputs.
pub const MANIFEST_NAME: &str = "manifest.sha256";

/// Rounds to the nearest `f32`, the storage precision of binary files.
pub fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

/// Nearest `f32` value that still lies in `[lo, hi]` (assuming the interval
/// contains one).
pub fn to_f32_within(v: f64, lo: f64, hi: f64) -> f64 {
    let mut q = v.clamp(lo, hi) as f32;
    if (q as f64) < lo {
        q = q.next_up();
    }
    if (q as f64) > hi {
        q = q.next_down();
    }
    q as f64
}

struct Writer(Vec<u8>);

impl Writer {
    fn header(magic: &[u8; 4]) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u32(FORMAT_VERSION as usize);
        w
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(data: &'a [u8], path: &'a Path, magic: &[u8; 4]) -> Result<Self> {
        let mut r = Reader { data, pos: 0, path };
        if r.take(4)? != magic {
            return Err(Error::format(
                path,
                format!("missing {} magic", String::from_utf8_lossy(magic)),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::format(
                path,
                format!("unsupported version {version}"),
            ));
        }
        Ok(r)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        };
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(self.path, "size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn level_code(level: GridLevel) -> u8 {
    match level {
        GridLevel::Geometry => 0,
        GridLevel::Texture => 1,
        GridLevel::Gaussian => 2,
    }
}

pub fn encode_elevation(map: &ElevationMap) -> Vec<u8> {
    let mut w = Writer::header(ELEV_MAGIC);
    let (rows, cols) = map.shape();
    w.u8(level_code(map.level));
    w.u32(rows);
    w.u32(cols);
    w.f64(map.pitch_m);
    map.values.iter().for_each(|&v| w.f32(v));
    map.valid.iter().for_each(|&v| w.u8(v as u8));
    w.0
}

pub fn write_elevation(path: &Path, map: &ElevationMap) -> Result<()> {
    write_bytes(path, &encode_elevation(map))
}

pub fn read_elevation(path: &Path) -> Result<ElevationMap> {
    let data = read_file(path)?;
    let mut r = Reader::open(&data, path, ELEV_MAGIC)?;
    let level = match r.u8()? {
        0 => GridLevel::Geometry,
        1 => GridLevel::Texture,
        2 => GridLevel::Gaussian,
        v => return Err(Error::format(path, format!("unknown grid level {v}"))),
    };
    let (rows, cols) = (r.u32()?, r.u32()?);
    let pitch_m = r.f64()?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format(path, "size overflow"))?;
    let values = r.f32s(n)?;
    let valid = r.take(n)?.iter().map(|&b| b != 0).collect();
    r.finish()?;
    if !(pitch_m > 0.0 && pitch_m.is_finite()) {
        return Err(Error::format(path, format!("bad pitch {pitch_m}")));
    }
    Ok(ElevationMap {
        level,
        pitch_m,
        values: Array2::from_shape_vec((rows, cols), values).unwrap(),
        valid: Array2::from_shape_vec((rows, cols), valid).unwrap(),
    })
}

pub fn encode_grid(grid: &GaussianGrid) -> Vec<u8> {
    let mut w = Writer::header(GGRD_MAGIC);
    let s = &grid.spec;
    for v in [
        s.roi_width_m,
        s.roi_length_m,
        s.roi_start_m,
        s.geom_interval_m,
        s.h_min_m,
        s.h_max_m,
    ] {
        w.f64(v);
    }
    for v in [
        s.nx_g,
        s.ny_g,
        s.texture_factor,
        s.gaussian_factor,
        s.nz_anchors,
        s.nb_bins,
    ] {
        w.u32(v);
    }
    w.u32(grid.len());
    grid.scale.iter().for_each(|&v| w.f32(v));
    grid.elevation.values.iter().for_each(|&v| w.f32(v));
    grid.sh.iter().flatten().for_each(|&v| w.f32(v));
    grid.rotation.iter().flatten().for_each(|&v| w.f32(v));
    grid.opacity.iter().for_each(|&v| w.f32(v));
    w.0
}

pub fn write_grid(path: &Path, grid: &GaussianGrid) -> Result<()> {
    write_bytes(path, &encode_grid(grid))
}

pub fn read_grid(path: &Path) -> Result<GaussianGrid> {
    let data = read_file(path)?;
    let mut r = Reader::open(&data, path, GGRD_MAGIC)?;
    let f: Vec<f64> = (0..6).map(|_| r.f64()).collect::<Result<_>>()?;
    let u: Vec<usize> = (0..6).map(|_| r.u32()).collect::<Result<_>>()?;
    let spec = GridSpec {
        roi_width_m: f[0],
        roi_length_m: f[1],
        roi_start_m: f[2],
        geom_interval_m: f[3],
        h_min_m: f[4],
        h_max_m: f[5],
        nx_g: u[0],
        ny_g: u[1],
        texture_factor: u[2],
        gaussian_factor: u[3],
        nz_anchors: u[4],
        nb_bins: u[5],
    };
    spec.validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let n = r.u32()?;
    if n != spec.count(GridLevel::Gaussian) {
        return Err(Error::format(
            path,
            format!(
                "{n} Gaussians for a {:?} lattice",
                spec.shape(GridLevel::Gaussian)
            ),
        ));
    }
    let scale = [r.f32()?, r.f32()?, r.f32()?];
    let elevation = r.f32s(n)?;
    let sh = r.f32s(n * SH_COEFFS)?;
    let rotation = r.f32s(n * 4)?;
    let opacity = r.f32s(n)?;
    r.finish()?;
    let (rows, cols) = spec.shape(GridLevel::Gaussian);
    let elevation = ElevationMap {
        level: GridLevel::Gaussian,
        pitch_m: spec.pitch(GridLevel::Gaussian),
        values: Array2::from_shape_vec((rows, cols), elevation).unwrap(),
        valid: Array2::from_elem((rows, cols), true),
    };
    let grid = GaussianGrid {
        spec,
        elevation,
        sh: sh
            .chunks_exact(SH_COEFFS)
            .map(|c| c.try_into().unwrap())
            .collect(),
        scale,
        rotation: rotation
            .chunks_exact(4)
            .map(|c| c.try_into().unwrap())
            .collect(),
        opacity,
    };
    grid.validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(grid)
}

/// Rounds every stored field of `grid` to `f32`, so that writing and reading
/// it back is lossless.
pub fn quantize_grid(grid: &mut GaussianGrid) {
    let (lo, hi) = (grid.spec.h_min_m, grid.spec.h_max_m);
    grid.elevation
        .values
        .mapv_inplace(|h| to_f32_within(h, lo, hi));
    grid.sh
        .iter_mut()
        .flatten()
        .for_each(|v| *v = to_f32_precision(*v));
    grid.rotation
        .iter_mut()
        .flatten()
        .for_each(|v| *v = to_f32_precision(*v));
    grid.opacity
        .iter_mut()
        .for_each(|v| *v = to_f32_precision(*v));
    grid.scale
        .iter_mut()
        .for_each(|v| *v = to_f32_precision(*v));
}

pub fn camera_to_text(cam: &CameraModel) -> String {
    let mut s = String::from(
        "# pinhole camera, world-to-camera pose: x_cam = rotation * x_world + translation\n",
    );
    let _ = writeln!(s, "width {}", cam.width);
    let _ = writeln!(s, "height {}", cam.height);
    for (k, v) in [
        ("fx", cam.fx),
        ("fy", cam.fy),
        ("cx", cam.cx),
        ("cy", cam.cy),
    ] {
        let _ = writeln!(s, "{k} {v}");
    }
    let r = &cam.rotation;
    let _ = writeln!(
        s,
        "rotation {} {} {} {} {} {} {} {} {}",
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)]
    );
    let t = &cam.translation;
    let _ = writeln!(s, "translation {} {} {}", t.x, t.y, t.z);
    s
}

pub fn camera_from_text(text: &str, path: &Path) -> Result<CameraModel> {
    const KEYS: [(&str, usize); 8] = [
        ("width", 1),
        ("height", 1),
        ("fx", 1),
        ("fy", 1),
        ("cx", 1),
        ("cy", 1),
        ("rotation", 9),
        ("translation", 3),
    ];
    let mut values: Vec<Vec<f64>> = Vec::new();
    let entries = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    for (lineno, line) in entries {
        let at = |msg: String| Error::format(path, format!("line {}: {msg}", lineno + 1));
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        let Some(&(expected, count)) = KEYS.get(values.len()) else {
            return Err(at(format!("unexpected entry `{key}`")));
        };
        if key != expected {
            return Err(at(format!("expected `{expected}`, found `{key}`")));
        }
        let nums = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| at(format!("`{p}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if nums.len() != count {
            return Err(at(format!(
                "`{key}` takes {count} values, found {}",
                nums.len()
            )));
        }
        values.push(nums);
    }
    if values.len() != KEYS.len() {
        return Err(Error::format(
            path,
            format!("missing `{}` entry", KEYS[values.len()].0),
        ));
    }
    let dim = |v: f64, name: &str| {
        if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(Error::format(
                path,
                format!("{name} must be a positive integer, found {v}"),
            ))
        }
    };
    CameraModel::new(
        values[2][0],
        values[3][0],
        values[4][0],
        values[5][0],
        dim(values[0][0], "width")?,
        dim(values[1][0], "height")?,
        Matrix3::from_row_slice(&values[6]),
        Vector3::from_column_slice(&values[7]),
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_camera(path: &Path, cam: &CameraModel) -> Result<()> {
    write_bytes(path, camera_to_text(cam).as_bytes())
}

pub fn read_camera(path: &Path) -> Result<CameraModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    camera_from_text(&text, path)
}

/// Bytes that enter a file's checksum. Trace files drop their final
/// (wall-time) column so that equal runs hash equally.
fn checksum_content(path: &Path, bytes: Vec<u8>) -> Vec<u8> {
    let is_trace = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with("trace.csv"));
    if !is_trace {
        return bytes;
    }
    let text = String::from_utf8_lossy(&bytes);
    let mut out = String::new();
    for line in text.lines() {
        out.push_str(line.rsplit_once(',').map_or(line, |(head, _)| head));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().and_then(|n| n.to_str()) != Some(MANIFEST_NAME) {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    Ok(())
}

/// `sha256  relative/path` lines for every file under `dir` except the
/// manifest itself, sorted by path.
pub fn manifest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut s = String::new();
    for rel in files {
        let full = dir.join(&rel);
        let bytes = checksum_content(&full, read_file(&full)?);
        let _ = writeln!(s, "{}  {}", sha256_hex(&bytes), rel.display());
    }
    Ok(s)
}

/// Writes [`manifest`] to `dir/manifest.sha256` and returns its text.
pub fn write_manifest(dir: &Path) -> Result<String> {
    let m = manifest(dir)?;
    write_bytes(&dir.join(MANIFEST_NAME), m.as_bytes())?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SH_BASIS;

    fn small_spec() -> GridSpec {
        GridSpec {
            roi_width_m: 0.3,
            roi_length_m: 0.6,
            roi_start_m: 0.5,
            geom_interval_m: 0.1,
            nx_g: 3,
            ny_g: 6,
            texture_factor: 2,
            gaussian_factor: 1,
            ..GridSpec::default()
        }
    }

    fn sample_grid() -> GaussianGrid {
        let spec = small_spec();
        let (rows, cols) = spec.shape(GridLevel::Gaussian);
        let n = rows * cols;
        let mut grid = GaussianGrid {
            elevation: ElevationMap {
                level: GridLevel::Gaussian,
                pitch_m: spec.pitch(GridLevel::Gaussian),
                values: Array2::from_shape_fn((rows, cols), |(r, c)| (r as f64 - c as f64) * 0.003),
                valid: Array2::from_elem((rows, cols), true),
            },
            spec,
            sh: (0..n)
                .map(|i| std::array::from_fn(|k| (i * SH_BASIS + k) as f64 * 0.01 - 0.2))
                .collect(),
            scale: [0.011, 0.012, 0.013],
            rotation: (0..n)
                .map(|i| {
                    let a = i as f64 * 0.1;
                    [a.cos(), a.sin(), 0.0, 0.0]
                })
                .collect(),
            opacity: (0..n).map(|i| (i % 10) as f64 / 9.0).collect(),
        };
        quantize_grid(&mut grid);
        grid
    }

    #[test]
    fn f32_rounding_stays_inside_bounds() {
        let q = to_f32_within(-0.2, -0.2, 0.2);
        assert!(q >= -0.2 && q == q as f32 as f64);
        assert!((q + 0.2).abs() < 1e-7);
        let q = to_f32_within(0.3, -0.2, 0.2);
        assert!(q <= 0.2 && q == q as f32 as f64);
        assert_eq!(to_f32_within(0.5, -1.0, 1.0), 0.5);
    }

    #[test]
    fn grid_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ggrd");
        let grid = sample_grid();
        write_grid(&path, &grid).unwrap();
        assert_eq!(read_grid(&path).unwrap(), grid);
    }

    #[test]
    fn grid_rejects_damage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ggrd");
        let bytes = encode_grid(&sample_grid());
        write_bytes(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_grid(&path), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        write_bytes(&path, &bad).unwrap();
        assert!(read_grid(&path).is_err());
        let mut extra = bytes;
        extra.push(0);
        write_bytes(&path, &extra).unwrap();
        assert!(read_grid(&path).is_err());
    }

    #[test]
    fn elevation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.elev");
        let spec = small_spec();
        let mut map = ElevationMap::flat(&spec, GridLevel::Geometry);
        map.values[[1, 2]] = to_f32_precision(-0.0123);
        map.valid[[0, 0]] = false;
        write_elevation(&path, &map).unwrap();
        assert_eq!(read_elevation(&path).unwrap(), map);
        write_bytes(&path, b"ELEV").unwrap();
        assert!(read_elevation(&path).is_err());
    }

    #[test]
    fn camera_round_trip_is_exact() {
        let cam = CameraModel::looking_down(
            431.7,
            430.2,
            479.5,
            263.5,
            960,
            528,
            Vector3::new(0.12, 0.3, 1.2),
            0.77,
            0.01,
        )
        .unwrap();
        let path = Path::new("cam.txt");
        assert_eq!(camera_from_text(&camera_to_text(&cam), path).unwrap(), cam);
    }

    #[test]
    fn camera_errors_name_the_line() {
        let cam = CameraModel::looking_down(
            100.0,
            100.0,
            50.0,
            50.0,
            100,
            100,
            Vector3::new(0.0, 0.0, 1.0),
            0.8,
            0.0,
        )
        .unwrap();
        let text = camera_to_text(&cam).replace("fy 100", "fy abc");
        let err = camera_from_text(&text, Path::new("c.txt"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 5") && err.contains("abc"), "{err}");
        let missing: String = camera_to_text(&cam)
            .lines()
            .take(6)
            .map(|l| format!("{l}\n"))
            .collect();
        let err = camera_from_text(&missing, Path::new("c.txt"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("cy"), "{err}");
    }

    #[test]
    fn manifest_ignores_trace_timing() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_bytes(
            &a.path().join("trace.csv"),
            b"iteration,loss,ms\n0,1.5,3.2\n",
        )
        .unwrap();
        write_bytes(
            &b.path().join("trace.csv"),
            b"iteration,loss,ms\n0,1.5,9.9\n",
        )
        .unwrap();
        std::fs::create_dir(a.path().join("sub")).unwrap();
        std::fs::create_dir(b.path().join("sub")).unwrap();
        write_bytes(&a.path().join("sub/x.bin"), b"abc").unwrap();
        write_bytes(&b.path().join("sub/x.bin"), b"abc").unwrap();
        let ma = write_manifest(a.path()).unwrap();
        assert_eq!(ma, write_manifest(b.path()).unwrap());
        assert!(ma.contains(
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad  sub/x.bin"
        ));
        assert_eq!(ma, manifest(a.path()).unwrap());
        write_bytes(&b.path().join("sub/x.bin"), b"abd").unwrap();
        assert_ne!(ma, manifest(b.path()).unwrap());
    }
}
