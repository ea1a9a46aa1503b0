//! Dense float images and PPM (P6) I/O.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved row-major float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{}x{}x{}", self.width, self.height, self.channels),
                format!("{}x{}x{}", other.width, other.height, other.channels),
            ))
        }
    }

    /// Single channel `c` as its own image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// 8-bit quantisation used by the PPM writer.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Image as it reads back after an 8-bit round trip.
    pub fn quantized(&self) -> Image {
        Image {
            data: self
                .data
                .iter()
                .map(|&v| quantize(v) as f64 / 255.0)
                .collect(),
            ..self.clone()
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::shape("3-channel image", self.channels));
        }
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.to_u8());
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// 8-bit greyscale dump of a single-channel image.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::shape("1-channel image", self.channels));
        }
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.to_u8());
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Lossless 32-bit float dump of a single-channel image (PFM, rows
    /// stored bottom to top, little endian).
    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::shape("1-channel image", self.channels));
        }
        let mut buf = format!("Pf\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                buf.extend((self.get(x, y, 0) as f32).to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut tokens = Vec::new();
        // Header: magic, width, height, maxval; comments start with '#'.
        while tokens.len() < 4 {
            let mut line = String::new();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(Error::format(path, "truncated PPM header"));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "P6" {
            return Err(Error::format(
                path,
                format!("expected P6, found {}", tokens[0]),
            ));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad header value `{s}`")))
        };
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(Error::format(path, "only 8-bit PPM is supported"));
        }
        let mut raw = vec![0u8; width * height * 3];
        reader
            .read_exact(&mut raw)
            .map_err(|_| Error::format(path, "truncated PPM pixel data"))?;
        Ok(Image {
            width,
            height,
            channels: 3,
            data: raw.into_iter().map(|b| b as f64 / 255.0).collect(),
        })
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = Image::from_fn(5, 3, 3, |x, y, c| ((x + 2 * y + 3 * c) % 7) as f64 / 6.0);
        img.write_ppm(&path).unwrap();
        let back = Image::read_ppm(&path).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn pgm_and_pfm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 2, 1, |x, y, _| (x + 3 * y) as f64 / 5.0);
        let pgm = dir.path().join("a.pgm");
        img.write_pgm(&pgm).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(bytes[bytes.len() - 1], 255);

        let pfm = dir.path().join("a.pfm");
        img.write_pfm(&pfm).unwrap();
        let bytes = std::fs::read(&pfm).unwrap();
        let header = b"Pf\n3 2\n-1.0\n";
        assert!(bytes.starts_with(header));
        // The first stored row is the bottom one.
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, (3.0f64 / 5.0) as f32);
        assert!(Image::new(2, 2, 3).write_pgm(&pgm).is_err());
    }

    #[test]
    fn ppm_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(Image::read_ppm(&path).is_err());
        std::fs::write(&path, b"P6\n2 2\n255\n\x00").unwrap();
        assert!(Image::read_ppm(&path).is_err());
    }
}
