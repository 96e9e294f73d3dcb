//! In-memory RGB images and binary masks, plus binary PPM (P6) reading and
//! writing. Pixel values live in [0, 1]; files are 8-bit.

use crate::error::{Error, Result};
use crate::math::Vec3;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Row-major interleaved RGB image, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        ImageRgb {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "image data length {} does not match {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(ImageRgb {
            width,
            height,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec3 {
        let i = (y * self.width + x) * 3;
        Vec3::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: Vec3) {
        let i = (y * self.width + x) * 3;
        self.data[i] = c.x;
        self.data[i + 1] = c.y;
        self.data[i + 2] = c.z;
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Quantize to 8 bits and back, so in-memory values match what a PPM
    /// round-trip would produce.
    pub fn quantized(&self) -> ImageRgb {
        let data = self
            .data
            .iter()
            .map(|&v| quantize_u8(v) as f64 / 255.0)
            .collect();
        ImageRgb {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Binary per-pixel mask (row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        MaskImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(MaskImage {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

/// Write a binary P6 PPM (8-bit).
pub fn write_ppm(path: &Path, image: &ImageRgb) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + image.data.len());
    write!(buf, "P6\n{} {}\n255\n", image.width, image.height)
        .map_err(|e| Error::io(path, e))?;
    buf.extend(image.data.iter().map(|&v| quantize_u8(v)));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Write a mask as P6 with 0 (false) / 255 (true) gray triples.
pub fn write_mask_ppm(path: &Path, mask: &MaskImage) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + mask.data.len() * 3);
    write!(buf, "P6\n{} {}\n255\n", mask.width, mask.height).map_err(|e| Error::io(path, e))?;
    for &v in &mask.data {
        let byte = if v { 255 } else { 0 };
        buf.extend_from_slice(&[byte, byte, byte]);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn parse_ppm_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize)> {
    // P6, then width, height, maxval as whitespace-separated ASCII tokens
    // (comments are not produced by this crate and are rejected).
    let header_err = |msg: &str| Error::Load(format!("{}: {}", path.display(), msg));
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(header_err("not a binary P6 PPM"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(header_err("malformed PPM header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| header_err("malformed PPM header"))?;
        *field = text
            .parse()
            .map_err(|_| header_err("malformed PPM header"))?;
    }
    // single whitespace byte after maxval
    pos += 1;
    if fields[2] != 255 {
        return Err(header_err("only maxval 255 is supported"));
    }
    Ok((fields[0], fields[1], pos))
}

/// Read a binary P6 PPM into an [`ImageRgb`] (values become v/255).
pub fn read_ppm(path: &Path) -> Result<ImageRgb> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, offset) = parse_ppm_header(&bytes, path)?;
    let expected = width * height * 3;
    let payload = &bytes[offset..];
    if payload.len() != expected {
        return Err(Error::Load(format!(
            "{}: pixel payload is {} bytes, expected {}",
            path.display(),
            payload.len(),
            expected
        )));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(ImageRgb {
        width,
        height,
        data,
    })
}

/// Read a 0/255 mask PPM. Any nonzero channel counts as true.
pub fn read_mask_ppm(path: &Path) -> Result<MaskImage> {
    let image = read_ppm(path)?;
    let data = image
        .data
        .chunks_exact(3)
        .map(|px| px[0] > 0.5)
        .collect();
    Ok(MaskImage {
        width: image.width,
        height: image.height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("im.ppm");
        let mut im = ImageRgb::new(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                im.set_pixel(x, y, Vec3::new(x as f64 / 4.0, y as f64 / 2.0, 0.25));
            }
        }
        let im = im.quantized();
        write_ppm(&path, &im).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(im, back);
        // writing the loaded image reproduces the same bytes
        let path2 = dir.path().join("im2.ppm");
        write_ppm(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ppm");
        let mut m = MaskImage::new(4, 4, false);
        m.set(1, 2, true);
        m.set(3, 0, true);
        write_mask_ppm(&path, &m).unwrap();
        assert_eq!(read_mask_ppm(&path).unwrap(), m);
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        fs::write(&path, b"P6\n4 4\n255\nxx").unwrap();
        assert!(read_ppm(&path).is_err());
    }
}
