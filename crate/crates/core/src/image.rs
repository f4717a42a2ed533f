//! Linear RGB image buffers plus PNG / binary PPM input and output.
//!
//! Pixel values are used as stored: 8-bit codes map to `code / 255` with no
//! transfer-function conversion.

use std::path::Path;

use crate::error::{invalid, Result, SadError};

/// Row-major RGB image with components in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuffer { width, height, pixels: vec![[0.0; 3]; width * height] }
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        ImageBuffer { width, height, pixels: vec![color; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        ImageBuffer { width, height, pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    /// Nearest pixel to a continuous position, clamped to the image.
    pub fn sample_nearest(&self, pos: [f64; 2]) -> [f64; 3] {
        let x = pos[0].round().clamp(0.0, (self.width - 1) as f64) as usize;
        let y = pos[1].round().clamp(0.0, (self.height - 1) as f64) as usize;
        self.get(x, y)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return invalid("image has a zero dimension");
        }
        if self.pixels.len() != self.width * self.height {
            return invalid("pixel count does not match dimensions");
        }
        if let Some(i) = self
            .pixels
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0))
        {
            return invalid(format!("pixel {i} is outside [0, 1]"));
        }
        Ok(())
    }

    /// Rec. 709 luminance per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2]).collect()
    }

    /// Sobel gradient `(d/dx, d/dy)` of the luminance with clamp-to-edge
    /// borders.
    pub fn sobel(&self) -> Vec<[f64; 2]> {
        let lum = self.luminance();
        let (w, h) = (self.width as isize, self.height as isize);
        let at = |x: isize, y: isize| lum[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
        let mut out = Vec::with_capacity(lum.len());
        for y in 0..h {
            for x in 0..w {
                let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
                let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
                out.push([gx, gy]);
            }
        }
        out
    }

    /// Crops a rectangle; panics if it does not fit.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> ImageBuffer {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        ImageBuffer::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.map(to_u8)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, data: &[u8]) -> Result<Self> {
        if data.len() != width * height * 3 {
            return invalid("rgb8 buffer size does not match dimensions");
        }
        let pixels = data
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        Ok(ImageBuffer { width, height, pixels })
    }

    /// Loads a PNG or PNM file as RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref()).map_err(|e| SadError::Image(format!("{}: {e}", path.as_ref().display())))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_rgb8(w as usize, h as usize, rgb.as_raw())
    }

    /// Writes PNG, or binary PPM when the extension is `.ppm`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if is_ppm(path) {
            return write_ppm(path, self.width, self.height, &self.to_rgb8());
        }
        image::save_buffer(path, &self.to_rgb8(), self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| SadError::Image(format!("{}: {e}", path.display())))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn is_ppm(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    std::fs::write(path, out)?;
    Ok(())
}

/// Grayscale image export for scalar maps. Values are mapped linearly from
/// `[lo, hi]` to `[0, 255]`.
pub fn save_gray(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Result<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray: Vec<[f64; 3]> = values
        .iter()
        .map(|v| {
            let t = ((v - lo) / span).clamp(0.0, 1.0);
            [t, t, t]
        })
        .collect();
    ImageBuffer { width, height, pixels: gray }.save(path)
}

/// Deterministic false-color palette for id maps.
pub fn id_color(id: u32) -> [f64; 3] {
    if id == u32::MAX {
        return [0.0; 3];
    }
    let mut h = id.wrapping_mul(0x9e37_79b9) ^ 0x85eb_ca6b;
    h ^= h >> 13;
    h = h.wrapping_mul(0xc2b2_ae35);
    h ^= h >> 16;
    let c = |s: u32| 0.2 + 0.8 * (((h >> s) & 0xff) as f64 / 255.0);
    [c(0), c(8), c(16)]
}
