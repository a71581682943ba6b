//! Grayscale image container, binary PGM I/O, synthetic noise and PSNR.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Peak intensity of the 8-bit scale.
pub const PEAK: f64 = 255.0;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed PGM file: {0}")]
    MalformedFile(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major grayscale image with real-valued intensities on the 8-bit scale.
///
/// Values may leave `[0, 255]` while the denoiser iterates; they are only
/// clamped when written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!(
                "empty image {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(ImageError::Invalid(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(ImageError::Invalid(format!("non-finite pixel {bad}")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_dims(&self, other: &Image) -> Result<(), ImageError> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(ImageError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ))
        }
    }

    /// Copy of the `width`x`height` region whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Result<Image, ImageError> {
        if width == 0 || height == 0 || row + height > self.height || col + width > self.width {
            return Err(ImageError::Invalid(format!(
                "crop {width}x{height}+{col}+{row} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(width, height, |r, c| self.get(row + r, col + c)))
    }

    /// Pixels clamped to `[0, 255]`.
    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|v| v.clamp(0.0, PEAK)).collect(),
        }
    }

    /// Pixels quantized exactly as [`save_image`] writes them.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }
}

/// Clamp to `[0, 255]` and round half away from zero.
#[inline]
pub fn quantize(v: f64) -> u8 {
    v.clamp(0.0, PEAK).round() as u8
}

struct HeaderCursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, ImageError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::MalformedFile(format!("missing {what}")));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::MalformedFile(format!("bad {what}")))
    }
}

/// Decode an in-memory binary PGM (`P5`, maxval 255).
pub fn decode_pgm(data: &[u8]) -> Result<Image, ImageError> {
    if data.len() < 2 || data[0] != b'P' {
        return Err(ImageError::MalformedFile("missing P magic".into()));
    }
    match data[1] {
        b'5' => {}
        b'1'..=b'4' | b'6' | b'7' => {
            return Err(ImageError::UnsupportedFormat(format!(
                "P{} (only binary grayscale P5 is supported)",
                data[1] as char
            )))
        }
        _ => return Err(ImageError::MalformedFile("unknown magic".into())),
    }
    let mut cur = HeaderCursor { data, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(ImageError::UnsupportedFormat(format!("maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedFile(format!("empty {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    match data.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(ImageError::MalformedFile("no raster separator".into())),
    }
    let raster = &data[cur.pos..];
    let n = width * height;
    if raster.len() < n {
        return Err(ImageError::MalformedFile(format!(
            "raster truncated: {} of {n} bytes",
            raster.len()
        )));
    }
    let pixels = raster[..n].iter().map(|&b| f64::from(b)).collect();
    Ok(Image {
        width,
        height,
        pixels,
    })
}

/// Encode as binary PGM with the canonical `P5\n<w> <h>\n255\n` header.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let data = fs::read(path)?;
    decode_pgm(&data)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let mut file = io::BufWriter::new(fs::File::create(path)?);
    file.write_all(&encode_pgm(img))?;
    file.flush()?;
    Ok(())
}

/// `img` plus i.i.d. `N(0, sigma^2)` samples drawn from a ChaCha8 stream seeded
/// with `seed` (ziggurat sampling). The result is not clamped.
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Image {
    assert!(sigma >= 0.0, "negative noise level {sigma}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = img
        .pixels
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        })
        .collect();
    Image {
        width: img.width,
        height: img.height,
        pixels,
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, ImageError> {
    a.check_dims(b)?;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.pixels.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` when the images are identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, ImageError> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / err).log10())
}
