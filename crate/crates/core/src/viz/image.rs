use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLUE: [u8; 3] = [0, 0, 255];
pub const GRAY: [u8; 3] = [128, 128, 128];
pub const RED: [u8; 3] = [255, 0, 0];

/// `v ∈ [−1, 1]` to RGB, linear between blue, gray and red. Out-of-range
/// values are clamped.
pub fn diverging_rgb(v: f32) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    let (from, to, t) = if v < 0.0 { (GRAY, BLUE, -v) } else { (GRAY, RED, v) };
    let mut out = [0u8; 3];
    for i in 0..3 {
        let a = from[i] as f32;
        let b = to[i] as f32;
        out[i] = (a + (b - a) * t).round() as u8;
    }
    out
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// An 8-bit gray (1 channel) or RGB (3 channels) raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl RenderedImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("images have 1 or 3 channels, not {channels}")));
        }
        if width == 0 || height == 0 || pixels.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}x{height}x{channels} image cannot hold {} bytes",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// A solid RGB image.
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            channels: 3,
            pixels: color.repeat(width * height),
        }
    }

    fn hw(t: &Tensor, channels: usize) -> Result<(usize, usize)> {
        match *t.shape() {
            [h, w, c] if c == channels => Ok((h, w)),
            ref s => Err(Error::invalid(format!("expected [h, w, {channels}], got {s:?}"))),
        }
    }

    /// `[h, w, 1]` values in `[0, 1]` to gray bytes.
    pub fn from_gray(t: &Tensor) -> Result<Self> {
        let (h, w) = Self::hw(t, 1)?;
        Self::new(w, h, 1, t.data().iter().map(|&v| to_byte(v)).collect())
    }

    /// `[h, w, 3]` values in `[0, 1]` to RGB bytes.
    pub fn from_rgb(t: &Tensor) -> Result<Self> {
        let (h, w) = Self::hw(t, 3)?;
        Self::new(w, h, 3, t.data().iter().map(|&v| to_byte(v)).collect())
    }

    /// `[h, w, 1]` values in `[−1, 1]` through the diverging colormap.
    pub fn from_diverging(t: &Tensor) -> Result<Self> {
        let (h, w) = Self::hw(t, 1)?;
        Self::new(w, h, 3, t.data().iter().flat_map(|&v| diverging_rgb(v)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// RGB triple at `(x, y)`.
    pub fn rgb_at(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            [self.pixels[i]; 3]
        } else {
            [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
        }
    }

    pub(crate) fn set_rgb(&mut self, x: usize, y: usize, color: [u8; 3]) {
        debug_assert_eq!(self.channels, 3);
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        Self {
            width: self.width,
            height: self.height,
            channels: 3,
            pixels: self.pixels.iter().flat_map(|&p| [p; 3]).collect(),
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, factor: usize) -> Self {
        let f = factor.max(1);
        let (w, h, c) = (self.width * f, self.height * f, self.channels);
        let mut pixels = Vec::with_capacity(w * h * c);
        for y in 0..h {
            for x in 0..w {
                let i = ((y / f) * self.width + x / f) * c;
                pixels.extend_from_slice(&self.pixels[i..i + c]);
            }
        }
        Self {
            width: w,
            height: h,
            channels: c,
            pixels,
        }
    }

    /// Copies `src` with its top-left corner at `(x, y)`; must fit.
    pub(crate) fn blit(&mut self, src: &RenderedImage, x: usize, y: usize) {
        let src = src.to_rgb();
        for row in 0..src.height {
            let d = ((y + row) * self.width + x) * 3;
            let s = row * src.width * 3;
            self.pixels[d..d + src.width * 3].copy_from_slice(&src.pixels[s..s + src.width * 3]);
        }
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, self.pixels.clone())
                .expect("buffer size checked on construction")
                .write_to(&mut out, ImageFormat::Png)?;
        } else {
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, self.pixels.clone())
                .expect("buffer size checked on construction")
                .write_to(&mut out, ImageFormat::Png)?;
        }
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.png_bytes()?)?;
        Ok(())
    }

    /// Reads an 8-bit gray or RGB PNG.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?;
        match img {
            image::DynamicImage::ImageLuma8(b) => {
                Self::new(b.width() as usize, b.height() as usize, 1, b.into_raw())
            }
            image::DynamicImage::ImageRgb8(b) => Self::new(b.width() as usize, b.height() as usize, 3, b.into_raw()),
            other => Err(Error::format("PNG", format!("unsupported pixel format {:?}", other.color()))),
        }
    }
}
