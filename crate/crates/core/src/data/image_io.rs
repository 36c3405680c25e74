use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loads an 8-bit grayscale or RGB PNG as an `[h, w, c]` tensor in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        DynamicImage::ImageRgb8(rgb) => (3, rgb.into_raw()),
        other => {
            return Err(Error::format(
                path.display().to_string(),
                format!("unsupported pixel format {:?}; expected 8-bit gray or RGB", other.color()),
            ))
        }
    };
    Tensor::new(vec![h, w, channels], bytes.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Quantizes an `[h, w, 1|3]` tensor (values clamped to `[0, 1]`) to 8 bits.
pub fn tensor_to_bytes(t: &Tensor) -> Result<(u32, u32, usize, Vec<u8>)> {
    let &[h, w, c] = t.shape() else {
        return Err(Error::invalid(format!("image tensor must be [h, w, c], got {:?}", t.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("image tensor must have 1 or 3 channels, got {c}")));
    }
    let bytes = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok((w as u32, h as u32, c, bytes))
}

pub fn save_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let (w, h, c, bytes) = tensor_to_bytes(t)?;
    let img = if c == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("sized above"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("sized above"))
    };
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
