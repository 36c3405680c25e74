//! Turning signed maps into pictures.
//!
//! The pipeline order is fixed: multiply with the input (optional) →
//! reduce channels → cap the upper percentile → normalize to `[0, 1]` →
//! colormap. Maps are `[h, w, c]` tensors throughout.

mod grid;
mod image;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use grid::{line_plot, render_grid, Series, LABEL_HEIGHT};
pub use image::{diverging_rgb, RenderedImage, BLUE, GRAY, RED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelReduction {
    /// Per-pixel sum of absolute channel values.
    #[default]
    AbsSum,
    /// Per-pixel sum of signed channel values.
    SignedSum,
    /// Single-channel maps only; passed through.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    Grayscale,
    /// `−1 → blue`, `0 → gray`, `+1 → red`, for signed single-channel data.
    DivergingBlueGrayRed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub channel_reduction: ChannelReduction,
    /// Upper-tail cap percentile in `(0, 100]`; `None` skips capping.
    pub cap_percentile: Option<f32>,
    /// Multiply the map by the input before reduction. Zero-valued pixels
    /// then never show up, whatever their gradient.
    pub multiply_with_input: bool,
    pub colormap: Colormap,
    /// Grayscale only: dark on light.
    pub invert: bool,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            channel_reduction: ChannelReduction::AbsSum,
            cap_percentile: Some(99.0),
            multiply_with_input: false,
            colormap: Colormap::Grayscale,
            invert: false,
        }
    }
}

fn dims(map: &Tensor) -> Result<[usize; 3]> {
    match *map.shape() {
        [h, w, c] => Ok([h, w, c]),
        ref s => Err(Error::invalid(format!("maps must be [h, w, c], got {s:?}"))),
    }
}

/// Collapses channels to a `[h, w, 1]` map.
pub fn reduce_channels(map: &Tensor, mode: ChannelReduction) -> Result<Tensor> {
    let [h, w, c] = dims(map)?;
    let data: Vec<f32> = match mode {
        ChannelReduction::None if c != 1 => {
            return Err(Error::invalid(format!(
                "channel reduction `none` needs a single-channel map, got {c} channels"
            )))
        }
        ChannelReduction::None => return Ok(map.clone()),
        ChannelReduction::AbsSum => map.data().chunks_exact(c).map(|p| p.iter().map(|v| v.abs()).sum()).collect(),
        ChannelReduction::SignedSum => map.data().chunks_exact(c).map(|p| p.iter().sum()).collect(),
    };
    Tensor::new(vec![h, w, 1], data)
}

/// The nearest-rank `p`-th percentile: the value at 1-based position
/// `ceil(p/100 · N)` of the ascending sort.
pub fn percentile(values: &[f32], p: f32) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty map"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid(format!("percentile must be in (0, 100], got {p}")));
    }
    let n = values.len();
    // The small slack keeps integral products such as 99% of 100 from
    // rounding up past their exact rank.
    let rank = ((p as f64 * n as f64 / 100.0) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    Ok(sorted[rank - 1])
}

/// Clips values above the `p`-th percentile to that percentile. The lower
/// tail is left alone.
pub fn cap_percentile(map: &Tensor, p: f32) -> Result<Tensor> {
    let cap = percentile(map.data(), p)?;
    Ok(map.map(|v| if v > cap { cap } else { v }))
}

/// Affine rescale to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize01(map: &Tensor) -> Tensor {
    let (lo, hi) = (map.min(), map.max());
    if hi > lo {
        let span = hi - lo;
        map.map(|v| (v - lo) / span)
    } else {
        Tensor::zeros(map.shape())
    }
}

/// Scales by the largest magnitude so values land in `[−1, 1]` with 0 kept
/// at 0; an all-zero map stays zero.
pub fn normalize_symmetric(map: &Tensor) -> Tensor {
    let m = map.data().iter().fold(0f32, |a, v| a.max(v.abs()));
    if m > 0.0 {
        map.map(|v| v / m)
    } else {
        Tensor::zeros(map.shape())
    }
}

/// Elementwise `map ⊙ x`. Pixels where `x = 0` vanish from the result.
pub fn multiply_with_input(map: &Tensor, x: &Tensor) -> Result<Tensor> {
    map.mul(x)
}

/// `normalize01(a) − normalize01(b)`, in `[−1, 1]`.
pub fn diff_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [_, _, ca] = dims(a)?;
    if ca != 1 || a.shape() != b.shape() {
        return Err(Error::shape(
            "diff_map",
            format!("need two single-channel maps of one shape, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    normalize01(a).sub(&normalize01(b))
}

/// Each map normalized to `[0, 1]` on its own, subtracted, and drawn with the
/// blue–gray–red colormap.
pub fn diff_map(a: &Tensor, b: &Tensor) -> Result<RenderedImage> {
    let d = diff_values(a, b)?;
    RenderedImage::from_diverging(&d)
}

/// Applies the full pipeline. `x` is required when `multiply_with_input` is
/// set.
pub fn render(map: &Tensor, x: Option<&Tensor>, spec: &RenderSpec) -> Result<RenderedImage> {
    let mut m = if spec.multiply_with_input {
        let x = x.ok_or_else(|| Error::invalid("multiply_with_input needs the input image"))?;
        multiply_with_input(map, x)?
    } else {
        map.clone()
    };
    m = reduce_channels(&m, spec.channel_reduction)?;
    if let Some(p) = spec.cap_percentile {
        m = cap_percentile(&m, p)?;
    }
    match spec.colormap {
        Colormap::Grayscale => {
            let mut n = normalize01(&m);
            if spec.invert {
                n = n.map(|v| 1.0 - v);
            }
            RenderedImage::from_gray(&n)
        }
        Colormap::DivergingBlueGrayRed => {
            if spec.channel_reduction == ChannelReduction::AbsSum {
                return Err(Error::invalid("the diverging colormap needs signed data, not abs_sum"));
            }
            RenderedImage::from_diverging(&normalize_symmetric(&m))
        }
    }
}

/// An input image in `[0, 1]` as an 8-bit picture (gray or RGB).
pub fn render_input(x: &Tensor) -> Result<RenderedImage> {
    let [_, _, c] = dims(x)?;
    match c {
        1 => RenderedImage::from_gray(&x.map(|v| v.clamp(0.0, 1.0))),
        3 => RenderedImage::from_rgb(&x.map(|v| v.clamp(0.0, 1.0))),
        _ => Err(Error::invalid(format!("cannot display a {c}-channel image"))),
    }
}
