use font8x8::legacy::BASIC_LEGACY;

use super::image::RenderedImage;
use crate::error::{Error, Result};

/// Height of the text strip under each grid cell.
pub const LABEL_HEIGHT: usize = 10;
const PAD: usize = 2;
const WHITE: [u8; 3] = [255; 3];
const BLACK: [u8; 3] = [0; 3];

/// Draws `text` at `(x, y)` in the 8×8 bitmap font, clipped to `max_w`
/// pixels. Characters outside ASCII render as `?`.
fn draw_text(img: &mut RenderedImage, text: &str, x: usize, y: usize, max_w: usize, color: [u8; 3]) {
    for (i, ch) in text.chars().take(max_w / 8).enumerate() {
        let glyph = BASIC_LEGACY[if ch.is_ascii() { ch as usize } else { '?' as usize }];
        for (gy, bits) in glyph.iter().enumerate() {
            for gx in 0..8 {
                let (px, py) = (x + i * 8 + gx, y + gy);
                if bits >> gx & 1 == 1 && px < img.width() && py < img.height() {
                    img.set_rgb(px, py, color);
                }
            }
        }
    }
}

/// Lays `images` out row-major on a white canvas, `rows × cols` cells with a
/// label strip under each. `labels` is empty or one per image.
pub fn render_grid(images: &[RenderedImage], rows: usize, cols: usize, labels: &[String]) -> Result<RenderedImage> {
    let first = images.first().ok_or_else(|| Error::invalid("a grid needs at least one image"))?;
    if rows * cols < images.len() {
        return Err(Error::invalid(format!(
            "{} images do not fit a {rows}x{cols} grid",
            images.len()
        )));
    }
    if !labels.is_empty() && labels.len() != images.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    let (cw, ch) = (first.width(), first.height());
    if let Some(bad) = images.iter().find(|i| (i.width(), i.height()) != (cw, ch)) {
        return Err(Error::invalid(format!(
            "grid cells must share one size: {cw}x{ch} vs {}x{}",
            bad.width(),
            bad.height()
        )));
    }
    let cell_h = ch + LABEL_HEIGHT;
    let width = PAD + cols * (cw + PAD);
    let height = PAD + rows * (cell_h + PAD);
    let mut out = RenderedImage::filled(width, height, WHITE);
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let x = PAD + c * (cw + PAD);
        let y = PAD + r * (cell_h + PAD);
        out.blit(img, x, y);
        if let Some(label) = labels.get(i) {
            draw_text(&mut out, label, x, y + ch + 1, cw, BLACK);
        }
    }
    Ok(out)
}

/// One curve for [`line_plot`].
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub points: Vec<(f32, f32)>,
    pub color: [u8; 3],
}

fn draw_line(img: &mut RenderedImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
            img.set_rgb(x as usize, y as usize, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// A plain line chart: frame, a light zero line when 0 is in range, and one
/// polyline per series. Axis ranges cover all points.
pub fn line_plot(series: &[Series], width: usize, height: usize) -> Result<RenderedImage> {
    if width < 16 || height < 16 {
        return Err(Error::invalid("plot area is too small"));
    }
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f32::INFINITY, f32::NEG_INFINITY, f32::INFINITY, f32::NEG_INFINITY);
    for &(x, y) in pts {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        return Err(Error::invalid("nothing to plot"));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let margin = 4usize;
    let (pw, ph) = ((width - 2 * margin - 1) as f32, (height - 2 * margin - 1) as f32);
    let to_px = |x: f32, y: f32| {
        let px = margin as f32 + (x - x0) / (x1 - x0) * pw;
        let py = margin as f32 + (y1 - y) / (y1 - y0) * ph;
        (px.round() as i64, py.round() as i64)
    };
    let mut img = RenderedImage::filled(width, height, WHITE);
    let (l, t, r, b) = (
        margin as i64 - 1,
        margin as i64 - 1,
        (width - margin) as i64,
        (height - margin) as i64,
    );
    if y0 < 0.0 && y1 > 0.0 {
        let (_, zy) = to_px(x0, 0.0);
        draw_line(&mut img, (l, zy), (r, zy), [200; 3]);
    }
    for (a, c) in [((l, t), (r, t)), ((r, t), (r, b)), ((r, b), (l, b)), ((l, b), (l, t))] {
        draw_line(&mut img, a, c, BLACK);
    }
    for s in series {
        let mut prev = None;
        for &(x, y) in &s.points {
            if !(x.is_finite() && y.is_finite()) {
                prev = None;
                continue;
            }
            let p = to_px(x, y);
            draw_line(&mut img, prev.unwrap_or(p), p, s.color);
            prev = Some(p);
        }
    }
    Ok(img)
}
