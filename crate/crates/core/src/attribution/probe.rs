use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::methods::batched_gradients;
use super::{check_request, ScoreFunction};
use crate::autodiff::ReluRule;
use crate::error::{Error, Result};
use crate::rng::{stream, CounterRng};
use crate::tensor::{argmax, Tensor};

/// Gradient fluctuation along `x + tε`, `t ∈ [0, 1]`, for one pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Standard deviation of the single direction `ε`, in pixel units.
    pub epsilon_sigma: f32,
    /// Number of evenly spaced `t` values, endpoints included.
    pub t_steps: usize,
    /// `[row, col]` of the probed pixel.
    pub pixel: [usize; 2],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub t: f32,
    /// `∂S_c/∂x_{pixel, ch}` divided by the largest gradient entry at this `t`.
    pub derivatives: Vec<f32>,
    pub predicted_class: usize,
    /// Set when the largest gradient entry is not positive; derivatives are
    /// then reported as 0.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTable {
    pub class: usize,
    pub pixel: [usize; 2],
    pub rows: Vec<ProbeRow>,
}

impl ProbeTable {
    /// `(min, max)` of the normalized derivative of channel `ch` over `t`.
    pub fn range(&self, ch: usize) -> (f32, f32) {
        self.rows.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.derivatives[ch]), hi.max(r.derivatives[ch]))
        })
    }

    /// Whether every step along the path is assigned the same class.
    pub fn class_constant(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].predicted_class == w[1].predicted_class)
    }

    /// Header `t,deriv_ch0,...,predicted_class,flagged`.
    pub fn to_csv(&self) -> String {
        let channels = self.rows.first().map_or(0, |r| r.derivatives.len());
        let mut out = String::from("t");
        for ch in 0..channels {
            write!(out, ",deriv_ch{ch}").unwrap();
        }
        out.push_str(",predicted_class,flagged\n");
        for r in &self.rows {
            write!(out, "{}", r.t).unwrap();
            for d in &r.derivatives {
                write!(out, ",{d}").unwrap();
            }
            writeln!(out, ",{},{}", r.predicted_class, u8::from(r.flagged)).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Draws one `ε ~ N(0, epsilon_sigma²)` and, at each `t_k = k / (t_steps − 1)`,
/// records the probed pixel's gradient relative to the largest gradient
/// entry and the class assigned to `x + t_k ε`.
pub fn fluctuation_probe<M: ScoreFunction + ?Sized>(
    model: &M,
    x: &Tensor,
    class: usize,
    config: &ProbeConfig,
) -> Result<ProbeTable> {
    check_request(model, x, class)?;
    if config.t_steps < 2 {
        return Err(Error::invalid("the probe needs at least two t steps"));
    }
    if !(config.epsilon_sigma >= 0.0 && config.epsilon_sigma.is_finite()) {
        return Err(Error::invalid("epsilon_sigma must be finite and non-negative"));
    }
    let [h, w, c] = model.input_shape();
    let [row, col] = config.pixel;
    if row >= h || col >= w {
        return Err(Error::invalid(format!("pixel ({row}, {col}) is outside the {h}x{w} input")));
    }
    let mut rng = CounterRng::from_path(config.seed, &[stream::PROBE_EPSILON]);
    let epsilon = x.map(|_| rng.normal_f32(config.epsilon_sigma));
    let ts: Vec<f32> = (0..config.t_steps)
        .map(|k| k as f32 / (config.t_steps - 1) as f32)
        .collect();
    let points: Vec<Tensor> = ts
        .iter()
        .map(|&t| x.zip_map(&epsilon, |v, e| v + t * e))
        .collect::<Result<_>>()?;
    let offset = (row * w + col) * c;
    let rows = batched_gradients(model, &points, class, ReluRule::Standard)?
        .into_iter()
        .zip(ts)
        .map(|((logits, g), t)| {
            let max = g.max();
            let flagged = !(max > 0.0);
            let derivatives = g.data()[offset..offset + c]
                .iter()
                .map(|&d| if flagged { 0.0 } else { d / max })
                .collect();
            ProbeRow {
                t,
                derivatives,
                predicted_class: argmax(logits.data()),
                flagged,
            }
        })
        .collect();
    Ok(ProbeTable {
        class,
        pixel: config.pixel,
        rows,
    })
}
