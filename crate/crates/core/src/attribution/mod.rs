//! Sensitivity maps for one input and one class.
//!
//! Every method differentiates the pre-softmax logit `S_c`. Gradients for
//! many points (SmoothGrad samples, IG path points, probe steps) are taken in
//! batches of [`GRAD_BATCH`]; batch composition never depends on the number
//! of worker threads and per-sample results are reduced in sample order, so
//! a request and seed always yield the same bits.

mod methods;
mod probe;

use serde::{Deserialize, Serialize};

use crate::autodiff::ReluRule;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub use methods::{attribute, guided_backprop, integrated_gradients, smooth_grad, vanilla_gradient, GRAD_BATCH};
pub use probe::{fluctuation_probe, ProbeConfig, ProbeRow, ProbeTable};

/// Anything with a differentiable vector of class scores over a fixed input
/// shape. [`Model`] is the main implementor.
pub trait ScoreFunction: Sync {
    /// `[h, w, c]` of one example.
    fn input_shape(&self) -> [usize; 3];

    fn num_classes(&self) -> usize;

    /// Logits `[n, classes]` and `∂S_class/∂x` (`[n, h, w, c]`) for a batch.
    fn logits_and_gradients(&self, xs: &Tensor, class: usize, rule: ReluRule) -> Result<(Tensor, Tensor)>;
}

impl ScoreFunction for Model {
    fn input_shape(&self) -> [usize; 3] {
        Model::input_shape(self)
    }

    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn logits_and_gradients(&self, xs: &Tensor, class: usize, rule: ReluRule) -> Result<(Tensor, Tensor)> {
        self.logits_and_input_gradients(xs, class, rule)
    }
}

/// Signed per-pixel, per-channel attribution for one input and class.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMap {
    /// Same shape as the input.
    pub values: Tensor,
    pub class: usize,
    /// e.g. `vanilla`, `smooth_grad(integrated_gradients)`.
    pub method: String,
    /// Hyper-parameters that produced the map.
    pub params: serde_json::Value,
}

/// IG path start.
#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    /// All zeros.
    Black,
    Custom(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgSpec {
    pub baseline: Baseline,
    /// Riemann-sum steps `m`.
    pub steps: usize,
}

impl IgSpec {
    pub fn black(steps: usize) -> Self {
        Self {
            baseline: Baseline::Black,
            steps,
        }
    }
}

/// A base (unsmoothed) attribution method.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Vanilla,
    GuidedBackprop,
    IntegratedGradients(IgSpec),
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::GuidedBackprop => "guided_backprop",
            Method::IntegratedGradients(_) => "integrated_gradients",
        }
    }

    fn params(&self) -> serde_json::Value {
        match self {
            Method::IntegratedGradients(spec) => serde_json::json!({
                "ig_steps": spec.steps,
                "ig_baseline": match spec.baseline {
                    Baseline::Black => "black",
                    Baseline::Custom(_) => "custom",
                },
            }),
            _ => serde_json::json!({}),
        }
    }
}

/// SmoothGrad noise: `σ = noise_fraction · (x_max − x_min)`, `samples`
/// perturbed copies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub noise_fraction: f32,
    pub samples: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("SmoothGrad needs at least one sample"));
        }
        if !(self.noise_fraction >= 0.0 && self.noise_fraction.is_finite()) {
            return Err(Error::invalid(format!(
                "noise fraction must be finite and non-negative, got {}",
                self.noise_fraction
            )));
        }
        Ok(())
    }

    /// Noise standard deviation for input `x`.
    pub fn sigma(&self, x: &Tensor) -> f32 {
        self.noise_fraction * (x.max() - x.min())
    }
}

fn check_request<M: ScoreFunction + ?Sized>(model: &M, x: &Tensor, class: usize) -> Result<()> {
    if x.shape() != model.input_shape() {
        return Err(Error::shape(
            "x",
            format!("model expects {:?}, got {:?}", model.input_shape(), x.shape()),
        ));
    }
    if class >= model.num_classes() {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes: model.num_classes(),
        });
    }
    if !x.is_finite() {
        return Err(Error::invalid("input contains non-finite values"));
    }
    Ok(())
}
