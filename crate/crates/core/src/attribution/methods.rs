use rayon::prelude::*;

use super::{check_request, Baseline, IgSpec, Method, NoiseSpec, ScoreFunction, SensitivityMap};
use crate::autodiff::ReluRule;
use crate::error::{Error, Result};
use crate::rng::{stream, CounterRng};
use crate::tensor::Tensor;

/// Points per forward/backward batch.
pub const GRAD_BATCH: usize = 16;

/// Logits and gradients of `S_class` at every point, `GRAD_BATCH` points per
/// pass. Results come back in point order.
pub(crate) fn batched_gradients<M: ScoreFunction + ?Sized>(
    model: &M,
    points: &[Tensor],
    class: usize,
    rule: ReluRule,
) -> Result<Vec<(Tensor, Tensor)>> {
    let chunks: Vec<Vec<(Tensor, Tensor)>> = points
        .par_chunks(GRAD_BATCH)
        .map(|chunk| {
            let (logits, grads) = model.logits_and_gradients(&Tensor::stack(chunk)?, class, rule)?;
            (0..chunk.len())
                .map(|i| {
                    let l = logits.batch_item(i)?;
                    let g = grads.batch_item(i)?.reshape(chunk[i].shape())?;
                    Ok((l, g))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn single_gradient<M: ScoreFunction + ?Sized>(model: &M, x: &Tensor, class: usize, rule: ReluRule) -> Result<Tensor> {
    let mut out = batched_gradients(model, std::slice::from_ref(x), class, rule)?;
    Ok(out.pop().expect("one point in, one gradient out").1)
}

fn finish(values: Tensor, class: usize, method: String, params: serde_json::Value) -> Result<SensitivityMap> {
    if !values.is_finite() {
        return Err(Error::Invariant(format!("{method} produced non-finite values")));
    }
    Ok(SensitivityMap {
        values,
        class,
        method,
        params,
    })
}

/// `∂S_c(x)/∂x` with the standard ReLU rule.
pub fn vanilla_gradient<M: ScoreFunction + ?Sized>(model: &M, x: &Tensor, class: usize) -> Result<SensitivityMap> {
    attribute(model, x, class, &Method::Vanilla)
}

/// The input gradient with every ReLU passing only positive upstream
/// gradient.
pub fn guided_backprop<M: ScoreFunction + ?Sized>(model: &M, x: &Tensor, class: usize) -> Result<SensitivityMap> {
    attribute(model, x, class, &Method::GuidedBackprop)
}

/// `(x − b) ⊙ (1/m) Σ_{k=1..m} ∇S_c(b + (k/m)(x − b))`.
pub fn integrated_gradients<M: ScoreFunction + ?Sized>(
    model: &M,
    x: &Tensor,
    class: usize,
    spec: &IgSpec,
) -> Result<SensitivityMap> {
    attribute(model, x, class, &Method::IntegratedGradients(spec.clone()))
}

/// Runs a base method on `x`.
pub fn attribute<M: ScoreFunction + ?Sized>(
    model: &M,
    x: &Tensor,
    class: usize,
    method: &Method,
) -> Result<SensitivityMap> {
    check_request(model, x, class)?;
    if let Method::IntegratedGradients(spec) = method {
        check_ig(spec, x)?;
    }
    let values = base_values(model, x, class, method)?;
    finish(values, class, method.tag().to_string(), method.params())
}

fn check_ig(spec: &IgSpec, x: &Tensor) -> Result<()> {
    if spec.steps == 0 {
        return Err(Error::invalid("integrated gradients needs at least one step"));
    }
    if let Baseline::Custom(b) = &spec.baseline {
        if b.shape() != x.shape() {
            return Err(Error::shape(
                "baseline",
                format!("baseline {:?} does not match input {:?}", b.shape(), x.shape()),
            ));
        }
    }
    Ok(())
}

fn base_values<M: ScoreFunction + ?Sized>(model: &M, x: &Tensor, class: usize, method: &Method) -> Result<Tensor> {
    match method {
        Method::Vanilla => single_gradient(model, x, class, ReluRule::Standard),
        Method::GuidedBackprop => single_gradient(model, x, class, ReluRule::Guided),
        Method::IntegratedGradients(spec) => ig_values(model, x, class, spec),
    }
}

fn ig_values<M: ScoreFunction + ?Sized>(model: &M, x: &Tensor, class: usize, spec: &IgSpec) -> Result<Tensor> {
    let baseline = match &spec.baseline {
        Baseline::Black => Tensor::zeros(x.shape()),
        Baseline::Custom(b) => b.clone(),
    };
    let delta = x.sub(&baseline)?;
    let m = spec.steps;
    let points: Vec<Tensor> = (1..=m)
        .map(|k| {
            let alpha = k as f32 / m as f32;
            baseline.zip_map(&delta, |b, d| b + alpha * d)
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![0f64; x.len()];
    for (_, g) in batched_gradients(model, &points, class, ReluRule::Standard)? {
        for (a, &v) in acc.iter_mut().zip(g.data()) {
            *a += v as f64;
        }
    }
    let values = delta
        .data()
        .iter()
        .zip(&acc)
        .map(|(&d, &a)| d * (a / m as f64) as f32)
        .collect();
    Tensor::new(x.shape().to_vec(), values)
}

/// The `k`-th SmoothGrad input: `x` plus i.i.d. `N(0, σ²)` per pixel and
/// channel, not clipped.
fn noisy_input(x: &Tensor, sigma: f32, seed: u64, k: usize) -> Tensor {
    let mut rng = CounterRng::from_path(seed, &[stream::SMOOTH_NOISE, k as u64]);
    x.map(|v| v + rng.normal_f32(sigma))
}

/// Mean of the base method over `noise.samples` perturbed copies of `x`.
///
/// `σ` is computed from this image's dynamic range; a constant image gets
/// `σ = 0` and is flagged in the map's params. For integrated gradients the
/// baseline stays fixed and only `x` is perturbed.
pub fn smooth_grad<M: ScoreFunction + ?Sized>(
    model: &M,
    x: &Tensor,
    class: usize,
    base: &Method,
    noise: &NoiseSpec,
) -> Result<SensitivityMap> {
    check_request(model, x, class)?;
    noise.validate()?;
    if let Method::IntegratedGradients(spec) = base {
        check_ig(spec, x)?;
    }
    let sigma = noise.sigma(x);
    let n = noise.samples;
    let inputs: Vec<Tensor> = (0..n).map(|k| noisy_input(x, sigma, noise.seed, k)).collect();
    let maps: Vec<Tensor> = match base {
        Method::Vanilla | Method::GuidedBackprop => {
            let rule = if *base == Method::GuidedBackprop {
                ReluRule::Guided
            } else {
                ReluRule::Standard
            };
            batched_gradients(model, &inputs, class, rule)?
                .into_iter()
                .map(|(_, g)| g)
                .collect()
        }
        Method::IntegratedGradients(_) => inputs
            .par_iter()
            .map(|xi| base_values(model, xi, class, base))
            .collect::<Result<_>>()?,
    };
    let mut maps = maps.into_iter();
    let mut sum = maps.next().expect("at least one sample");
    for m in maps {
        sum.add_assign(&m)?;
    }
    let values = sum.map(|v| v / n as f32);
    let mut params = base.params();
    params["noise_fraction"] = noise.noise_fraction.into();
    params["samples"] = n.into();
    params["seed"] = noise.seed.into();
    params["sigma"] = sigma.into();
    params["constant_input"] = (x.max() == x.min()).into();
    finish(values, class, format!("smooth_grad({})", base.tag()), params)
}
