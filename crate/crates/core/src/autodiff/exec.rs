//! Forward evaluation and reverse-mode differentiation of a [`Graph`].
//!
//! Each call allocates its own activation and gradient storage, so a graph
//! and its bound parameters can be shared by concurrent evaluations.

use std::borrow::Cow;
use std::collections::HashMap;

use super::graph::{Graph, NodeId, OpKind, Padding};
use super::kernels::{self, ConvGeometry};
use super::loss::xent_row;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, CounterRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Inference,
    /// Dropout is active; masks are drawn from `seed`.
    Training { seed: u64 },
}

/// How gradients pass backward through ReLU nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReluRule {
    /// Pass where the forward input is positive (derivative 0 at exactly 0).
    #[default]
    Standard,
    /// Pass where the forward input is positive and the upstream gradient is positive.
    Guided,
}

/// Named tensors supplied to `Input` and `Parameter` nodes.
#[derive(Debug, Default, Clone)]
pub struct Bindings<'a> {
    values: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &'a str, tensor: &'a Tensor) -> &mut Self {
        self.values.insert(name, tensor);
        self
    }

    pub fn with(mut self, name: &'a str, tensor: &'a Tensor) -> Self {
        self.values.insert(name, tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.values.get(name).copied()
    }
}

#[derive(Debug)]
enum Aux {
    None,
    PoolArgmax(Vec<u32>),
    DropoutMask(Vec<f32>),
    Softmax(Vec<f32>),
}

/// Per-node forward values for one evaluation.
#[derive(Debug)]
pub struct Activations<'a> {
    values: Vec<Option<Cow<'a, Tensor>>>,
    aux: Vec<Aux>,
}

impl<'a> Activations<'a> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id).and_then(|v| v.as_deref())
    }

    fn value(&self, id: NodeId) -> &Tensor {
        self.values[id]
            .as_deref()
            .expect("topological order guarantees predecessors are evaluated")
    }
}

/// Evaluates every node the graph head depends on.
pub fn forward<'a>(graph: &Graph, bindings: &Bindings<'a>, mode: Mode) -> Result<Activations<'a>> {
    forward_to(graph, bindings, mode, &[graph.head()])
}

/// Evaluates every node needed for `targets`.
pub fn forward_to<'a>(
    graph: &Graph,
    bindings: &Bindings<'a>,
    mode: Mode,
    targets: &[NodeId],
) -> Result<Activations<'a>> {
    let n = graph.nodes().len();
    let mut acts = Activations {
        values: (0..n).map(|_| None).collect(),
        aux: (0..n).map(|_| Aux::None).collect(),
    };
    for id in graph.ancestors(targets) {
        let node = graph.node(id);
        let (value, aux) = match &node.kind {
            OpKind::Input | OpKind::Parameter => {
                let t = bindings
                    .get(&node.name)
                    .ok_or_else(|| Error::Unbound(node.name.clone()))?;
                (Cow::Borrowed(t), Aux::None)
            }
            kind => {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&p| acts.value(p)).collect();
                let (t, aux) = eval_op(&node.name, id, kind, &inputs, mode)?;
                (Cow::Owned(t), aux)
            }
        };
        acts.values[id] = Some(value);
        acts.aux[id] = aux;
    }
    Ok(acts)
}

fn conv_geometry(name: &str, x: &Tensor, k: &Tensor, b: &Tensor, kind: &OpKind) -> Result<ConvGeometry> {
    let OpKind::Conv2d { kernel, padding, .. } = kind else {
        unreachable!()
    };
    let &[batch, height, width, in_ch] = x.shape() else {
        return Err(Error::shape(name, format!("input must be [n, h, w, c], got {:?}", x.shape())));
    };
    let &[kh, kw, kin, out_ch] = k.shape() else {
        return Err(Error::shape(name, format!("kernel must be [kh, kw, in, out], got {:?}", k.shape())));
    };
    if [kh, kw] != *kernel {
        return Err(Error::shape(
            name,
            format!("kernel is {kh}x{kw} but the node declares {}x{}", kernel[0], kernel[1]),
        ));
    }
    if kin != in_ch {
        return Err(Error::shape(
            name,
            format!("kernel expects {kin} input channels, input has {in_ch}"),
        ));
    }
    if b.shape() != [out_ch] {
        return Err(Error::shape(name, format!("bias must be [{out_ch}], got {:?}", b.shape())));
    }
    let (pad_top, pad_left, out_h, out_w) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, height, width),
        Padding::Valid => {
            if kh > height || kw > width {
                return Err(Error::shape(name, "kernel larger than input with valid padding"));
            }
            (0, 0, height - kh + 1, width - kw + 1)
        }
    };
    Ok(ConvGeometry {
        batch,
        height,
        width,
        in_ch,
        kh,
        kw,
        out_ch,
        pad_top,
        pad_left,
        out_h,
        out_w,
    })
}

/// `(batch, features, output is rank 1)` for a dense input.
fn dense_dims(name: &str, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, inp, single) = match x.shape() {
        [] => return Err(Error::shape(name, "dense input is a scalar")),
        [i] => (1, *i, true),
        [n, rest @ ..] => (*n, rest.iter().product(), false),
    };
    let &[out_dim, w_in] = w.shape() else {
        return Err(Error::shape(name, format!("weight must be [out, in], got {:?}", w.shape())));
    };
    if w_in != inp {
        return Err(Error::shape(
            name,
            format!("weight expects {w_in} input features, input has {inp} ({:?})", x.shape()),
        ));
    }
    if b.shape() != [out_dim] {
        return Err(Error::shape(name, format!("bias must be [{out_dim}], got {:?}", b.shape())));
    }
    Ok((n, inp, usize::from(!single)))
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [c] => (1, *c),
        [n, rest @ ..] => (*n, rest.iter().product()),
        [] => (1, 1),
    }
}

fn eval_op(name: &str, id: NodeId, kind: &OpKind, inputs: &[&Tensor], mode: Mode) -> Result<(Tensor, Aux)> {
    match kind {
        OpKind::Input | OpKind::Parameter => unreachable!("bound, not evaluated"),
        OpKind::Conv2d { .. } => {
            let g = conv_geometry(name, inputs[0], inputs[1], inputs[2], kind)?;
            let y = kernels::conv2d_forward(&g, inputs[0].data(), inputs[1].data(), inputs[2].data());
            Ok((Tensor::new(vec![g.batch, g.out_h, g.out_w, g.out_ch], y)?, Aux::None))
        }
        OpKind::MaxPool2x2 => {
            let x = inputs[0];
            let &[n, h, w, c] = x.shape() else {
                return Err(Error::shape(name, format!("input must be [n, h, w, c], got {:?}", x.shape())));
            };
            if h < 2 || w < 2 {
                return Err(Error::shape(name, format!("spatial size {h}x{w} is below 2x2")));
            }
            let (y, idx) = kernels::maxpool2x2_forward(x.data(), n, h, w, c);
            Ok((Tensor::new(vec![n, h / 2, w / 2, c], y)?, Aux::PoolArgmax(idx)))
        }
        OpKind::Dense => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (n, inp, batched) = dense_dims(name, x, w, b)?;
            let y = kernels::dense_forward(x.data(), n, inp, w.data(), b.data());
            let shape = if batched == 1 { vec![n, b.len()] } else { vec![b.len()] };
            Ok((Tensor::new(shape, y)?, Aux::None))
        }
        OpKind::Relu => Ok((inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }), Aux::None)),
        OpKind::Add => {
            if inputs[0].shape() != inputs[1].shape() {
                return Err(Error::shape(
                    name,
                    format!("operands {:?} and {:?}", inputs[0].shape(), inputs[1].shape()),
                ));
            }
            Ok((inputs[0].add(inputs[1])?, Aux::None))
        }
        OpKind::Dropout { rate } => match mode {
            Mode::Inference => Ok((inputs[0].clone(), Aux::None)),
            Mode::Training { seed } => {
                let keep = 1.0 - rate;
                let mut rng = CounterRng::new(derive_seed(seed, &[stream::DROPOUT, id as u64]));
                let mask: Vec<f32> = (0..inputs[0].len())
                    .map(|_| if rng.next_f64() >= *rate as f64 { 1.0 / keep } else { 0.0 })
                    .collect();
                let y = Tensor::new(
                    inputs[0].shape().to_vec(),
                    inputs[0].data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
                )?;
                Ok((y, Aux::DropoutMask(mask)))
            }
        },
        OpKind::SoftmaxXent => {
            let (logits, targets) = (inputs[0], inputs[1]);
            if logits.shape() != targets.shape() || logits.rank() == 0 {
                return Err(Error::shape(
                    name,
                    format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape()),
                ));
            }
            let (rows, classes) = rows_of(logits);
            let mut grad = vec![0.0; logits.len()];
            let mut total = 0.0;
            for r in 0..rows {
                let span = r * classes..(r + 1) * classes;
                total += xent_row(&logits.data()[span.clone()], &targets.data()[span.clone()], &mut grad[span]);
            }
            let inv = 1.0 / rows as f32;
            grad.iter_mut().for_each(|g| *g *= inv);
            Ok((Tensor::scalar((total / rows as f64) as f32), Aux::Softmax(grad)))
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackwardOptions {
    pub rule: ReluRule,
    /// Also compute gradients for `Parameter` nodes.
    pub parameter_grads: bool,
    /// Also compute gradients for `Input` nodes.
    pub input_grads: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            rule: ReluRule::Standard,
            parameter_grads: true,
            input_grads: true,
        }
    }
}

/// Gradients of a seeded scalar with respect to the activation of every node
/// the sweep reached.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Gradient of logit `class` (summed over batch rows) with respect to every
/// node, seeding the head with a one-hot vector.
pub fn backward(graph: &Graph, acts: &Activations<'_>, class: usize, rule: ReluRule) -> Result<Gradients> {
    let seed = one_hot_seed(graph, acts, class)?;
    backward_from(
        graph,
        acts,
        graph.head(),
        seed,
        BackwardOptions {
            rule,
            ..Default::default()
        },
    )
}

/// A seed tensor shaped like the head's activation with 1 at `class` in every row.
pub fn one_hot_seed(graph: &Graph, acts: &Activations<'_>, class: usize) -> Result<Tensor> {
    let head = acts
        .get(graph.head())
        .ok_or_else(|| Error::invalid("forward has not evaluated the head"))?;
    let (rows, classes) = rows_of(head);
    if class >= classes {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes: classes,
        });
    }
    let mut seed = Tensor::zeros(head.shape());
    for r in 0..rows {
        seed.data_mut()[r * classes + class] = 1.0;
    }
    Ok(seed)
}

/// Reverse-mode sweep from `node`, whose upstream gradient is `seed`.
pub fn backward_from(
    graph: &Graph,
    acts: &Activations<'_>,
    node: NodeId,
    seed: Tensor,
    opts: BackwardOptions,
) -> Result<Gradients> {
    let out = acts
        .get(node)
        .ok_or_else(|| Error::invalid(format!("node `{}` was not evaluated", graph.node(node).name)))?;
    if out.shape() != seed.shape() {
        return Err(Error::shape(
            &graph.node(node).name,
            format!("seed {:?} does not match activation {:?}", seed.shape(), out.shape()),
        ));
    }
    let nodes = graph.nodes();
    let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
    grads[node] = Some(seed);

    let wants = |p: NodeId| match nodes[p].kind {
        OpKind::Parameter => opts.parameter_grads,
        OpKind::Input => opts.input_grads,
        _ => true,
    };

    for id in (0..=node).rev() {
        let Some(dy) = grads[id].take() else { continue };
        let n = &nodes[id];
        let inputs: Vec<&Tensor> = n.inputs.iter().map(|&p| acts.value(p)).collect();
        let emit = |slot: usize, g: Tensor, grads: &mut Vec<Option<Tensor>>| -> Result<()> {
            let p = n.inputs[slot];
            match &mut grads[p] {
                Some(acc) => acc.add_assign(&g),
                empty => {
                    *empty = Some(g);
                    Ok(())
                }
            }
        };
        match &n.kind {
            OpKind::Input | OpKind::Parameter => {
                grads[id] = Some(dy);
                continue;
            }
            OpKind::Conv2d { .. } => {
                let g = conv_geometry(&n.name, inputs[0], inputs[1], inputs[2], &n.kind)?;
                let want_dx = wants(n.inputs[0]);
                let want_params = wants(n.inputs[1]) || wants(n.inputs[2]);
                let cg = kernels::conv2d_backward(&g, inputs[0].data(), inputs[1].data(), dy.data(), want_dx, want_params);
                if let Some(dx) = cg.dx {
                    emit(0, Tensor::new(inputs[0].shape().to_vec(), dx)?, &mut grads)?;
                }
                if let (Some(dk), Some(db)) = (cg.dkernel, cg.dbias) {
                    if wants(n.inputs[1]) {
                        emit(1, Tensor::new(inputs[1].shape().to_vec(), dk)?, &mut grads)?;
                    }
                    if wants(n.inputs[2]) {
                        emit(2, Tensor::new(inputs[2].shape().to_vec(), db)?, &mut grads)?;
                    }
                }
            }
            OpKind::MaxPool2x2 => {
                let Aux::PoolArgmax(idx) = &acts.aux[id] else {
                    return Err(Error::Invariant(format!("pooling indices missing for `{}`", n.name)));
                };
                let dx = kernels::maxpool2x2_backward(dy.data(), idx, inputs[0].len());
                emit(0, Tensor::new(inputs[0].shape().to_vec(), dx)?, &mut grads)?;
            }
            OpKind::Dense => {
                let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                let (rows, inp, _) = dense_dims(&n.name, x, w, b)?;
                let out_dim = b.len();
                if wants(n.inputs[0]) {
                    let dx = kernels::dense_backward_input(dy.data(), rows, w.data(), inp, out_dim);
                    emit(0, Tensor::new(x.shape().to_vec(), dx)?, &mut grads)?;
                }
                if wants(n.inputs[1]) || wants(n.inputs[2]) {
                    let (dw, db) = kernels::dense_backward_params(dy.data(), x.data(), rows, inp, out_dim);
                    if wants(n.inputs[1]) {
                        emit(1, Tensor::new(w.shape().to_vec(), dw)?, &mut grads)?;
                    }
                    if wants(n.inputs[2]) {
                        emit(2, Tensor::new(b.shape().to_vec(), db)?, &mut grads)?;
                    }
                }
            }
            OpKind::Relu => {
                let x = inputs[0];
                let dx = match opts.rule {
                    ReluRule::Standard => x.zip_map(&dy, |v, g| if v > 0.0 { g } else { 0.0 })?,
                    ReluRule::Guided => x.zip_map(&dy, |v, g| if v > 0.0 && g > 0.0 { g } else { 0.0 })?,
                };
                emit(0, dx, &mut grads)?;
            }
            OpKind::Add => {
                emit(0, dy.clone(), &mut grads)?;
                emit(1, dy.clone(), &mut grads)?;
            }
            OpKind::Dropout { .. } => match &acts.aux[id] {
                Aux::DropoutMask(mask) => {
                    let dx = Tensor::new(
                        dy.shape().to_vec(),
                        dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                    )?;
                    emit(0, dx, &mut grads)?;
                }
                _ => emit(0, dy.clone(), &mut grads)?,
            },
            OpKind::SoftmaxXent => {
                let Aux::Softmax(g) = &acts.aux[id] else {
                    return Err(Error::Invariant(format!("softmax cache missing for `{}`", n.name)));
                };
                let upstream = dy.item();
                let dlogits = Tensor::new(inputs[0].shape().to_vec(), g.iter().map(|&v| v * upstream).collect())?;
                emit(0, dlogits, &mut grads)?;
                // Targets are treated as constants.
            }
        }
        grads[id] = Some(dy);
    }
    Ok(Gradients { grads })
}
