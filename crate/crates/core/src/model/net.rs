use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    backward_from, forward, one_hot_seed, BackwardOptions, Bindings, Graph, GraphBuilder, NodeId, Padding, ReluRule,
};
use crate::error::{Error, Result};
use crate::rng::{stream, CounterRng};
use crate::tensor::Tensor;

pub const INPUT: &str = "x";
pub const TARGETS: &str = "targets";
pub const LOSS: &str = "loss";

/// Network architecture. Serialized with an `architecture` tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case")]
pub enum ModelSpec {
    /// conv5×5×32 → relu → maxpool2×2 → conv5×5×64 → relu → maxpool2×2 →
    /// dense1024 → relu → dropout(0.5) → dense(classes), on 28×28×1 input.
    MnistCnn { num_classes: usize },
    /// A single dense layer on the flattened input: `S_c(x) = w_c·x + b_c`.
    Linear { input_shape: [usize; 3], num_classes: usize },
}

impl ModelSpec {
    pub fn mnist_cnn() -> Self {
        ModelSpec::MnistCnn { num_classes: 10 }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            ModelSpec::MnistCnn { num_classes } | ModelSpec::Linear { num_classes, .. } => num_classes,
        }
    }

    /// `[h, w, c]` of one example.
    pub fn input_shape(&self) -> [usize; 3] {
        match *self {
            ModelSpec::MnistCnn { .. } => [28, 28, 1],
            ModelSpec::Linear { input_shape, .. } => input_shape,
        }
    }

    /// Parameter names and shapes, with the fan-in used for initialization.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        match *self {
            ModelSpec::MnistCnn { num_classes } => vec![
                ("conv1/kernel", vec![5, 5, 1, 32], 25),
                ("conv1/bias", vec![32], 0),
                ("conv2/kernel", vec![5, 5, 32, 64], 25 * 32),
                ("conv2/bias", vec![64], 0),
                ("fc1/weight", vec![1024, 7 * 7 * 64], 7 * 7 * 64),
                ("fc1/bias", vec![1024], 0),
                ("fc2/weight", vec![num_classes, 1024], 1024),
                ("fc2/bias", vec![num_classes], 0),
            ],
            ModelSpec::Linear {
                input_shape,
                num_classes,
            } => {
                let inp: usize = input_shape.iter().product();
                vec![
                    ("linear/weight", vec![num_classes, inp], inp),
                    ("linear/bias", vec![num_classes], 0),
                ]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes() == 0 {
            return Err(Error::invalid("a model needs at least one class"));
        }
        if self.input_shape().contains(&0) {
            return Err(Error::invalid("input dimensions must be positive"));
        }
        Ok(())
    }

    /// The graph, with `x` as input, the logits as head, and a `loss` node
    /// fed by a `targets` input for training.
    pub fn build_graph(&self) -> Result<Graph> {
        let mut b = GraphBuilder::new();
        let x = b.input(INPUT);
        let logits: NodeId = match self {
            ModelSpec::MnistCnn { .. } => {
                let k1 = b.parameter("conv1/kernel");
                let b1 = b.parameter("conv1/bias");
                let k2 = b.parameter("conv2/kernel");
                let b2 = b.parameter("conv2/bias");
                let w3 = b.parameter("fc1/weight");
                let b3 = b.parameter("fc1/bias");
                let w4 = b.parameter("fc2/weight");
                let b4 = b.parameter("fc2/bias");
                let h = b.conv2d("conv1", x, k1, b1, [5, 5], Padding::Same);
                let h = b.relu("relu1", h);
                let h = b.max_pool2x2("pool1", h);
                let h = b.conv2d("conv2", h, k2, b2, [5, 5], Padding::Same);
                let h = b.relu("relu2", h);
                let h = b.max_pool2x2("pool2", h);
                let h = b.dense("fc1", h, w3, b3);
                let h = b.relu("relu3", h);
                let h = b.dropout("dropout", h, 0.5);
                b.dense("logits", h, w4, b4)
            }
            ModelSpec::Linear { .. } => {
                let w = b.parameter("linear/weight");
                let bias = b.parameter("linear/bias");
                b.dense("logits", x, w, bias)
            }
        };
        let targets = b.input(TARGETS);
        b.softmax_xent(LOSS, logits, targets);
        b.build(logits)
    }
}

/// A network with bound parameters. Immutable; share freely across threads.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    graph: Graph,
    params: BTreeMap<String, Tensor>,
}

impl Model {
    pub fn new(spec: ModelSpec, params: BTreeMap<String, Tensor>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.parameter_shapes();
        if params.len() != expected.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            let t = params
                .get(*name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(*name, format!("expected {shape:?}, got {:?}", t.shape())));
            }
        }
        let graph = spec.build_graph()?;
        Ok(Self { spec, graph, params })
    }

    /// He-normal weights and zero biases drawn from `seed`.
    pub fn initialize(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = BTreeMap::new();
        for (i, (name, shape, fan_in)) in spec.parameter_shapes().into_iter().enumerate() {
            let t = if fan_in == 0 {
                Tensor::zeros(&shape)
            } else {
                let std = (2.0 / fan_in as f64).sqrt() as f32;
                let mut rng = CounterRng::from_path(seed, &[stream::INIT, i as u64]);
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.normal_f32(std)).collect())?
            };
            params.insert(name.to_string(), t);
        }
        Self::new(spec, params)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape()
    }

    /// Parameters plus `x`, ready for [`forward`].
    pub fn bindings<'a>(&'a self, x: &'a Tensor) -> Bindings<'a> {
        let mut b = Bindings::new();
        for (name, t) in &self.params {
            b.bind(name, t);
        }
        b.bind(INPUT, x);
        b
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::ClassOutOfRange {
                class,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }

    /// Checks a single `[h, w, c]` example.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::shape(
                INPUT,
                format!("model expects {:?}, got {:?}", self.input_shape(), x.shape()),
            ));
        }
        Ok(())
    }

    fn check_batch(&self, xs: &Tensor) -> Result<()> {
        if xs.rank() != 4 || xs.shape()[1..] != self.input_shape() {
            return Err(Error::shape(
                INPUT,
                format!("model expects [n, {:?}], got {:?}", self.input_shape(), xs.shape()),
            ));
        }
        Ok(())
    }

    fn as_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        x.clone().reshape(&shape)
    }

    /// Logits `[n, classes]` for a batch `[n, h, w, c]` (inference mode).
    pub fn logits_batch(&self, xs: &Tensor) -> Result<Tensor> {
        self.check_batch(xs)?;
        let acts = forward(&self.graph, &self.bindings(xs), crate::autodiff::Mode::Inference)?;
        Ok(acts.get(self.graph.head()).expect("head evaluated").clone())
    }

    /// The logit vector `S(x)` for one example.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let l = self.logits_batch(&self.as_batch(x)?)?;
        l.reshape(&[self.num_classes()])
    }

    /// The pre-softmax class score `S_c(x)`.
    pub fn class_score(&self, x: &Tensor, class: usize) -> Result<f32> {
        self.check_class(class)?;
        Ok(self.logits(x)?.data()[class])
    }

    /// `argmax_c S_c(x)`, first index on ties.
    pub fn classify(&self, x: &Tensor) -> Result<usize> {
        Ok(self.logits(x)?.argmax())
    }

    /// Per-example gradients `∂S_c(x_i)/∂x_i` for a batch `[n, h, w, c]`.
    pub fn input_gradients(&self, xs: &Tensor, class: usize, rule: ReluRule) -> Result<Tensor> {
        Ok(self.logits_and_input_gradients(xs, class, rule)?.1)
    }

    /// Logits `[n, classes]` and input gradients of logit `class` from one
    /// forward and one backward pass over the batch.
    pub fn logits_and_input_gradients(&self, xs: &Tensor, class: usize, rule: ReluRule) -> Result<(Tensor, Tensor)> {
        self.check_batch(xs)?;
        self.check_class(class)?;
        let acts = forward(&self.graph, &self.bindings(xs), crate::autodiff::Mode::Inference)?;
        let seed = one_hot_seed(&self.graph, &acts, class)?;
        let mut grads = backward_from(
            &self.graph,
            &acts,
            self.graph.head(),
            seed,
            BackwardOptions {
                rule,
                parameter_grads: false,
                input_grads: true,
            },
        )?;
        let input = self.graph.find(INPUT).expect("model graphs have an input");
        let g = grads
            .take(input)
            .ok_or_else(|| Error::Invariant("no gradient reached the input".into()))?;
        let logits = acts.get(self.graph.head()).expect("head evaluated").clone();
        Ok((logits, g))
    }

    /// `∂S_c(x)/∂x` for one `[h, w, c]` example.
    pub fn input_gradient(&self, x: &Tensor, class: usize, rule: ReluRule) -> Result<Tensor> {
        let g = self.input_gradients(&self.as_batch(x)?, class, rule)?;
        g.reshape(x.shape())
    }
}
