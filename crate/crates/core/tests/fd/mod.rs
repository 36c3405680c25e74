//! Analytic gradients against central finite differences of independent
//! f64 reference implementations, h = 1e-3, relative error ≤ 1e-3. Shared by
//! the core test suite and the acceptance run; each check panics on failure.

use gradmap::autodiff::{backward_from, forward, BackwardOptions, Bindings, GraphBuilder, Mode, Padding, ReluRule};
use gradmap::model::{Model, ModelSpec};
use gradmap::rng::CounterRng;
use gradmap::Tensor;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;
/// Denominator floor: relative error is measured against max(|fd|, FLOOR).
const FLOOR: f64 = 1e-4;
const COORDS: usize = 20;

fn uniform(rng: &mut CounterRng, n: usize, lo: f64, hi: f64) -> Vec<f32> {
    (0..n).map(|_| (lo + (hi - lo) * rng.next_f64()) as f32).collect()
}

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(FLOOR)
}

/// Compares `analytic[i]` with the central difference of `f` at `COORDS`
/// random coordinates of `x`.
fn check_coords(what: &str, x: &[f32], analytic: &[f32], rng: &mut CounterRng, f: impl Fn(&[f64]) -> f64) {
    assert_eq!(x.len(), analytic.len());
    let base: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut worst = 0f64;
    for _ in 0..COORDS {
        let i = rng.below(x.len());
        let mut p = base.clone();
        p[i] += H;
        let up = f(&p);
        p[i] -= 2.0 * H;
        let down = f(&p);
        let fd = (up - down) / (2.0 * H);
        let e = rel_err(analytic[i] as f64, fd);
        assert!(e <= TOL, "{what}: coordinate {i}: analytic {} vs fd {fd} (rel {e:.2e})", analytic[i]);
        worst = worst.max(e);
    }
    eprintln!("{what}: worst relative error {worst:.2e}");
}

fn dot(a: &[f64], r: &[f32]) -> f64 {
    a.iter().zip(r).map(|(&a, &r)| a * r as f64).sum()
}

// f64 reference ops, NHWC, cross-correlation.

fn conv_ref(x: &[f64], [n, h, w, cin]: [usize; 4], k: &[f64], [kh, kw, cout]: [usize; 3], b: &[f64], same: bool) -> Vec<f64> {
    let (pt, pl) = if same { ((kh - 1) / 2, (kw - 1) / 2) } else { (0, 0) };
    let (oh, ow) = if same { (h, w) } else { (h - kh + 1, w - kw + 1) };
    let mut y = vec![0.0; n * oh * ow * cout];
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy as isize + ky as isize - pt as isize;
                            let ix = ox as isize + kx as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((img * h + iy as usize) * w + ix as usize) * cin + ci];
                                acc += xv * k[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    y[((img * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    y
}

/// Returns the pooled values and the winning flat index of each window.
fn pool_ref(x: &[f64], [n, h, w, c]: [usize; 4]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(y.capacity());
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ((img * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if x[i] > best.0 {
                                best = (x[i], i);
                            }
                        }
                    }
                    y.push(best.0);
                    arg.push(best.1);
                }
            }
        }
    }
    (y, arg)
}

fn dense_ref(x: &[f64], rows: usize, w: &[f64], out: usize, b: &[f64]) -> Vec<f64> {
    let inp = x.len() / rows;
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            y[r * out + o] = b[o] + (0..inp).map(|i| x[r * inp + i] * w[o * inp + i]).sum::<f64>();
        }
    }
    y
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Runs `graph` forward on the bindings, seeds the head with `r`, and
/// returns the gradient of `Σ r ⊙ head` for the named nodes.
fn engine_grads(
    build: impl FnOnce(&mut GraphBuilder) -> usize,
    binds: &[(&str, &Tensor)],
    mode: Mode,
    r: &Tensor,
    wanted: &[&str],
) -> Vec<Tensor> {
    let mut b = GraphBuilder::new();
    let head = build(&mut b);
    let g = b.build(head).unwrap();
    let mut bindings = Bindings::new();
    for (n, t) in binds {
        bindings.bind(n, t);
    }
    let acts = forward(&g, &bindings, mode).unwrap();
    let grads = backward_from(&g, &acts, g.head(), r.clone(), BackwardOptions::default()).unwrap();
    wanted
        .iter()
        .map(|n| grads.get(g.find(n).unwrap()).unwrap().clone())
        .collect()
}

pub fn conv2d_same_and_valid() {
    let mut rng = CounterRng::new(101);
    let (xs, ks, cout) = ([2, 6, 5, 3], [3, 3], 4);
    for (padding, same) in [(Padding::Same, true), (Padding::Valid, false)] {
        let x = t(&xs, uniform(&mut rng, 180, -1.0, 1.0));
        let k = t(&[3, 3, 3, cout], uniform(&mut rng, 108, -0.5, 0.5));
        let bias = t(&[cout], uniform(&mut rng, cout, -0.5, 0.5));
        let (oh, ow) = if same { (6, 5) } else { (4, 3) };
        let r = t(&[2, oh, ow, cout], uniform(&mut rng, 2 * oh * ow * cout, -1.0, 1.0));
        let g = engine_grads(
            |b| {
                let (xi, ki, bi) = (b.input("x"), b.parameter("k"), b.parameter("b"));
                b.conv2d("conv", xi, ki, bi, ks, padding)
            },
            &[("x", &x), ("k", &k), ("b", &bias)],
            Mode::Inference,
            &r,
            &["x", "k", "b"],
        );
        let (kf, bf, xf) = (f64s(&k), f64s(&bias), f64s(&x));
        let what = format!("conv2d {padding:?}");
        check_coords(&format!("{what} input"), x.data(), g[0].data(), &mut rng, |p| {
            dot(&conv_ref(p, xs, &kf, [3, 3, cout], &bf, same), r.data())
        });
        check_coords(&format!("{what} kernel"), k.data(), g[1].data(), &mut rng, |p| {
            dot(&conv_ref(&xf, xs, p, [3, 3, cout], &bf, same), r.data())
        });
        check_coords(&format!("{what} bias"), bias.data(), g[2].data(), &mut rng, |p| {
            dot(&conv_ref(&xf, xs, &kf, [3, 3, cout], p, same), r.data())
        });
    }
}

pub fn maxpool_away_from_ties() {
    let mut rng = CounterRng::new(102);
    let shape = [2, 4, 6, 3];
    let n = 144;
    // Distinct levels 0.02 apart keep every window's runner-up ≥ 1e-2 away.
    let mut levels: Vec<f32> = (0..n).map(|i| i as f32 * 0.02 - 1.4).collect();
    rng.shuffle(&mut levels);
    let x = t(&shape, levels);
    let r = t(&[2, 2, 3, 3], uniform(&mut rng, 36, -1.0, 1.0));
    let g = engine_grads(
        |b| {
            let xi = b.input("x");
            b.max_pool2x2("pool", xi)
        },
        &[("x", &x)],
        Mode::Inference,
        &r,
        &["x"],
    );
    check_coords("maxpool2x2", x.data(), g[0].data(), &mut rng, |p| dot(&pool_ref(p, shape).0, r.data()));
}

pub fn dense_input_and_params() {
    let mut rng = CounterRng::new(103);
    let (rows, inp, out) = (3, 7, 5);
    let x = t(&[rows, inp], uniform(&mut rng, rows * inp, -1.0, 1.0));
    let w = t(&[out, inp], uniform(&mut rng, out * inp, -1.0, 1.0));
    let bias = t(&[out], uniform(&mut rng, out, -1.0, 1.0));
    let r = t(&[rows, out], uniform(&mut rng, rows * out, -1.0, 1.0));
    let g = engine_grads(
        |b| {
            let (xi, wi, bi) = (b.input("x"), b.parameter("w"), b.parameter("b"));
            b.dense("fc", xi, wi, bi)
        },
        &[("x", &x), ("w", &w), ("b", &bias)],
        Mode::Inference,
        &r,
        &["x", "w", "b"],
    );
    let (xf, wf, bf) = (f64s(&x), f64s(&w), f64s(&bias));
    check_coords("dense input", x.data(), g[0].data(), &mut rng, |p| {
        dot(&dense_ref(p, rows, &wf, out, &bf), r.data())
    });
    check_coords("dense weight", w.data(), g[1].data(), &mut rng, |p| {
        dot(&dense_ref(&xf, rows, p, out, &bf), r.data())
    });
    check_coords("dense bias", bias.data(), g[2].data(), &mut rng, |p| {
        dot(&dense_ref(&xf, rows, &wf, out, p), r.data())
    });
}

pub fn relu_add_dropout() {
    let mut rng = CounterRng::new(104);
    let n = 40;
    // |x| ≥ 0.05: well away from the kink.
    let x: Vec<f32> = uniform(&mut rng, n, 0.05, 1.0)
        .into_iter()
        .enumerate()
        .map(|(i, v)| if i % 2 == 0 { v } else { -v })
        .collect();
    let x = t(&[4, 10], x);
    let y = t(&[4, 10], uniform(&mut rng, n, -1.0, 1.0));
    let r = t(&[4, 10], uniform(&mut rng, n, -1.0, 1.0));

    let g = engine_grads(
        |b| {
            let xi = b.input("x");
            b.relu("relu", xi)
        },
        &[("x", &x)],
        Mode::Inference,
        &r,
        &["x"],
    );
    check_coords("relu", x.data(), g[0].data(), &mut rng, |p| {
        dot(&p.iter().map(|&v| v.max(0.0)).collect::<Vec<_>>(), r.data())
    });

    let g = engine_grads(
        |b| {
            let (xi, yi) = (b.input("x"), b.input("y"));
            b.add("sum", xi, yi)
        },
        &[("x", &x), ("y", &y)],
        Mode::Inference,
        &r,
        &["x", "y"],
    );
    let yf = f64s(&y);
    check_coords("add lhs", x.data(), g[0].data(), &mut rng, |p| {
        dot(&p.iter().zip(&yf).map(|(a, b)| a + b).collect::<Vec<_>>(), r.data())
    });
    check_coords("add rhs", y.data(), g[1].data(), &mut rng, |p| {
        let xf = f64s(&x);
        dot(&xf.iter().zip(p).map(|(a, b)| a + b).collect::<Vec<_>>(), r.data())
    });

    for (mode, label) in [(Mode::Inference, "dropout inference"), (Mode::Training { seed: 5 }, "dropout training")] {
        let build = |b: &mut GraphBuilder| {
            let xi = b.input("x");
            b.dropout("drop", xi, 0.5)
        };
        // The mask is random by design; read it off an all-ones forward pass.
        let ones = Tensor::full(&[4, 10], 1.0);
        let mut gb = GraphBuilder::new();
        let head = build(&mut gb);
        let graph = gb.build(head).unwrap();
        let acts = forward(&graph, &Bindings::new().with("x", &ones), mode).unwrap();
        let mask = f64s(acts.get(graph.head()).unwrap());
        if matches!(mode, Mode::Inference) {
            assert!(mask.iter().all(|&m| m == 1.0));
        } else {
            assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
            assert!(mask.iter().any(|&m| m == 0.0) && mask.iter().any(|&m| m == 2.0));
        }
        let g = engine_grads(build, &[("x", &x)], mode, &r, &["x"]);
        check_coords(label, x.data(), g[0].data(), &mut rng, |p| {
            dot(&p.iter().zip(&mask).map(|(a, m)| a * m).collect::<Vec<_>>(), r.data())
        });
    }
}

pub fn softmax_xent_logits() {
    let mut rng = CounterRng::new(105);
    for trial in 0..3 {
        let logits = t(&[10], uniform(&mut rng, 10, -3.0, 3.0));
        let label = trial * 3;
        let (loss, grad) = gradmap::autodiff::softmax_xent(&logits, label).unwrap();
        let reference = |p: &[f64]| {
            let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + p.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - p[label]
        };
        assert!((loss as f64 - reference(&f64s(&logits))).abs() < 1e-5);
        check_coords("softmax_xent", logits.data(), grad.data(), &mut rng, reference);
    }
}

pub fn softmax_xent_node_in_a_batch() {
    let mut rng = CounterRng::new(106);
    let logits = t(&[3, 4], uniform(&mut rng, 12, -2.0, 2.0));
    let mut targets = Tensor::zeros(&[3, 4]);
    for (row, c) in [1usize, 3, 0].into_iter().enumerate() {
        targets.data_mut()[row * 4 + c] = 1.0;
    }
    let g = engine_grads(
        |b| {
            let (l, tg) = (b.input("logits"), b.input("targets"));
            b.softmax_xent("loss", l, tg)
        },
        &[("logits", &logits), ("targets", &targets)],
        Mode::Inference,
        &Tensor::scalar(1.0),
        &["logits"],
    );
    let tf = f64s(&targets);
    check_coords("softmax_xent mean over batch", logits.data(), g[0].data(), &mut rng, |p| {
        let mut total = 0.0;
        for row in 0..3 {
            let z = &p[row * 4..row * 4 + 4];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - (0..4).map(|c| tf[row * 4 + c] * z[c]).sum::<f64>();
        }
        total / 3.0
    });
}

/// Activation pattern of the reference CNN: ReLU signs and pool winners.
#[derive(PartialEq)]
struct Pattern(Vec<bool>, Vec<usize>);

struct ReferenceCnn {
    p: std::collections::BTreeMap<String, Vec<f64>>,
}

impl ReferenceCnn {
    fn new(m: &Model) -> Self {
        Self {
            p: m.params().iter().map(|(k, v)| (k.clone(), f64s(v))).collect(),
        }
    }

    fn logits(&self, x: &[f64]) -> (Vec<f64>, Pattern) {
        let p = |n: &str| &self.p[n];
        let mut signs = Vec::new();
        let mut winners = Vec::new();
        let mut relu = |v: Vec<f64>| -> Vec<f64> {
            signs.extend(v.iter().map(|&a| a > 0.0));
            v.into_iter().map(|a| a.max(0.0)).collect()
        };
        let h = relu(conv_ref(x, [1, 28, 28, 1], p("conv1/kernel"), [5, 5, 32], p("conv1/bias"), true));
        let (h, a1) = pool_ref(&h, [1, 28, 28, 32]);
        let h = relu(conv_ref(&h, [1, 14, 14, 32], p("conv2/kernel"), [5, 5, 64], p("conv2/bias"), true));
        let (h, a2) = pool_ref(&h, [1, 14, 14, 64]);
        let h = relu(dense_ref(&h, 1, p("fc1/weight"), 1024, p("fc1/bias")));
        let logits = dense_ref(&h, 1, p("fc2/weight"), 10, p("fc2/bias"));
        winners.extend(a1);
        winners.extend(a2);
        (logits, Pattern(signs, winners))
    }
}

pub fn full_mnist_cnn_input_gradient() {
    let model = Model::initialize(ModelSpec::mnist_cnn(), 7).unwrap();
    let reference = ReferenceCnn::new(&model);
    let mut rng = CounterRng::new(107);
    for (trial, class) in [(0, 3usize), (1, 8)] {
        let x = uniform(&mut rng, 784, 0.0, 1.0);
        let xt = t(&[28, 28, 1], x.clone());
        let g = model.input_gradient(&xt, class, ReluRule::Standard).unwrap();
        let base: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let (l0, pat0) = reference.logits(&base);
        let engine_logits = model.logits(&xt).unwrap();
        for (a, b) in engine_logits.data().iter().zip(&l0) {
            assert!((*a as f64 - b).abs() < 1e-3 * b.abs().max(1.0), "reference forward disagrees");
        }
        let mut checked = 0;
        let mut skipped = 0;
        let mut worst = 0f64;
        while checked < COORDS {
            let i = rng.below(784);
            let mut p = base.clone();
            p[i] += H;
            let (up, pu) = reference.logits(&p);
            p[i] -= 2.0 * H;
            let (down, pd) = reference.logits(&p);
            // A ReLU or pooling switch inside [x − h, x + h] is a kink, not a
            // gradient error; such coordinates are resampled.
            if pu != pat0 || pd != pat0 {
                skipped += 1;
                assert!(skipped < 200, "too many coordinates straddle a kink");
                continue;
            }
            let fd = (up[class] - down[class]) / (2.0 * H);
            let e = rel_err(g.data()[i] as f64, fd);
            assert!(e <= TOL, "trial {trial} pixel {i}: analytic {} vs fd {fd} (rel {e:.2e})", g.data()[i]);
            worst = worst.max(e);
            checked += 1;
        }
        eprintln!("mnist cnn trial {trial}: worst relative error {worst:.2e}, {skipped} kink coordinates skipped");
    }
}

/// Every check, by name. Only the acceptance run iterates this.
#[allow(dead_code)]
pub const CHECKS: &[(&str, fn())] = &[
    ("conv2d_same_and_valid", conv2d_same_and_valid),
    ("maxpool_away_from_ties", maxpool_away_from_ties),
    ("dense_input_and_params", dense_input_and_params),
    ("relu_add_dropout", relu_add_dropout),
    ("softmax_xent_logits", softmax_xent_logits),
    ("softmax_xent_node_in_a_batch", softmax_xent_node_in_a_batch),
    ("full_mnist_cnn_input_gradient", full_mnist_cnn_input_gradient),
];
