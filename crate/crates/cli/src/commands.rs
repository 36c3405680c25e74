use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use gradmap::attribution::{attribute as base_map, fluctuation_probe, smooth_grad, NoiseSpec, ProbeConfig, SensitivityMap};
use gradmap::data::{load_image, load_mnist_dir, save_raw_map, Split};
use gradmap::model::{load_checkpoint, save_checkpoint, train as train_model, Model, ModelSpec, TrainConfig};
use gradmap::viz::{self, line_plot, render_grid, RenderedImage, Series};
use gradmap::Tensor;

use crate::args::{
    AttributeArgs, ClassArg, DiffArgs, GridArgs, InputArgs, MethodArgs, ProbeArgs, RenderArgs, SweepArgs,
    SweepKind, TrainArgs,
};
use crate::manifest::RunRecord;
use crate::{sibling, UsageError};

fn mnist_files(data: &Path, split: Split) -> [PathBuf; 2] {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    [
        data.join(format!("{prefix}-images-idx3-ubyte")),
        data.join(format!("{prefix}-labels-idx1-ubyte")),
    ]
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("loading model {}", path.display()))?
        .into_model())
}

struct Input {
    x: Tensor,
    sources: Vec<PathBuf>,
    label: Option<usize>,
}

fn load_input(args: &InputArgs) -> Result<Input> {
    match (&args.input, args.mnist_index) {
        (Some(p), _) => Ok(Input {
            x: load_image(p).with_context(|| format!("loading image {}", p.display()))?,
            sources: vec![p.clone()],
            label: None,
        }),
        (None, Some(i)) => load_mnist_images(&args.data, args.split.into(), &[i]).map(|mut v| v.remove(0)),
        (None, None) => Err(UsageError("give --input or --mnist-index".into()).into()),
    }
}

fn load_mnist_images(data: &Path, split: Split, indices: &[usize]) -> Result<Vec<Input>> {
    let ds = load_mnist_dir(data, split).with_context(|| format!("loading MNIST from {}", data.display()))?;
    let sources = mnist_files(data, split).to_vec();
    indices
        .iter()
        .map(|&i| {
            if i >= ds.len() {
                anyhow::bail!(gradmap::Error::InvalidArgument(format!(
                    "MNIST index {i} is out of range for {} images",
                    ds.len()
                )));
            }
            Ok(Input {
                x: ds.image(i)?,
                sources: sources.clone(),
                label: Some(ds.labels[i]),
            })
        })
        .collect()
}

/// `predicted` is resolved on the clean input, before any noise is drawn.
fn resolve_class(model: &Model, x: &Tensor, class: ClassArg) -> Result<usize> {
    Ok(match class {
        ClassArg::Predicted => model.classify(x)?,
        ClassArg::Index(c) => {
            model.check_class(c)?;
            c
        }
    })
}

fn compute_map(model: &Model, x: &Tensor, class: usize, m: &MethodArgs, seed: u64) -> Result<SensitivityMap> {
    let base = m.base();
    let map = if m.smooth {
        let noise = NoiseSpec {
            noise_fraction: m.noise_frac,
            samples: m.samples as usize,
            seed,
        };
        smooth_grad(model, x, class, &base, &noise)?
    } else {
        base_map(model, x, class, &base)?
    };
    Ok(map)
}

fn render_map(map: &SensitivityMap, x: &Tensor, r: &RenderArgs) -> Result<RenderedImage> {
    Ok(viz::render(&map.values, Some(x), &r.spec())?.upscale(r.scale as usize))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<RunRecord> {
    let load = |split| load_mnist_dir(&a.data, split).with_context(|| format!("loading MNIST from {}", a.data.display()));
    let mut train_set = load(Split::Train)?;
    if let Some(n) = a.train_limit {
        train_set = train_set.take(n as usize)?;
    }
    let mut test_set = load(Split::Test)?;
    if let Some(n) = a.test_limit {
        test_set = test_set.take(n as usize)?;
    }
    let config = TrainConfig {
        epochs: a.epochs as usize,
        batch_size: a.batch as usize,
        learning_rate: a.lr,
        seed: a.seed,
        noise_sigma: a.noise_sigma,
    };
    let report = train_model(&ModelSpec::mnist_cnn(), &train_set, Some(&test_set), &config, |m| {
        eprintln!(
            "epoch {}: loss {:.4}, train acc {:.4}, test acc {:.4}",
            m.epoch,
            m.train_loss,
            m.train_accuracy,
            m.test_accuracy.unwrap_or(f32::NAN)
        );
    })?;
    ensure_parent(&a.out)?;
    save_checkpoint(&a.out, &report.checkpoint)?;
    let metrics_path = sibling(&a.out, ".metrics.csv");
    let mut csv = String::from("epoch,train_loss,train_accuracy,test_accuracy\n");
    for m in &report.epochs {
        let test = m.test_accuracy.map(|v| v.to_string()).unwrap_or_default();
        writeln!(csv, "{},{},{},{}", m.epoch, m.train_loss, m.train_accuracy, test).unwrap();
    }
    std::fs::write(&metrics_path, csv)?;
    let mut inputs = mnist_files(&a.data, Split::Train).to_vec();
    inputs.extend(mnist_files(&a.data, Split::Test));
    Ok(RunRecord {
        inputs,
        outputs: vec![a.out.clone(), metrics_path],
        resolved: json!({
            "final_test_accuracy": report.checkpoint.metadata.final_accuracy,
            "train_examples": train_set.len(),
            "test_examples": test_set.len(),
        }),
    })
}

pub fn attribute(a: &AttributeArgs) -> Result<RunRecord> {
    let model = load_model(&a.model)?;
    let input = load_input(&a.input)?;
    let class = resolve_class(&model, &input.x, a.class)?;
    let map = compute_map(&model, &input.x, class, &a.method, a.seed)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let raw = a.out_dir.join("map.sgmap");
    save_raw_map(&raw, &map.values)?;
    let png = a.out_dir.join("map.png");
    render_map(&map, &input.x, &a.render)?.save_png(&png)?;
    let mut inputs = vec![a.model.clone()];
    inputs.extend(input.sources);
    Ok(RunRecord {
        inputs,
        outputs: vec![raw, png],
        resolved: json!({
            "class": class,
            "label": input.label,
            "method": map.method,
            "params": map.params,
        }),
    })
}

pub fn sweep(a: &SweepArgs) -> Result<RunRecord> {
    let model = load_model(&a.model)?;
    let rows: Vec<Input> = if a.inputs.is_empty() {
        load_mnist_images(&a.data, a.split.into(), &a.mnist_indices)?
    } else {
        a.inputs
            .iter()
            .map(|p| {
                Ok(Input {
                    x: load_image(p).with_context(|| format!("loading image {}", p.display()))?,
                    sources: vec![p.clone()],
                    label: None,
                })
            })
            .collect::<Result<_>>()?
    };
    if rows.is_empty() {
        return Err(UsageError("no images to sweep".into()).into());
    }
    if a.sweep == SweepKind::Samples {
        if let Some(v) = a.values.iter().find(|v| v.fract() != 0.0 || **v < 1.0) {
            return Err(UsageError(format!("sample counts must be whole numbers >= 1, got {v}")).into());
        }
    }
    let scale = a.render.scale as usize;
    let mut cells = Vec::new();
    let mut labels = Vec::new();
    let mut classes = Vec::new();
    for row in &rows {
        let class = resolve_class(&model, &row.x, a.class)?;
        classes.push(class);
        cells.push(viz::render_input(&row.x)?.upscale(scale));
        labels.push(format!("c={class}"));
        for &v in &a.values {
            let mut m = a.method.clone();
            m.smooth = true;
            match a.sweep {
                SweepKind::Noise => {
                    m.noise_frac = v;
                    labels.push(format!("{v}"));
                }
                SweepKind::Samples => {
                    m.samples = v as u32;
                    labels.push(format!("n={v}"));
                }
            }
            let map = compute_map(&model, &row.x, class, &m, a.seed)?;
            cells.push(render_map(&map, &row.x, &a.render)?);
        }
    }
    let grid = render_grid(&cells, rows.len(), a.values.len() + 1, &labels)?;
    ensure_parent(&a.out)?;
    grid.save_png(&a.out)?;
    let mut inputs = vec![a.model.clone()];
    for r in &rows {
        for s in &r.sources {
            if !inputs.contains(s) {
                inputs.push(s.clone());
            }
        }
    }
    Ok(RunRecord {
        inputs,
        outputs: vec![a.out.clone()],
        resolved: json!({
            "classes": classes,
            "rows": rows.len(),
            "cols": a.values.len() + 1,
        }),
    })
}

pub fn probe(a: &ProbeArgs) -> Result<RunRecord> {
    let model = load_model(&a.model)?;
    let input = load_input(&a.input)?;
    let class = resolve_class(&model, &input.x, a.class)?;
    let config = ProbeConfig {
        epsilon_sigma: a.epsilon_sigma,
        t_steps: a.t_steps as usize,
        pixel: [a.pixel.row, a.pixel.col],
        seed: a.seed,
    };
    let table = fluctuation_probe(&model, &input.x, class, &config)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let csv = a.out_dir.join("probe.csv");
    table.write_csv(&csv)?;
    let mut outputs = vec![csv];
    let channels = input.x.shape()[2];
    if !a.no_plot {
        const COLORS: [[u8; 3]; 3] = [[200, 30, 30], [30, 150, 30], [30, 30, 200]];
        let series: Vec<Series> = (0..channels)
            .map(|ch| Series {
                points: table.rows.iter().map(|r| (r.t, r.derivatives[ch])).collect(),
                color: COLORS[ch % 3],
            })
            .collect();
        let png = a.out_dir.join("probe.png");
        line_plot(&series, 320, 200)?.save_png(&png)?;
        outputs.push(png);
    }
    let ranges: Vec<[f32; 2]> = (0..channels)
        .map(|ch| {
            let (lo, hi) = table.range(ch);
            [lo, hi]
        })
        .collect();
    let mut inputs = vec![a.model.clone()];
    inputs.extend(input.sources);
    Ok(RunRecord {
        inputs,
        outputs,
        resolved: json!({
            "class": class,
            "label": input.label,
            "derivative_ranges": ranges,
            "class_constant": table.class_constant(),
            "flagged_rows": table.rows.iter().filter(|r| r.flagged).count(),
        }),
    })
}

pub fn diff(a: &DiffArgs) -> Result<RunRecord> {
    if a.class_a == a.class_b {
        return Err(UsageError(format!("--class-a and --class-b are both {}", a.class_a)).into());
    }
    let model = load_model(&a.model)?;
    model.check_class(a.class_a)?;
    model.check_class(a.class_b)?;
    let input = load_input(&a.input)?;
    let map_a = compute_map(&model, &input.x, a.class_a, &a.method, a.seed)?;
    let map_b = compute_map(&model, &input.x, a.class_b, &a.method, a.seed)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let raw_a = a.out_dir.join("map_a.sgmap");
    let raw_b = a.out_dir.join("map_b.sgmap");
    save_raw_map(&raw_a, &map_a.values)?;
    save_raw_map(&raw_b, &map_b.values)?;
    let prepare = |m: &SensitivityMap| -> Result<Tensor> {
        let mut v = m.values.clone();
        if a.render.multiply_input {
            v = viz::multiply_with_input(&v, &input.x)?;
        }
        v = viz::reduce_channels(&v, a.render.reduction())?;
        if let Some(p) = a.render.cap() {
            v = viz::cap_percentile(&v, p)?;
        }
        Ok(v)
    };
    let png = a.out_dir.join("diff.png");
    viz::diff_map(&prepare(&map_a)?, &prepare(&map_b)?)?
        .upscale(a.render.scale as usize)
        .save_png(&png)?;
    let mut inputs = vec![a.model.clone()];
    inputs.extend(input.sources);
    Ok(RunRecord {
        inputs,
        outputs: vec![png, raw_a, raw_b],
        resolved: json!({
            "class_a": a.class_a,
            "class_b": a.class_b,
            "label": input.label,
            "method": map_a.method,
            "params": map_a.params,
        }),
    })
}

pub fn grid(a: &GridArgs) -> Result<RunRecord> {
    let cells: Vec<RenderedImage> = a
        .cells
        .iter()
        .map(|p| RenderedImage::load_png(p).with_context(|| format!("loading cell {}", p.display())))
        .collect::<Result<_>>()?;
    let (rows, cols) = (a.rows as usize, a.cols as usize);
    if rows * cols < cells.len() {
        return Err(UsageError(format!("{} cells do not fit {rows}x{cols}", cells.len())).into());
    }
    if !a.labels.is_empty() && a.labels.len() != cells.len() {
        return Err(UsageError(format!("{} labels for {} cells", a.labels.len(), cells.len())).into());
    }
    let img = render_grid(&cells, rows, cols, &a.labels)?;
    ensure_parent(&a.out)?;
    img.save_png(&a.out)?;
    Ok(RunRecord {
        inputs: a.cells.clone(),
        outputs: vec![a.out.clone()],
        resolved: json!({ "width": img.width(), "height": img.height() }),
    })
}
