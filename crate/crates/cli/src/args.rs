use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use gradmap::attribution::{IgSpec, Method};
use gradmap::viz::{ChannelReduction, Colormap, RenderSpec};

pub fn non_negative(s: &str) -> Result<f32, String> {
    match s.parse::<f32>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("expected a finite number >= 0, got `{s}`")),
    }
}

pub fn positive(s: &str) -> Result<f32, String> {
    match s.parse::<f32>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a finite number > 0, got `{s}`")),
    }
}

fn percentile(s: &str) -> Result<f32, String> {
    match s.parse::<f32>() {
        Ok(v) if v > 0.0 && v <= 100.0 => Ok(v),
        _ => Err(format!("expected a percentile in (0, 100], got `{s}`")),
    }
}

/// A class index, or `predicted` for `argmax_c S_c(x)` of the clean input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ClassArg {
    Predicted,
    Index(usize),
}

impl FromStr for ClassArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "predicted" {
            return Ok(ClassArg::Predicted);
        }
        s.parse()
            .map(ClassArg::Index)
            .map_err(|_| format!("expected a class index or `predicted`, got `{s}`"))
    }
}

impl fmt::Display for ClassArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassArg::Predicted => f.write_str("predicted"),
            ClassArg::Index(i) => write!(f, "{i}"),
        }
    }
}

impl TryFrom<String> for ClassArg {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ClassArg> for String {
    fn from(c: ClassArg) -> String {
        c.to_string()
    }
}

/// `row,col`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelArg {
    pub row: usize,
    pub col: usize,
}

impl FromStr for PixelArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let err = || format!("expected `row,col`, got `{s}`");
        let (r, c) = s.split_once(',').ok_or_else(err)?;
        Ok(PixelArg {
            row: r.trim().parse().map_err(|_| err())?,
            col: c.trim().parse().map_err(|_| err())?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for gradmap::data::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => gradmap::data::Split::Train,
            SplitArg::Test => gradmap::data::Split::Test,
        }
    }
}

/// Where the image to explain comes from.
#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputArgs {
    /// 8-bit gray or RGB PNG to explain
    #[arg(long, required_unless_present = "mnist_index", conflicts_with = "mnist_index")]
    pub input: Option<PathBuf>,
    /// Use this image of the MNIST split instead of --input
    #[arg(long)]
    pub mnist_index: Option<usize>,
    /// Directory with the MNIST IDX files
    #[arg(long, default_value = "data/mnist")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Vanilla,
    /// Integrated Gradients
    Ig,
    /// Guided Backpropagation
    Gbp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineArg {
    Black,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Vanilla)]
    pub method: MethodArg,
    /// Average the method over noisy copies of the input (SmoothGrad)
    #[arg(long)]
    pub smooth: bool,
    /// SmoothGrad sample count
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    pub samples: u32,
    /// SmoothGrad noise as a fraction of the image's value range
    #[arg(long, default_value_t = 0.1, value_parser = non_negative)]
    pub noise_frac: f32,
    /// Integrated Gradients Riemann steps
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    pub ig_steps: u32,
    #[arg(long, value_enum, default_value_t = BaselineArg::Black)]
    pub ig_baseline: BaselineArg,
}

impl MethodArgs {
    pub fn base(&self) -> Method {
        match self.method {
            MethodArg::Vanilla => Method::Vanilla,
            MethodArg::Gbp => Method::GuidedBackprop,
            MethodArg::Ig => Method::IntegratedGradients(IgSpec::black(self.ig_steps as usize)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionArg {
    AbsSum,
    SignedSum,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColormapArg {
    Grayscale,
    Diverging,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderArgs {
    /// How channels are collapsed before display
    #[arg(long, value_enum, default_value_t = ReductionArg::AbsSum)]
    pub reduction: ReductionArg,
    /// Clip values above this percentile
    #[arg(long, default_value_t = 99.0, value_parser = percentile)]
    pub cap_percentile: f32,
    /// Skip percentile capping
    #[arg(long)]
    pub no_cap: bool,
    /// Multiply the map by the input image before reduction
    #[arg(long)]
    pub multiply_input: bool,
    #[arg(long, value_enum, default_value_t = ColormapArg::Grayscale)]
    pub colormap: ColormapArg,
    /// Draw grayscale maps dark on light
    #[arg(long)]
    pub invert: bool,
    /// Integer upscaling of rendered maps
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=32))]
    pub scale: u32,
}

impl RenderArgs {
    pub fn reduction(&self) -> ChannelReduction {
        match self.reduction {
            ReductionArg::AbsSum => ChannelReduction::AbsSum,
            ReductionArg::SignedSum => ChannelReduction::SignedSum,
            ReductionArg::None => ChannelReduction::None,
        }
    }

    pub fn cap(&self) -> Option<f32> {
        (!self.no_cap).then_some(self.cap_percentile)
    }

    pub fn spec(&self) -> RenderSpec {
        RenderSpec {
            channel_reduction: self.reduction(),
            cap_percentile: self.cap(),
            multiply_with_input: self.multiply_input,
            colormap: match self.colormap {
                ColormapArg::Grayscale => Colormap::Grayscale,
                ColormapArg::Diverging => Colormap::DivergingBlueGrayRed,
            },
            invert: self.invert,
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Directory with the four MNIST IDX files
    #[arg(long, default_value = "data/mnist")]
    pub data: PathBuf,
    /// Checkpoint path; metrics and manifest are written next to it
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    pub epochs: u32,
    #[arg(long, default_value_t = 0.01, value_parser = positive)]
    pub lr: f32,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    pub batch: u32,
    /// Std of Gaussian input noise during training, in pixel units
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    pub noise_sigma: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on the first N training images only
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub train_limit: Option<u32>,
    /// Evaluate on the first N test images only
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub test_limit: Option<u32>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeArgs {
    /// SGCKPT01 checkpoint
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    /// Class index or `predicted`
    #[arg(long, default_value = "predicted")]
    pub class: ClassArg,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub render: RenderArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Columns are noise fractions
    Noise,
    /// Columns are sample counts
    Samples,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub sweep: SweepKind,
    /// Comma-separated swept values
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true, value_parser = non_negative)]
    pub values: Vec<f32>,
    /// Comma-separated MNIST indices (rows)
    #[arg(long, value_delimiter = ',', required_unless_present = "inputs", conflicts_with = "inputs")]
    pub mnist_indices: Vec<usize>,
    /// Comma-separated PNG paths (rows)
    #[arg(long, value_delimiter = ',')]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "data/mnist")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value = "predicted")]
    pub class: ClassArg,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub render: RenderArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid PNG path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = "predicted")]
    pub class: ClassArg,
    /// Probed pixel as `row,col`
    #[arg(long)]
    pub pixel: PixelArg,
    #[arg(long, default_value_t = 0.01, value_parser = non_negative)]
    pub epsilon_sigma: f32,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(2..))]
    pub t_steps: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the line plot
    #[arg(long)]
    pub no_plot: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    /// Class drawn red
    #[arg(long)]
    pub class_a: usize,
    /// Class drawn blue
    #[arg(long)]
    pub class_b: usize,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub render: RenderArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridArgs {
    /// Comma-separated cell PNGs, row-major
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub cells: Vec<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub rows: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub cols: u32,
    /// Comma-separated labels, one per cell
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq)]
pub struct ReplayArgs {
    /// A manifest written by any other command
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the replayed outputs here instead of over the originals
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
