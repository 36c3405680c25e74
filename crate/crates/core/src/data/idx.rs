//! MNIST IDX files: a big-endian magic number (`0x00000803` for 3-D image
//! arrays, `0x00000801` for label vectors), one big-endian `u32` per
//! dimension, then the unsigned-byte payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_CLASSES: usize = 10;

/// Images with pixels in `[0, 1]` and their class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, h, w, c]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::invalid(format!("images must be [n, h, w, c], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[h, w, c]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Image `i` as an `[h, w, c]` tensor.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.images.batch_item(i)
    }

    /// The first `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let stride: usize = self.image_shape().iter().product();
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        Dataset::new(
            Tensor::new(shape, self.images.data()[..n * stride].to_vec())?,
            self.labels[..n].to_vec(),
            self.num_classes,
            self.split.clone(),
        )
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, format!("truncated header at byte {offset}")))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = read_u32_be(bytes, 0, what)?;
    if found != expected {
        return Err(Error::format(
            what,
            format!("bad IDX magic number: expected {expected:#010x}, found {found:#010x}"),
        ));
    }
    Ok(())
}

/// Parses an IDX image file into `[n, rows, cols, 1]` pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let what = "IDX images";
    check_magic(bytes, IMAGES_MAGIC, what)?;
    let n = read_u32_be(bytes, 4, what)? as usize;
    let rows = read_u32_be(bytes, 8, what)? as usize;
    let cols = read_u32_be(bytes, 12, what)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(what, format!("empty dimensions {n}x{rows}x{cols}")));
    }
    let expected = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::format(
            what,
            format!("payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, rows, cols, 1], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let what = "IDX labels";
    check_magic(bytes, LABELS_MAGIC, what)?;
    let n = read_u32_be(bytes, 4, what)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            what,
            format!("payload has {} bytes, header implies {n}", payload.len()),
        ));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path.as_ref())?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(
            "MNIST",
            format!("{} images but {} labels", images.shape()[0], labels.len()),
        ));
    }
    let split = images_path
        .file_name()
        .map(|f| f.to_string_lossy().split('-').next().unwrap_or("").to_string())
        .unwrap_or_default();
    Dataset::new(images, labels, MNIST_CLASSES, split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads a split from a directory holding the four standard MNIST files.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let mut ds = load_mnist_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.split = match split {
        Split::Train => "train".into(),
        Split::Test => "test".into(),
    };
    Ok(ds)
}

/// Serializes images (`[n, h, w, 1]`, values in `[0, 1]`) to IDX bytes,
/// rounding to the nearest byte.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let &[n, h, w, 1] = images.shape() else {
        return Err(Error::invalid(format!("IDX images must be [n, h, w, 1], got {:?}", images.shape())));
    };
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}
