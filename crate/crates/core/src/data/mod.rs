//! File formats: MNIST IDX, 8-bit PNG images and `SGMAP001` raw maps.
//!
//! Pixels are scaled by 1/255 on load and not otherwise normalized.

mod idx;
mod image_io;
mod rawmap;

pub use idx::{
    encode_idx_images, encode_idx_labels, load_mnist_dir, load_mnist_idx, parse_idx_images, parse_idx_labels,
    Dataset, Split, IMAGES_MAGIC, LABELS_MAGIC, MNIST_CLASSES,
};
pub use image_io::{load_image, save_image, tensor_to_bytes};
pub use rawmap::{decode_raw_map, encode_raw_map, load_raw_map, save_raw_map, RAW_MAP_MAGIC};
