//! MNIST loading and continual-learning task streams.
//!
//! The base images are kept once as bytes; task views normalize (and, for
//! permuted streams, shuffle pixels) on the fly when a batch is assembled, so
//! a ten-task permuted stream costs no more memory than the raw dataset.

pub mod idx;
mod stream;

pub use stream::{Split, StreamDescriptor, StreamKind, TaskStream, TaskView};

use crate::error::{Error, Result};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Standard MNIST normalization: x in [0, 255] -> (x/255 - mean) / std.
pub const PIXEL_MEAN: f64 = 0.1307;
pub const PIXEL_STD: f64 = 0.3081;

pub fn normalize_pixel(byte: u8) -> f64 {
    (byte as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD
}

/// One labeled example as presented to a task: normalized pixels plus the
/// task-local and global label.
#[derive(Clone, Debug)]
pub struct Example {
    pub pixels: Vec<f64>,
    pub task_id: usize,
    pub local_label: usize,
    pub global_label: usize,
}

/// Raw MNIST split held in memory as bytes.
pub struct MnistBase {
    pub train_pixels: Vec<u8>,
    pub train_labels: Vec<u8>,
    pub test_pixels: Vec<u8>,
    pub test_labels: Vec<u8>,
    pub dim: usize,
}

impl MnistBase {
    pub fn n_train(&self) -> usize {
        self.train_labels.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_labels.len()
    }
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!(
        "missing {stem}[.gz] under {}",
        dir.display()
    )))
}

/// Load the four canonical MNIST files (gzip or raw) from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Arc<MnistBase>> {
    let train_images = idx::read_images(&find_file(dir, "train-images-idx3-ubyte")?)?;
    let train_labels = idx::read_labels(&find_file(dir, "train-labels-idx1-ubyte")?)?;
    let test_images = idx::read_images(&find_file(dir, "t10k-images-idx3-ubyte")?)?;
    let test_labels = idx::read_labels(&find_file(dir, "t10k-labels-idx1-ubyte")?)?;

    for (images, labels, split) in [
        (&train_images, &train_labels, "train"),
        (&test_images, &test_labels, "test"),
    ] {
        if images.count != labels.len() {
            return Err(Error::Data(format!(
                "{split}: {} images vs {} labels",
                images.count,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Data(format!("{split}: label {bad} out of range")));
        }
    }
    if train_images.rows != test_images.rows || train_images.cols != test_images.cols {
        return Err(Error::Data("train/test image dimensions differ".into()));
    }

    Ok(Arc::new(MnistBase {
        dim: train_images.rows * train_images.cols,
        train_pixels: train_images.pixels,
        train_labels,
        test_pixels: test_images.pixels,
        test_labels,
    }))
}

/// Data directory resolution: explicit flag, then `IBPWF_DATA_DIR`, then
/// `./data`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("IBPWF_DATA_DIR") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("data")
}
