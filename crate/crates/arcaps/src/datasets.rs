//! Readers for the MNIST IDX and CIFAR-10 binary containers.

use std::fs;
use std::path::{Path, PathBuf};

use arcaps_core::data::{Dataset, Split};
use arcaps_core::transform::ImageDims;

use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CLASSES: usize = 10;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header at offset {offset}")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::format(
            path,
            format!("bad magic 0x{magic:08x} at offset 0, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < start + len {
        return Err(Error::format(
            path,
            format!(
                "truncated at offset {}: {} data bytes expected from offset {start}",
                bytes.len(),
                len
            ),
        ));
    }
    Ok(&bytes[start..start + len])
}

/// Parses an IDX image file: `(rows, cols)` and `count * rows * cols` raw
/// bytes. `path` only labels errors.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(ImageDims, Vec<u8>)> {
    check_magic(bytes, IDX_IMAGES, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let data = payload(bytes, 16, count * rows * cols, path)?;
    Ok((ImageDims::new(rows, cols, 1), data.to_vec()))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let labels = payload(bytes, 8, count, path)?;
    if let Some(i) = labels.iter().position(|&l| l as usize >= CLASSES) {
        return Err(Error::format(path, format!("label {} at offset {} is not a digit", labels[i], 8 + i)));
    }
    Ok(labels.to_vec())
}

/// Loads an image/label pair of IDX files, scaling pixels to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let (dims, pixels) = parse_idx_images(&read(images)?, images)?;
    let labels_vec = parse_idx_labels(&read(labels)?, labels)?;
    let count = if dims.is_empty() { 0 } else { pixels.len() / dims.len() };
    if count != labels_vec.len() {
        return Err(Error::format(
            labels,
            format!(
                "count at offset 4 is {} but {} holds {count} images",
                labels_vec.len(),
                images.display()
            ),
        ));
    }
    Ok(Dataset::from_bytes(dims, &pixels, labels_vec, CLASSES, split)?)
}

/// The standard MNIST file names under `root`.
pub fn mnist_files(root: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Test => "t10k",
        Split::Train | Split::Val => "train",
    };
    (
        root.join(format!("{prefix}-images-idx3-ubyte")),
        root.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(root: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_files(root, split);
    load_idx(&images, &labels, split)
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parses one CIFAR-10 binary batch: records of a label byte followed by the
/// red, green and blue planes. Pixels come back interleaved `(row, col,
/// channel)`.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let last = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::format(
            path,
            format!(
                "partial record at offset {last}: {} bytes, records are {CIFAR_RECORD}",
                bytes.len() - last
            ),
        ));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3 * plane);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(Error::format(
                path,
                format!("label {} at offset {} outside 0-9", rec[0], k * CIFAR_RECORD),
            ));
        }
        labels.push(rec[0]);
        for p in 0..plane {
            for c in 0..3 {
                pixels.push(rec[1 + c * plane + p]);
            }
        }
    }
    Ok((pixels, labels))
}

/// Concatenates CIFAR-10 batch files into one dataset.
pub fn load_cifar10(files: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (p, l) = parse_cifar10(&read(f)?, f)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Ok(Dataset::from_bytes(
        ImageDims::new(CIFAR_SIDE, CIFAR_SIDE, 3),
        &pixels,
        labels,
        CLASSES,
        split,
    )?)
}

/// The standard CIFAR-10 batch names under `root`.
pub fn cifar10_files(root: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Test => vec![root.join("test_batch.bin")],
        Split::Train | Split::Val => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
    }
}
