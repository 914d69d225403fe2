//! MNIST IDX and CIFAR-10 binary batch readers.

use std::fs;
use std::path::{Path, PathBuf};

use nncomp_core::data::{Dataset, DatasetKind};
use nncomp_core::Tensor;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 32 * 32 * 3;

pub const MNIST_FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

fn be_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(file, offset as u64, "truncated header"))
}

/// Pixel byte to `[0, 1]`.
pub fn normalize(byte: u8) -> f32 {
    byte as f32 / 255.0
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(file, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let payload = &bytes[16..];
    let want = n * rows * cols;
    if payload.len() != want {
        let offset = 16 + payload.len().min(want);
        return Err(Error::format(file, offset as u64, format!("payload is {} bytes, header implies {want}", payload.len())));
    }
    Ok((n, rows, cols, payload.iter().map(|&b| normalize(b)).collect()))
}

pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(file, 0, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        let offset = 8 + payload.len().min(n);
        return Err(Error::format(file, offset as u64, format!("payload is {} bytes, header implies {n}", payload.len())));
    }
    if let Some(i) = payload.iter().position(|&l| l > 9) {
        return Err(Error::format(file, 8 + i as u64, format!("label {} out of range", payload[i])));
    }
    Ok(payload.to_vec())
}

fn mnist_split(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(&dir.join(images))?, images)?;
    if (rows, cols) != (28, 28) {
        return Err(Error::format(images, 8, format!("images are {rows}x{cols}, expected 28x28")));
    }
    let labels_v = parse_idx_labels(&read(&dir.join(labels))?, labels)?;
    if labels_v.len() != n {
        return Err(Error::format(labels, 4, format!("{} labels for {n} images", labels_v.len())));
    }
    Ok(Dataset::new(DatasetKind::Mnist, Tensor::new(vec![n, 28, 28, 1], pixels)?, labels_v)?)
}

/// Loads `(train, test)` from the four uncompressed IDX files in `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let [ti, tl, vi, vl] = MNIST_FILES;
    Ok((mnist_split(dir, ti, tl)?, mnist_split(dir, vi, vl)?))
}

/// Parses 3073-byte CIFAR records, converting channel-planar pixels to HWC.
pub fn parse_cifar_records(bytes: &[u8], file: &str) -> Result<(Vec<f32>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::format(file, offset as u64, format!("trailing partial record of {} bytes", bytes.len() - offset)));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = vec![0.0f32; n * 3072];
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(file, (r * CIFAR_RECORD) as u64, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        let out = &mut pixels[r * 3072..(r + 1) * 3072];
        for c in 0..3 {
            for p in 0..1024 {
                out[p * 3 + c] = normalize(rec[1 + c * 1024 + p]);
            }
        }
    }
    Ok((pixels, labels))
}

fn cifar_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(CIFAR_TEST_FILE).exists() && nested.join(CIFAR_TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn cifar_files(dir: &Path, files: &[&str]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (p, l) = parse_cifar_records(&read(&dir.join(f))?, f)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    Ok(Dataset::new(DatasetKind::Cifar10, Tensor::new(vec![n, 32, 32, 3], pixels)?, labels)?)
}

/// Loads `(train, test)` from the binary batches in `dir` (or its
/// `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = cifar_dir(dir);
    Ok((cifar_files(&dir, &CIFAR_TRAIN_FILES)?, cifar_files(&dir, &[CIFAR_TEST_FILE])?))
}

/// Dataset root layout: `<root>/mnist` and `<root>/cifar-10-batches-bin`.
pub fn load(kind: DatasetKind, root: &Path) -> Result<(Dataset, Dataset)> {
    match kind {
        DatasetKind::Mnist => load_mnist(&root.join("mnist")),
        DatasetKind::Cifar10 => load_cifar10(&root.join("cifar-10-batches-bin")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, 28, 28] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize(0), 0.0);
        assert_eq!(normalize(255), 1.0);
    }

    #[test]
    fn idx_image_payload_is_784_per_image() {
        let (n, r, c, px) = parse_idx_images(&idx_images(2, &[7u8; 1568]), "x").unwrap();
        assert_eq!((n, r, c, px.len()), (2, 28, 28, 1568));
    }

    #[test]
    fn truncated_idx_names_file_and_offset() {
        let err = parse_idx_images(&idx_images(2, &[0u8; 1000]), "train-images-idx3-ubyte").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train-images-idx3-ubyte") && msg.contains("byte 1016"), "{msg}");
        let mut bad = idx_images(1, &[0u8; 784]);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad, "f"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_images(&[0, 0], "f"), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_labels_range_checked() {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[1, 10, 2]);
        assert!(matches!(parse_idx_labels(&b, "l"), Err(Error::Format { offset: 9, .. })));
    }

    #[test]
    fn cifar_record_is_planar_to_hwc() {
        assert_eq!(CIFAR_RECORD, 3073);
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 3;
        rec[1] = 255; // red of pixel 0
        rec[1 + 1024 + 1] = 255; // green of pixel 1
        rec[1 + 2048 + 1023] = 255; // blue of the last pixel
        let (px, labels) = parse_cifar_records(&rec, "b").unwrap();
        assert_eq!(labels, vec![3]);
        assert_eq!(px[0], 1.0);
        assert_eq!(px[3 + 1], 1.0);
        assert_eq!(px[3071], 1.0);
        assert_eq!(px.iter().filter(|&&v| v > 0.0).count(), 3);
        assert!(parse_cifar_records(&rec[..3000], "b").is_err());
        rec[0] = 10;
        assert!(parse_cifar_records(&rec, "b").is_err());
    }
}
