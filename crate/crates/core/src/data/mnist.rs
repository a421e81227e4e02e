//! IDX reader/writer for MNIST-style image and label files.
//!
//! Files may be raw or gzip-compressed; compression is detected from the
//! leading bytes, not the file name.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array2;

use crate::error::{LabError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| LabError::data(path, format!("cannot open: {e}")))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| LabError::data(path, format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Images as `rows·cols × N` in `[0, 1]` plus `(rows, cols)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Array2<f64>, (usize, usize))> {
    if bytes.len() < 16 {
        return Err(LabError::data(path, "truncated IDX image header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(LabError::data(path, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let pixels = rows * cols;
    let need = 16 + n * pixels;
    if bytes.len() < need {
        return Err(LabError::data(
            path,
            format!("truncated image data: header promises {n} images ({need} bytes), file has {}", bytes.len()),
        ));
    }
    let body = &bytes[16..need];
    let images = Array2::from_shape_fn((pixels, n), |(p, i)| body[i * pixels + p] as f64 / 255.0);
    Ok((images, (rows, cols)))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(LabError::data(path, "truncated IDX label header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(LabError::data(path, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() < 8 + n {
        return Err(LabError::data(
            path,
            format!("truncated label data: header promises {n} labels, file has {}", bytes.len() - 8),
        ));
    }
    Ok(bytes[8..8 + n].to_vec())
}

#[derive(Debug, Clone)]
pub struct LabeledImages {
    /// `rows·cols × N`, values in `[0, 1]`.
    pub images: Array2<f64>,
    pub labels: Vec<u8>,
    pub shape: (usize, usize),
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImages> {
    let (images, shape) = parse_idx_images(&read_maybe_gz(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, labels_path)?;
    if labels.len() != images.ncols() {
        return Err(LabError::data(
            labels_path,
            format!("{} labels for {} images in {}", labels.len(), images.ncols(), images_path.display()),
        ));
    }
    if let Some(bad) = labels.iter().find(|l| **l > 9) {
        return Err(LabError::data(labels_path, format!("label {bad} outside 0..=9")));
    }
    Ok(LabeledImages { images, labels, shape })
}

/// Encode raw pixel bytes (`N` images of `rows × cols`, row-major) as IDX.
pub fn encode_idx_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if pixels.len() != n * rows * cols {
        return Err(LabError::dim("IDX image payload", n * rows * cols, pixels.len()));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_bytes(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    let file = File::create(path)?;
    if gzip {
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        let mut file = file;
        file.write_all(bytes)?;
    }
    Ok(())
}
