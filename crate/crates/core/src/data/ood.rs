//! Correlation-shift digits: each training digit carries a fixed per-class
//! noise pattern; the two test splits break the pairing in opposite ways.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mnist::LabeledImages;
use crate::error::{LabError, Result};

pub const NUM_CLASSES: usize = 10;
pub const PIXEL_MIN: f64 = -0.5;
pub const PIXEL_MAX: f64 = 1.5;

/// Class shift applied when flipping: `c ↦ (c + 1) mod 10`.
pub fn shift_class(c: usize) -> usize {
    (c + 1) % NUM_CLASSES
}

pub fn unshift_class(c: usize) -> usize {
    (c + NUM_CLASSES - 1) % NUM_CLASSES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSizes {
    pub train: usize,
    pub val: usize,
    /// Size of each of the two shifted test splits.
    pub test: usize,
}

impl OodSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + 2 * self.test
    }
}

#[derive(Debug, Clone)]
pub struct OodSplit {
    /// `784 × n`
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    /// Index into the source image set.
    pub source_index: Vec<usize>,
    pub digit_class: Vec<usize>,
    pub noise_class: Vec<usize>,
}

impl OodSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn one_hot(&self) -> Array2<f64> {
        one_hot(&self.labels, NUM_CLASSES)
    }
}

#[derive(Debug, Clone)]
pub struct OodDataset {
    pub train: OodSplit,
    pub val: OodSplit,
    /// Noise flipped to `π(c)`; label is the digit class.
    pub test_flip_noise: OodSplit,
    /// Digit flipped to `π(c)`; label is the noise class `c`.
    pub test_flip_digit: OodSplit,
    /// `10 × 784`
    pub noise_bank: Array2<f64>,
    pub sigma_n: f64,
    pub seed: u64,
}

/// `k × N` indicator matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((classes, labels.len()));
    for (i, &c) in labels.iter().enumerate() {
        y[[c, i]] = 1.0;
    }
    y
}

/// Column-wise argmax of a `k × N` score matrix.
pub fn argmax_columns(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .axis_iter(Axis(1))
        .map(|col| {
            col.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of columns whose argmax equals the label.
pub fn accuracy(scores: ArrayView2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = argmax_columns(scores).iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

fn compose(
    source: &LabeledImages,
    bank: &Array2<f64>,
    indices: &[usize],
    noise_of: impl Fn(usize) -> usize,
    label_of: impl Fn(usize, usize) -> usize,
) -> OodSplit {
    let d = source.images.nrows();
    let mut x = Array2::zeros((d, indices.len()));
    let mut labels = Vec::with_capacity(indices.len());
    let mut digit_class = Vec::with_capacity(indices.len());
    let mut noise_class = Vec::with_capacity(indices.len());
    for (col, &idx) in indices.iter().enumerate() {
        let digit = source.labels[idx] as usize;
        let noise = noise_of(digit);
        let mut out = x.column_mut(col);
        out.assign(&source.images.column(idx));
        out += &bank.row(noise);
        out.mapv_inplace(|v| v.clamp(PIXEL_MIN, PIXEL_MAX));
        labels.push(label_of(digit, noise));
        digit_class.push(digit);
        noise_class.push(noise);
    }
    OodSplit {
        x,
        labels,
        source_index: indices.to_vec(),
        digit_class,
        noise_class,
    }
}

/// Draw the per-class noise bank and four disjoint splits from `source`.
pub fn build_ood(source: &LabeledImages, sigma_n: f64, seed: u64, sizes: OodSizes) -> Result<OodDataset> {
    if !(sigma_n >= 0.0) || !sigma_n.is_finite() {
        return Err(LabError::InvalidArgument(format!("σ_n must be finite and >= 0, got {sigma_n}")));
    }
    let n = source.images.ncols();
    if sizes.total() > n {
        return Err(LabError::InvalidArgument(format!(
            "requested {} images (train {} + val {} + 2×test {}) but only {n} are available",
            sizes.total(),
            sizes.train,
            sizes.val,
            sizes.test
        )));
    }
    let d = source.images.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = Array2::from_shape_simple_fn((NUM_CLASSES, d), || sigma_n * rng.sample::<f64, _>(StandardNormal));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let (train_idx, rest) = order.split_at(sizes.train);
    let (val_idx, rest) = rest.split_at(sizes.val);
    let (noise_idx, rest) = rest.split_at(sizes.test);
    let digit_idx = &rest[..sizes.test];

    let paired = |c| c;
    Ok(OodDataset {
        train: compose(source, &bank, train_idx, paired, |digit, _| digit),
        val: compose(source, &bank, val_idx, paired, |digit, _| digit),
        test_flip_noise: compose(source, &bank, noise_idx, shift_class, |digit, _| digit),
        // the image shows π(c), so its noise class is c = π⁻¹(digit)
        test_flip_digit: compose(source, &bank, digit_idx, unshift_class, |_, noise| noise),
        noise_bank: bank,
        sigma_n,
        seed,
    })
}

/// Per-class mean of `split.x − clean` over the split's samples.
pub fn class_mean_offsets(source: &LabeledImages, split: &OodSplit) -> Vec<Option<Array1<f64>>> {
    let d = split.x.nrows();
    let mut sums = vec![Array1::<f64>::zeros(d); NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for (col, &idx) in split.source_index.iter().enumerate() {
        let c = split.noise_class[col];
        sums[c] += &(&split.x.column(col) - &source.images.column(idx));
        counts[c] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, k)| (k > 0).then(|| s / k as f64))
        .collect()
}
