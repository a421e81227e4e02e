//! Single-index teacher–student data with a prescribed input spectrum.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Where the teacher signal sits relative to the input spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// Signal on the unique largest-variance direction.
    High,
    /// Signal on the unique smallest-variance direction.
    Low,
}

impl Case {
    pub fn name(self) -> &'static str {
        match self {
            Case::High => "high",
            Case::Low => "low",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    /// `d_x × d_x` orthogonal basis.
    pub u: Array2<f64>,
    /// Diagonal of `S²`, all positive.
    pub s_squared: Array1<f64>,
}

impl SpectrumSpec {
    pub fn new(u: Array2<f64>, s_squared: Array1<f64>) -> Result<Self> {
        let d = s_squared.len();
        if u.dim() != (d, d) {
            return Err(LabError::dim("spectrum basis", format!("{d}x{d}"), format!("{:?}", u.dim())));
        }
        if s_squared.iter().any(|s| !(*s > 0.0)) {
            return Err(LabError::InvalidArgument("spectrum entries must be positive".into()));
        }
        let err = (u.t().dot(&u) - Array2::<f64>::eye(d)).mapv(|v| v * v).sum().sqrt();
        if err > 1e-10 {
            return Err(LabError::InvalidArgument(format!("spectrum basis is not orthogonal ({err:.2e})")));
        }
        Ok(SpectrumSpec { u, s_squared })
    }

    pub fn d_x(&self) -> usize {
        self.s_squared.len()
    }

    /// `U diag(√s²)`, the map from latent `β` to inputs.
    pub fn mixing(&self) -> Array2<f64> {
        &self.u * &self.s_squared.mapv(f64::sqrt).view().insert_axis(Axis(0))
    }
}

/// High: `(λ, λ⁻¹, …, λ⁻¹)`; Low: `(λ, …, λ, λ⁻¹)`; `U = I`.
pub fn make_spectrum(case: Case, d_x: usize, lambda: f64) -> Result<SpectrumSpec> {
    if d_x < 2 {
        return Err(LabError::InvalidArgument(format!("spectrum needs d_x >= 2, got {d_x}")));
    }
    if !(lambda > 0.0) {
        return Err(LabError::InvalidArgument(format!("λ must be > 0, got {lambda}")));
    }
    let s2 = Array1::from_shape_fn(d_x, |i| match case {
        Case::High if i == 0 => lambda,
        Case::High => 1.0 / lambda,
        Case::Low if i + 1 == d_x => 1.0 / lambda,
        Case::Low => lambda,
    });
    SpectrumSpec::new(Array2::eye(d_x), s2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub alpha: Array1<f64>,
    /// `h*(z) = softplus(steepness · z)`
    pub steepness: f64,
    pub sigma_noise: f64,
}

fn basis_vector(d: usize, i: usize) -> Array1<f64> {
    let mut e = Array1::zeros(d);
    e[i] = 1.0;
    e
}

/// `α = e₁` for High and `α = e_d` for Low, steepness 10, noise unset.
pub fn make_teacher(case: Case, d_x: usize) -> Result<TeacherSpec> {
    if d_x == 0 {
        return Err(LabError::InvalidArgument("teacher needs d_x >= 1".into()));
    }
    let index = match case {
        Case::High => 0,
        Case::Low => d_x - 1,
    };
    Ok(TeacherSpec {
        alpha: basis_vector(d_x, index),
        steepness: 10.0,
        sigma_noise: 0.0,
    })
}

/// `log(1 + eᵗ)` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t + (-t).exp().ln_1p()
    } else if t < -30.0 {
        t.exp()
    } else {
        t.exp().ln_1p()
    }
}

/// Noiseless teacher output `softplus(steepness · αᵀβ)`.
pub fn teacher_signal(beta: ArrayView1<f64>, teacher: &TeacherSpec) -> f64 {
    softplus(teacher.steepness * teacher.alpha.dot(&beta))
}

/// Teacher output plus `sigma_noise · noise_draw`.
pub fn teacher_label(beta: ArrayView1<f64>, teacher: &TeacherSpec, noise_draw: f64) -> f64 {
    teacher_signal(beta, teacher) + teacher.sigma_noise * noise_draw
}

/// Noise scale giving `Var(signal) / σ² = target_snr` (population variance).
pub fn calibrate_sigma(signal: &[f64], target_snr: f64) -> Result<f64> {
    if !(target_snr > 0.0) {
        return Err(LabError::InvalidArgument(format!("SNR must be > 0, got {target_snr}")));
    }
    if signal.len() < 2 {
        return Err(LabError::InvalidArgument("SNR calibration needs at least two signal values".into()));
    }
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let var = signal.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(LabError::InvalidArgument("signal has zero variance; SNR is undefined".into()));
    }
    Ok(var.sqrt() / target_snr.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub tag: String,
    pub snr: Option<f64>,
    pub sigma_noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `d_x × N`
    pub x: Array2<f64>,
    /// `d_y × N`
    pub y: Array2<f64>,
    /// Latent coefficients, `x_i = U diag(√s²) β_i`.
    pub beta: Array2<f64>,
    /// Standard-normal label noise draws (before scaling by σ).
    pub noise: Array1<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One row per sample: `x0..x{d-1},y`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.x.nrows();
        let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.x.column(i).iter().map(|v| format!("{v:e}")).collect();
            row.push(format!("{:e}", self.y[[0, i]]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draw `N` samples with a fixed teacher noise scale (no calibration).
pub fn synth_generate_with_sigma(
    spectrum: &SpectrumSpec,
    teacher: &TeacherSpec,
    n: usize,
    seed: u64,
    tag: &str,
) -> Result<Dataset> {
    let d = spectrum.d_x();
    if teacher.alpha.len() != d {
        return Err(LabError::dim("teacher alpha", d, teacher.alpha.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal))
        .reversed_axes()
        .as_standard_layout()
        .to_owned();
    let noise = Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal));
    let x = spectrum.mixing().dot(&beta);
    let y = Array1::from_shape_fn(n, |i| teacher_label(beta.column(i), teacher, noise[i])).insert_axis(Axis(0));
    Ok(Dataset {
        x,
        y,
        beta,
        noise,
        meta: DatasetMeta {
            tag: tag.to_string(),
            snr: None,
            sigma_noise: teacher.sigma_noise,
            seed,
        },
    })
}

/// Draw `N` samples, calibrating the label noise on this draw's noiseless
/// signal so that `Var(signal)/σ² = target_snr`. An infinite SNR means no
/// noise. Returns the dataset and the calibrated teacher.
pub fn synth_generate(
    spectrum: &SpectrumSpec,
    teacher: &TeacherSpec,
    n: usize,
    target_snr: f64,
    seed: u64,
    tag: &str,
) -> Result<(Dataset, TeacherSpec)> {
    if n < 2 {
        return Err(LabError::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let mut noiseless = teacher.clone();
    noiseless.sigma_noise = 0.0;
    let clean = synth_generate_with_sigma(spectrum, &noiseless, n, seed, tag)?;
    let sigma = if target_snr.is_infinite() {
        0.0
    } else {
        calibrate_sigma(clean.y.as_slice().expect("contiguous"), target_snr)?
    };
    let calibrated = TeacherSpec {
        sigma_noise: sigma,
        ..teacher.clone()
    };
    let mut data = clean;
    data.y.row_mut(0).scaled_add(sigma, &data.noise);
    data.meta.snr = Some(target_snr);
    data.meta.sigma_noise = sigma;
    Ok((data, calibrated))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransferDirection {
    #[serde(rename = "high_to_low")]
    HighToLow,
    #[serde(rename = "low_to_high")]
    LowToHigh,
}

impl TransferDirection {
    pub fn name(self) -> &'static str {
        match self {
            TransferDirection::HighToLow => "high_to_low",
            TransferDirection::LowToHigh => "low_to_high",
        }
    }
}

/// Shared spectrum `λ I_{d/2} ⊕ λ⁻¹ I_{d/2}` and the two tasks' teachers.
#[derive(Debug, Clone)]
pub struct TransferPair {
    pub spectrum: SpectrumSpec,
    pub task1: TeacherSpec,
    pub task2: TeacherSpec,
}

pub fn make_transfer_pair(direction: TransferDirection, d_x: usize, lambda: f64) -> Result<TransferPair> {
    if d_x == 0 || d_x % 2 != 0 {
        return Err(LabError::InvalidArgument(format!("transfer tasks need an even d_x, got {d_x}")));
    }
    if !(lambda > 0.0) {
        return Err(LabError::InvalidArgument(format!("λ must be > 0, got {lambda}")));
    }
    let s2 = Array1::from_shape_fn(d_x, |i| if i < d_x / 2 { lambda } else { 1.0 / lambda });
    let spectrum = SpectrumSpec::new(Array2::eye(d_x), s2)?;
    let teacher = |i| TeacherSpec {
        alpha: basis_vector(d_x, i),
        steepness: 10.0,
        sigma_noise: 0.0,
    };
    let (first, second) = match direction {
        TransferDirection::HighToLow => (0, d_x - 1),
        TransferDirection::LowToHigh => (d_x - 1, 0),
    };
    Ok(TransferPair {
        spectrum,
        task1: teacher(first),
        task2: teacher(second),
    })
}
