//! Two-layer ReLU MLP `f(x) = W2ᵀ relu(W1ᵀ x) + b2` trained on mean squared error.
//!
//! Samples are columns: `X` is `d_x × N`, `Y` is `d_y × N`. The first layer has
//! no bias so that its pre-activations are exactly `Z = W1ᵀ X`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::spectra::{sym_eig, Preconditioner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_x: usize,
    pub d_h: usize,
    pub d_y: usize,
}

impl Dims {
    pub fn num_params(&self) -> usize {
        self.d_x * self.d_h + self.d_h * self.d_y + self.d_y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// `d_x × d_h`
    pub w1: Array2<f64>,
    /// `d_h × d_y`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpParams {
    pub fn zeros(dims: Dims) -> Self {
        MlpParams {
            w1: Array2::zeros((dims.d_x, dims.d_h)),
            w2: Array2::zeros((dims.d_h, dims.d_y)),
            b2: Array1::zeros(dims.d_y),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d_x: self.w1.nrows(),
            d_h: self.w1.ncols(),
            d_y: self.w2.ncols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if self.w2.nrows() != d.d_h || self.b2.len() != d.d_y {
            return Err(LabError::dim(
                "MlpParams",
                format!("w2 {}x{}, b2 {}", d.d_h, d.d_y, d.d_y),
                format!("w2 {:?}, b2 {}", self.w2.dim(), self.b2.len()),
            ));
        }
        if !self.is_finite() {
            return Err(LabError::NonFinite("parameters".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.w2.iter()).chain(self.b2.iter()).all(|v| v.is_finite())
    }

    /// Flatten as `[W1 row-major, W2 row-major, b2]`.
    pub fn to_flat(&self) -> Array1<f64> {
        self.w1.iter().chain(self.w2.iter()).chain(self.b2.iter()).copied().collect()
    }

    pub fn from_flat(dims: Dims, flat: &Array1<f64>) -> Result<Self> {
        if flat.len() != dims.num_params() {
            return Err(LabError::dim("MlpParams::from_flat", dims.num_params(), flat.len()));
        }
        let flat = flat.as_slice().expect("contiguous");
        let (a, rest) = flat.split_at(dims.d_x * dims.d_h);
        let (b, c) = rest.split_at(dims.d_h * dims.d_y);
        Ok(MlpParams {
            w1: Array2::from_shape_vec((dims.d_x, dims.d_h), a.to_vec()).expect("shape"),
            w2: Array2::from_shape_vec((dims.d_h, dims.d_y), b.to_vec()).expect("shape"),
            b2: Array1::from(c.to_vec()),
        })
    }

    /// `self += alpha · other`
    pub fn scaled_add(&mut self, alpha: f64, other: &MlpParams) {
        self.w1.scaled_add(alpha, &other.w1);
        self.w2.scaled_add(alpha, &other.w2);
        self.b2.scaled_add(alpha, &other.b2);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> MlpParams {
        MlpParams {
            w1: self.w1.mapv(&f),
            w2: self.w2.mapv(&f),
            b2: self.b2.mapv(&f),
        }
    }

    /// Elementwise `f(self, other)`.
    pub fn zip_map(&self, other: &MlpParams, f: impl Fn(f64, f64) -> f64) -> MlpParams {
        MlpParams {
            w1: Zip::from(&self.w1).and(&other.w1).map_collect(|&a, &b| f(a, b)),
            w2: Zip::from(&self.w2).and(&other.w2).map_collect(|&a, &b| f(a, b)),
            b2: Zip::from(&self.b2).and(&other.b2).map_collect(|&a, &b| f(a, b)),
        }
    }

    pub fn norm(&self) -> f64 {
        self.w1
            .iter()
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Pre-activations `W1ᵀX`, `d_h × N`.
    pub z: Array2<f64>,
    /// `relu(Z)`
    pub h: Array2<f64>,
    /// `d_y × N`
    pub yhat: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub dw1: Array2<f64>,
    pub dw2: Array2<f64>,
    pub db2: Array1<f64>,
    /// `∂L/∂Z`, `d_h × N`.
    pub dz: Array2<f64>,
}

impl Grads {
    pub fn to_params(&self) -> MlpParams {
        MlpParams {
            w1: self.dw1.clone(),
            w2: self.dw2.clone(),
            b2: self.db2.clone(),
        }
    }

    pub fn into_params(self) -> MlpParams {
        MlpParams {
            w1: self.dw1,
            w2: self.dw2,
            b2: self.db2,
        }
    }
}

/// First-layer weights with columns drawn from `N(0, σ² P)`.
///
/// Each column is `Sᵀu` with `u ~ N(0, σ² I)` and `P = SᵀS`,
/// `S = diag(√λ) Vᵀ` from the eigendecomposition of `P`.
pub fn init_p_isotropic(p: &Preconditioner, sigma: f64, d_h: usize, seed: u64) -> Result<Array2<f64>> {
    if !(sigma > 0.0) {
        return Err(LabError::InvalidArgument(format!("init scale must be > 0, got {sigma}")));
    }
    let d = p.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let u = Array2::from_shape_simple_fn((d, d_h), || normal.sample(&mut rng));
    if p.is_identity() {
        return Ok(u);
    }
    let eig = sym_eig(&p.matrix)?;
    let root = eig.eigenvalues.mapv(|l| l.max(0.0).sqrt());
    // Sᵀ = V diag(√λ)
    let s_t = &eig.eigenvectors * &root.view().insert_axis(Axis(0));
    Ok(s_t.dot(&u))
}

/// Readout initialization: `W2 ~ N(0, 1/d_h)` i.i.d., `b2 = 0`.
pub fn init_readout(d_h: usize, d_y: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d_h as f64).sqrt();
    let w2 = Array2::from_shape_simple_fn((d_h, d_y), || scale * rng.sample::<f64, _>(StandardNormal));
    (w2, Array1::zeros(d_y))
}

fn check_data(params: &MlpParams, x: &Array2<f64>, y: Option<&Array2<f64>>) -> Result<()> {
    let d = params.dims();
    if x.nrows() != d.d_x {
        return Err(LabError::dim("inputs", format!("{} rows", d.d_x), format!("{} rows", x.nrows())));
    }
    if let Some(y) = y {
        if y.dim() != (d.d_y, x.ncols()) {
            return Err(LabError::dim("targets", format!("{}x{}", d.d_y, x.ncols()), format!("{:?}", y.dim())));
        }
    }
    Ok(())
}

pub fn forward(params: &MlpParams, x: &Array2<f64>) -> Result<ForwardCache> {
    check_data(params, x, None)?;
    let z = params.w1.t().dot(x);
    let h = z.mapv(|v| v.max(0.0));
    let mut yhat = params.w2.t().dot(&h);
    yhat += &params.b2.view().insert_axis(Axis(1));
    Ok(ForwardCache { z, h, yhat })
}

/// Predictions only; large inputs are processed in column blocks through
/// one reused hidden buffer.
pub fn predict(params: &MlpParams, x: &Array2<f64>) -> Result<Array2<f64>> {
    const BLOCK: usize = 1024;
    check_data(params, x, None)?;
    let n = x.ncols();
    let mut yhat = Array2::zeros((params.b2.len(), n));
    let mut hidden = Array2::zeros((params.w1.ncols(), BLOCK.min(n)));
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        let mut h = hidden.slice_mut(s![.., ..end - start]);
        general_mat_mul(1.0, &params.w1.t(), &x.slice(s![.., start..end]), 0.0, &mut h);
        h.mapv_inplace(|v| v.max(0.0));
        let mut block = yhat.slice_mut(s![.., start..end]);
        block.assign(&params.b2.view().insert_axis(Axis(1)));
        general_mat_mul(1.0, &params.w2.t(), &h, 1.0, &mut block);
    }
    Ok(yhat)
}

/// `(1/N) Σ_i ‖ŷ_i − y_i‖²`
pub fn mse_loss(yhat: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if yhat.dim() != y.dim() {
        return Err(LabError::dim("mse_loss", format!("{:?}", y.dim()), format!("{:?}", yhat.dim())));
    }
    let n = y.ncols().max(1) as f64;
    Ok(Zip::from(yhat).and(y).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b)) / n)
}

pub fn backward(params: &MlpParams, x: &Array2<f64>, y: &Array2<f64>, cache: &ForwardCache) -> Result<Grads> {
    check_data(params, x, Some(y))?;
    let d = params.dims();
    let n = x.ncols();
    if cache.z.dim() != (d.d_h, n) || cache.yhat.dim() != (d.d_y, n) {
        return Err(LabError::dim(
            "backward cache",
            format!("z {}x{}", d.d_h, n),
            format!("z {:?}", cache.z.dim()),
        ));
    }
    let scale = 2.0 / n as f64;
    let dyhat = (&cache.yhat - y) * scale;
    let mut dz = params.w2.dot(&dyhat);
    Zip::from(&mut dz).and(&cache.z).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    Ok(Grads {
        dw1: x.dot(&dz.t()),
        dw2: cache.h.dot(&dyhat.t()),
        db2: dyhat.sum_axis(Axis(1)),
        dz,
    })
}

pub fn loss_and_grad(params: &MlpParams, x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Grads)> {
    let cache = forward(params, x)?;
    let loss = mse_loss(&cache.yhat, y)?;
    let grads = backward(params, x, y, &cache)?;
    Ok((loss, grads))
}

pub fn loss(params: &MlpParams, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    mse_loss(&predict(params, x)?, y)
}

/// Finite-difference step used by [`hvp`] along `v`.
pub fn hvp_step(params: &MlpParams, v: &MlpParams) -> f64 {
    1e-4 * (1.0 + params.norm()) / (1.0 + v.norm())
}

/// Hessian-vector product by central differences of the exact gradient.
///
/// Step `h = 1e-4 (1 + ‖θ‖) / (1 + ‖v‖)`.
pub fn hvp(params: &MlpParams, x: &Array2<f64>, y: &Array2<f64>, v: &MlpParams) -> Result<MlpParams> {
    if v.dims() != params.dims() {
        return Err(LabError::dim("hvp direction", params.dims().num_params(), v.dims().num_params()));
    }
    let vnorm = v.norm();
    if vnorm == 0.0 {
        return Ok(MlpParams::zeros(params.dims()));
    }
    let h = hvp_step(params, v);
    let mut plus = params.clone();
    plus.scaled_add(h, v);
    let mut minus = params.clone();
    minus.scaled_add(-h, v);
    let (_, gp) = loss_and_grad(&plus, x, y)?;
    let (_, gm) = loss_and_grad(&minus, x, y)?;
    let mut out = gp.into_params();
    out.scaled_add(-1.0, &gm.into_params());
    Ok(out.map(|a| a / (2.0 * h)))
}

/// Flat-vector form of [`hvp`].
pub fn hvp_flat(params: &MlpParams, x: &Array2<f64>, y: &Array2<f64>, v: &Array1<f64>) -> Result<Array1<f64>> {
    let v = MlpParams::from_flat(params.dims(), v)?;
    Ok(hvp(params, x, y, &v)?.to_flat())
}

#[derive(Debug, Clone)]
pub struct NeuronHessian {
    /// `Σ_i b_ij x_i x_iᵀ`, `d_x × d_x`.
    pub matrix: Array2<f64>,
    /// Per-sample weights `b_ij`.
    pub weights: Array1<f64>,
    /// Number of samples with `|z_ij| < margin`; the block is only the true
    /// Hessian when this is zero.
    pub near_kink: usize,
}

/// Hessian of the loss with respect to the first-layer weights of neuron `j`.
///
/// For MSE and ReLU the block is a weighted input covariance with
/// `b_ij = (2/N) 1[z_ij > 0] ‖W2[j, :]‖²`.
pub fn per_neuron_hessian(params: &MlpParams, x: &Array2<f64>, j: usize, margin: f64) -> Result<NeuronHessian> {
    check_data(params, x, None)?;
    let d = params.dims();
    if j >= d.d_h {
        return Err(LabError::InvalidArgument(format!("neuron index {j} out of range 0..{}", d.d_h)));
    }
    let n = x.ncols();
    let z = params.w1.column(j).dot(x);
    let readout = params.w2.row(j).dot(&params.w2.row(j));
    let scale = 2.0 / n as f64 * readout;
    let weights = z.mapv(|v| if v > 0.0 { scale } else { 0.0 });
    let near_kink = z.iter().filter(|v| v.abs() < margin).count();
    let weighted = x * &weights.view().insert_axis(Axis(0));
    let mut matrix = weighted.dot(&x.t());
    // exact symmetry
    let m = matrix.clone();
    matrix += &m.t();
    matrix *= 0.5;
    Ok(NeuronHessian {
        matrix,
        weights,
        near_kink,
    })
}
