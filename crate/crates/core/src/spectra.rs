//! Dense symmetric linear algebra for the preconditioning geometry.
//!
//! Everything here works on `d_x × N` data matrices (one sample per column).
//! The eigensolver and the thin SVD are both Jacobi methods: at the sizes this
//! crate deals with (`d_x ≤ 784`) they are accurate to a few ulps and need no
//! external LAPACK.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LabError, Result};

/// Elementwise symmetry tolerance, scaled by `max(1, max|a_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Default eigenvalue floor (relative to `λ_max`) used for negative powers.
pub const DEFAULT_FLOOR: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Array1<f64>,
    /// Orthonormal eigenvectors stored as columns, in the same order.
    pub eigenvectors: Array2<f64>,
}

impl SymEig {
    /// `V · diag(f(λ)) · Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Array2<f64> {
        let scaled = &self.eigenvectors * &self.eigenvalues.mapv(f).view().insert_axis(Axis(0));
        scaled.dot(&self.eigenvectors.t())
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        self.reconstruct_with(|l| l)
    }
}

/// Thin SVD `X = U S Vᵀ` of a `d_x × N` matrix with `d_x ≤ N`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// `d_x × d_x`, orthonormal.
    pub left: Array2<f64>,
    /// Nonnegative, descending.
    pub singulars: Array1<f64>,
    /// `N × d_x` with orthonormal columns.
    pub right: Array2<f64>,
}

impl ThinSvd {
    pub fn reconstruct(&self) -> Array2<f64> {
        let us = &self.left * &self.singulars.view().insert_axis(Axis(0));
        us.dot(&self.right.t())
    }
}

/// A symmetric PSD preconditioner, usually `Σ^p`.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    pub matrix: Array2<f64>,
    pub power: f64,
    pub floor: f64,
}

impl Preconditioner {
    pub fn identity(d: usize) -> Self {
        Preconditioner {
            matrix: Array2::eye(d),
            power: 0.0,
            floor: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// True for the zeroth power, which is stored as an exact identity.
    pub fn is_identity(&self) -> bool {
        self.power == 0.0
    }

    /// `P · M`, skipping the product when `P = I` so that `p = 0` is bitwise plain GD.
    pub fn apply(&self, m: &Array2<f64>) -> Array2<f64> {
        if self.is_identity() {
            m.clone()
        } else {
            self.matrix.dot(m)
        }
    }
}

/// How the empirical input covariance is normalized before taking powers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceScale {
    /// `Σ = X Xᵀ`
    Sum,
    /// `Σ = X Xᵀ / N`
    Mean,
}

pub fn covariance(x: &Array2<f64>, scale: CovarianceScale) -> Array2<f64> {
    let mut cov = x.dot(&x.t());
    symmetrize(&mut cov);
    if scale == CovarianceScale::Mean {
        cov /= x.ncols() as f64;
    }
    cov
}

fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
}

fn check_symmetric(a: &ArrayView2<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(LabError::dim("sym_eig", "square matrix", format!("{:?}", a.dim())));
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tolerance = SYMMETRY_TOL * scale;
    let n = a.nrows();
    let mut max_asymmetry = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asymmetry = max_asymmetry.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    if !max_asymmetry.is_finite() || a.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("sym_eig input".into()));
    }
    if max_asymmetry > tolerance {
        return Err(LabError::NotSymmetric {
            max_asymmetry,
            tolerance,
        });
    }
    Ok(())
}

/// Flip each column so that its largest-magnitude entry is positive
/// (first such entry on ties). Returns the applied signs.
fn canonical_signs(vectors: &mut Array2<f64>) -> Vec<f64> {
    let mut signs = Vec::with_capacity(vectors.ncols());
    for mut col in vectors.columns_mut() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for &v in col.iter() {
            if v.abs() > best * (1.0 + 1e-12) {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            col.mapv_inplace(|v| -v);
        }
        signs.push(sign);
    }
    signs
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(a: &Array2<f64>) -> Result<SymEig> {
    check_symmetric(&a.view())?;
    let n = a.nrows();
    // row-major working copy, symmetrized
    let mut m: Vec<f64> = a.iter().copied().collect();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if total > 0.0 {
        for _ in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += m[i * n + j] * m[i * n + j];
                }
            }
            if off.sqrt() <= 1e-16 * total {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[p * n + q];
                    if apq.abs() <= 1e-300 {
                        continue;
                    }
                    let app = m[p * n + p];
                    let aqq = m[q * n + q];
                    // skip rotations that cannot change the diagonal in floating point
                    if apq.abs() < 1e-18 * (app.abs() + aqq.abs()) {
                        m[p * n + q] = 0.0;
                        m[q * n + p] = 0.0;
                        continue;
                    }
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = m[k * n + p];
                        let akq = m[k * n + q];
                        m[k * n + p] = c * akp - s * akq;
                        m[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = m[p * n + k];
                        let aqk = m[q * n + k];
                        m[p * n + k] = c * apk - s * aqk;
                        m[q * n + k] = s * apk + c * aqk;
                    }
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| m[i * n + i]));
    let mut eigenvectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors[[k, col]] = v[k * n + src];
        }
    }
    canonical_signs(&mut eigenvectors);
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// One-sided (Hestenes) Jacobi thin SVD.
pub fn thin_svd(x: &Array2<f64>) -> Result<ThinSvd> {
    let (d, n) = x.dim();
    if d > n {
        return Err(LabError::dim("thin_svd", format!("d_x <= N (N = {n})"), format!("d_x = {d}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("thin_svd input".into()));
    }
    // columns of Xᵀ, i.e. the rows of X
    let mut cols: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut u: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..d {
            for j in (i + 1)..d {
                let (alpha, beta, gamma) = cols[i].iter().zip(&cols[j]).fold(
                    (0.0, 0.0, 0.0),
                    |(a, b, g), (&xi, &xj)| (a + xi * xi, b + xj * xj, g + xi * xj),
                );
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(j);
                for (a, b) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                    let (ai, bj) = (*a, *b);
                    *a = c * ai - s * bj;
                    *b = s * ai + c * bj;
                }
                let (lo, hi) = u.split_at_mut(j);
                for (a, b) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                    let (ai, bj) = (*a, *b);
                    *a = c * ai - s * bj;
                    *b = s * ai + c * bj;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let smax = order.first().map(|&i| norms[i]).unwrap_or(0.0);
    let null_tol = smax * (n.max(d) as f64) * f64::EPSILON;

    let mut left = Array2::zeros((d, d));
    let mut right = Array2::zeros((n, d));
    let mut singulars = Array1::zeros(d);
    let mut missing = Vec::new();
    for (k, &src) in order.iter().enumerate() {
        for r in 0..d {
            left[[r, k]] = u[src][r];
        }
        if norms[src] > null_tol {
            singulars[k] = norms[src];
            for r in 0..n {
                right[[r, k]] = cols[src][r] / norms[src];
            }
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut right, &missing);

    let signs = canonical_signs(&mut left);
    for (k, s) in signs.iter().enumerate() {
        if *s < 0.0 {
            right.column_mut(k).mapv_inplace(|v| -v);
        }
    }
    Ok(ThinSvd {
        left,
        singulars,
        right,
    })
}

/// Fill the listed columns with unit vectors orthogonal to all other columns.
fn complete_orthonormal(basis: &mut Array2<f64>, missing: &[usize]) {
    let n = basis.nrows();
    let mut filled: Vec<usize> = (0..basis.ncols()).filter(|c| !missing.contains(c)).collect();
    let mut candidate = 0;
    for &k in missing {
        while candidate < n {
            let mut e = Array1::<f64>::zeros(n);
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let col = basis.column(f);
                    let proj = col.dot(&e);
                    e.scaled_add(-proj, &col);
                }
            }
            let norm = e.dot(&e).sqrt();
            if norm > 1e-6 {
                basis.column_mut(k).assign(&(e / norm));
                filled.push(k);
                break;
            }
        }
    }
}

/// `Σ^p` via eigendecomposition.
///
/// For `p < 0` eigenvalues are clamped to `max(λ, floor·λ_max)`; for `p ≥ 0`
/// only tiny negative rounding is clamped to zero. `p = 0` returns an exact
/// identity.
pub fn matrix_power(sigma: &Array2<f64>, p: f64, floor: f64) -> Result<Preconditioner> {
    if !(floor >= 0.0) {
        return Err(LabError::InvalidArgument(format!("eigenvalue floor must be >= 0, got {floor}")));
    }
    if !p.is_finite() {
        return Err(LabError::InvalidArgument(format!("power must be finite, got {p}")));
    }
    let eig = sym_eig(sigma)?;
    let d = sigma.nrows();
    if p == 0.0 {
        return Ok(Preconditioner::identity(d));
    }
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l));
    let lmin = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &l| m.min(l));
    if lmin < -1e-9 * lmax.max(f64::MIN_POSITIVE) {
        return Err(LabError::NotPsd { min_eigenvalue: lmin });
    }
    if p < 0.0 && lmax <= 0.0 {
        return Err(LabError::Singular("negative power of an all-zero covariance".into()));
    }
    let clamp = if p < 0.0 { floor * lmax } else { 0.0 };
    let mut matrix = eig.reconstruct_with(|l| {
        let l = l.max(clamp).max(0.0);
        if l == 0.0 {
            0.0
        } else {
            l.powf(p)
        }
    });
    symmetrize(&mut matrix);
    Ok(Preconditioner {
        matrix,
        power: p,
        floor,
    })
}

fn check_precond(context: &'static str, x: &ArrayView2<f64>, p: &Preconditioner) -> Result<()> {
    if p.dim() != x.nrows() {
        return Err(LabError::dim(context, format!("preconditioner {0}x{0}", x.nrows()), format!("{0}x{0}", p.dim())));
    }
    Ok(())
}

/// `G_P = Xᵀ P X`, symmetrized.
pub fn gram(x: &Array2<f64>, p: &Preconditioner) -> Result<Array2<f64>> {
    check_precond("gram", &x.view(), p)?;
    let mut g = x.t().dot(&p.apply(x));
    symmetrize(&mut g);
    Ok(g)
}

/// `c_P = Xᵀ P x`.
pub fn cross_gram(x: &Array2<f64>, p: &Preconditioner, point: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_precond("cross_gram", &x.view(), p)?;
    if point.len() != x.nrows() {
        return Err(LabError::dim("cross_gram", x.nrows(), point.len()));
    }
    Ok(x.t().dot(&p.matrix.dot(&point)))
}

/// Haar-ish random orthogonal matrix: Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array2<f64> {
    let mut q = Array2::<f64>::from_shape_simple_fn((d, d), || rng.sample(StandardNormal));
    for k in 0..d {
        for _ in 0..2 {
            for j in 0..k {
                let proj = q.column(j).dot(&q.column(k));
                let qj = q.column(j).to_owned();
                q.column_mut(k).scaled_add(-proj, &qj);
            }
        }
        let norm = q.column(k).dot(&q.column(k)).sqrt();
        q.column_mut(k).mapv_inplace(|v| v / norm);
    }
    q
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn relative_frobenius(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    frobenius(&(a - b)) / frobenius(b).max(f64::MIN_POSITIVE)
}
