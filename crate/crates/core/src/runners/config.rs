//! JSON experiment configuration with `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Case, OodSizes, TransferDirection};
use crate::error::{LabError, Result};
use crate::spectra::CovarianceScale;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Robustness,
    Ood,
    Transfer,
    Verify,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Robustness => "robustness",
            ExperimentKind::Ood => "ood",
            ExperimentKind::Transfer => "transfer",
            ExperimentKind::Verify => "verify",
        }
    }
}

/// First-layer preconditioner family swept over `p` in the synthetic studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondKind {
    /// Exact `P = Σ^p` on the first layer.
    CovPower,
    /// Hutchinson diagonal Hessian raised to `p`, applied to all parameters.
    Adahessian,
}

impl PrecondKind {
    pub fn name(self) -> &'static str {
        match self {
            PrecondKind::CovPower => "cov_power",
            PrecondKind::Adahessian => "adahessian",
        }
    }
}

/// How the first-layer init scale is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitNormalization {
    /// Columns `~ N(0, scale² P)`.
    None,
    /// Columns `~ N(0, σ² P)` with σ chosen so the mean squared
    /// pre-activation over the training inputs equals `scale²`.
    Preactivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub scale: f64,
    pub normalization: InitNormalization,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            scale: 0.6,
            normalization: InitNormalization::Preactivation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdahessianConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub hutchinson_samples: usize,
    pub eps: f64,
}

impl Default for AdahessianConfig {
    fn default() -> Self {
        AdahessianConfig {
            beta1: 0.9,
            beta2: 0.999,
            hutchinson_samples: 1,
            eps: 3e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub d_x: usize,
    pub d_h: usize,
    pub lambda: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub covariance_scale: CovarianceScale,
    /// Eigenvalue floor (relative to the largest) for negative powers.
    pub floor: f64,
    pub init: InitConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            d_x: 10,
            d_h: 256,
            lambda: 10.0,
            n_train: 200,
            n_test: 10_000,
            covariance_scale: CovarianceScale::Sum,
            floor: crate::spectra::DEFAULT_FLOOR,
            init: InitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RidgeGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Default for RidgeGrid {
    fn default() -> Self {
        RidgeGrid {
            min: 1e-6,
            max: 1e2,
            points: 9,
        }
    }
}

impl RidgeGrid {
    /// Log-spaced values from `min` to `max` inclusive.
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let (a, b) = (self.min.log10(), self.max.log10());
        (0..self.points)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / (self.points - 1) as f64))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub directions: Vec<TransferDirection>,
    /// SNR of both tasks' labels.
    pub snr: f64,
    pub n_val: usize,
    pub ridge_grid: RidgeGrid,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            directions: vec![TransferDirection::HighToLow, TransferDirection::LowToHigh],
            snr: 1.0,
            n_val: 200,
            ridge_grid: RidgeGrid::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMethod {
    Gd,
    SamGd,
    Adam,
    Adahessian,
}

impl OodMethod {
    pub fn name(self) -> &'static str {
        match self {
            OodMethod::Gd => "gd",
            OodMethod::SamGd => "sam_gd",
            OodMethod::Adam => "adam",
            OodMethod::Adahessian => "adahessian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub sigma_n: f64,
    pub sizes: OodSizes,
    pub d_h: usize,
    pub steps: usize,
    pub methods: Vec<OodMethod>,
    /// Powers swept for the AdaHessian method.
    pub adahessian_p: Vec<f64>,
    pub lr_grid: Vec<f64>,
    pub rho_grid: Vec<f64>,
    /// Seeds used for the hyperparameter search; empty means all seeds.
    pub search_seeds: Vec<u64>,
    pub init_scale: f64,
}

impl Default for OodConfig {
    fn default() -> Self {
        OodConfig {
            images: PathBuf::from("data/mnist/images-idx3-ubyte.gz"),
            labels: PathBuf::from("data/mnist/labels-idx1-ubyte.gz"),
            sigma_n: 0.1,
            sizes: OodSizes {
                train: 2000,
                val: 500,
                test: 2000,
            },
            d_h: 256,
            steps: 3000,
            methods: vec![OodMethod::Gd, OodMethod::SamGd, OodMethod::Adam, OodMethod::Adahessian],
            adahessian_p: vec![1.0, 0.0, -1.0, -2.0],
            lr_grid: vec![1e-3, 1e-2, 1e-1],
            rho_grid: vec![0.01, 0.05, 0.1],
            search_seeds: Vec::new(),
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub p_list: Vec<f64>,
    pub identity_p_list: Vec<f64>,
    pub instances: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            p_list: vec![-2.0, -1.0, -0.5, 0.0],
            identity_p_list: vec![-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0],
            instances: 20,
            steps: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub cases: Vec<Case>,
    pub preconditioners: Vec<PrecondKind>,
    pub p_list: Vec<f64>,
    pub snr_list: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub log_every: usize,
    pub output_dir: PathBuf,
    pub synthetic: SyntheticConfig,
    pub adahessian: AdahessianConfig,
    pub transfer: TransferConfig,
    pub ood: OodConfig,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Robustness,
            cases: vec![Case::High, Case::Low],
            preconditioners: vec![PrecondKind::CovPower, PrecondKind::Adahessian],
            p_list: vec![0.0, -0.5, -1.0, -1.5, -2.0],
            snr_list: vec![5.0, 4.0, 3.0, 2.0, 1.0],
            seeds: (0..10).collect(),
            steps: 10_000,
            lr: 1e-2,
            weight_decay: 1e-6,
            log_every: 50,
            output_dir: PathBuf::from("out"),
            synthetic: SyntheticConfig::default(),
            adahessian: AdahessianConfig::default(),
            transfer: TransferConfig::default(),
            ood: OodConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn for_experiment(kind: ExperimentKind) -> Self {
        let mut cfg = ExperimentConfig {
            experiment: kind,
            ..Default::default()
        };
        if kind == ExperimentKind::Ood {
            cfg.seeds = (0..5).collect();
        }
        if kind == ExperimentKind::Transfer {
            cfg.snr_list = vec![cfg.transfer.snr];
        }
        cfg
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| LabError::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Apply `a.b.c=value` overrides; the value is parsed as JSON and falls
    /// back to a plain string.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut tree = serde_json::to_value(&self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("override `{item}` is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut tree;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| LabError::Config(format!("override key `{key}`: `{part}` is not inside an object")))?;
                if !obj.contains_key(*part) {
                    return Err(LabError::Config(format!("unknown config key `{key}`")));
                }
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*part).unwrap();
            }
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(tree).map_err(|e| LabError::Config(format!("after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LabError::Config(msg.to_string()));
        if self.seeds.is_empty() {
            return bad("`seeds` must not be empty");
        }
        if self.log_every == 0 {
            return bad("`log_every` must be > 0");
        }
        if !(self.lr > 0.0) {
            return bad("`lr` must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("`weight_decay` must be >= 0");
        }
        match self.experiment {
            ExperimentKind::Robustness | ExperimentKind::Transfer => {
                if self.p_list.is_empty() || self.preconditioners.is_empty() {
                    return bad("`p_list` and `preconditioners` must not be empty");
                }
                if self.p_list.iter().any(|p| !p.is_finite()) {
                    return bad("`p_list` entries must be finite");
                }
                if self.synthetic.n_train < 2 || self.synthetic.n_test < 2 {
                    return bad("`synthetic.n_train` and `synthetic.n_test` must be >= 2");
                }
                if !(self.synthetic.init.scale > 0.0) {
                    return bad("`synthetic.init.scale` must be > 0");
                }
            }
            _ => {}
        }
        match self.experiment {
            ExperimentKind::Robustness => {
                if self.cases.is_empty() || self.snr_list.is_empty() {
                    return bad("`cases` and `snr_list` must not be empty");
                }
                if self.snr_list.iter().any(|s| !(*s > 0.0)) {
                    return bad("`snr_list` entries must be > 0");
                }
            }
            ExperimentKind::Transfer => {
                if self.transfer.directions.is_empty() {
                    return bad("`transfer.directions` must not be empty");
                }
                if self.synthetic.d_x % 2 != 0 {
                    return bad("transfer needs an even `synthetic.d_x`");
                }
                if self.transfer.n_val < 2 || self.transfer.ridge_grid.points == 0 {
                    return bad("`transfer.n_val` must be >= 2 and the ridge grid non-empty");
                }
                if !(self.transfer.ridge_grid.min > 0.0 && self.transfer.ridge_grid.max >= self.transfer.ridge_grid.min) {
                    return bad("ridge grid needs 0 < min <= max");
                }
            }
            ExperimentKind::Ood => {
                let o = &self.ood;
                if o.methods.is_empty() || o.lr_grid.is_empty() {
                    return bad("`ood.methods` and `ood.lr_grid` must not be empty");
                }
                if o.methods.contains(&OodMethod::SamGd) && o.rho_grid.is_empty() {
                    return bad("`ood.rho_grid` must not be empty when sam_gd is selected");
                }
                if o.methods.contains(&OodMethod::Adahessian) && o.adahessian_p.is_empty() {
                    return bad("`ood.adahessian_p` must not be empty when adahessian is selected");
                }
                if !(o.sigma_n >= 0.0) || o.sizes.train == 0 || o.sizes.val == 0 || o.sizes.test == 0 {
                    return bad("`ood.sigma_n` must be >= 0 and all split sizes > 0");
                }
                if o.search_seeds.iter().any(|s| !self.seeds.contains(s)) {
                    return bad("`ood.search_seeds` must be a subset of `seeds`");
                }
            }
            ExperimentKind::Verify => {}
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
