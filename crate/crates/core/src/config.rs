//! Flat TOML run configuration.
//!
//! Every key is optional except the domain box and basis resolutions.
//! Unknown keys are rejected. Relative paths are resolved against the
//! directory containing the config file.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::{build_multires, BasisSet, MultiResSpec, DEFAULT_APERTURE_RATIO};
use crate::covariance::{read_matrix, KModel, MaternParams, NoiseParams};
use crate::data::CsvSchema;
use crate::em::{EmConfig, FreeParams, InitRule, NoiseMode};
use crate::engine::SreParams;
use crate::error::{FrkError, Result};
use crate::transgauss::{BoxCox, McConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KForm {
    Unstructured,
    ScaledIdentity,
    Ar1,
    ExpCentroid,
}

/// What the predictions target: the hidden process `Y` or a new noisy `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictTarget {
    Process,
    Observation,
}

fn d_train() -> PathBuf {
    "train.csv".into()
}
fn d_test() -> PathBuf {
    "test.csv".into()
}
fn d_coords() -> Vec<String> {
    vec!["x".into(), "y".into()]
}
fn d_value() -> String {
    "z".into()
}
fn d_truth() -> String {
    "y_true".into()
}
fn d_true() -> bool {
    true
}
fn d_ratio() -> f64 {
    DEFAULT_APERTURE_RATIO
}
fn d_kform() -> KForm {
    KForm::ExpCentroid
}
fn d_one() -> f64 {
    1.0
}
fn d_rho() -> f64 {
    0.5
}
fn d_ls() -> f64 {
    0.2
}
fn d_noise() -> f64 {
    0.1
}
fn d_level() -> f64 {
    0.9
}
fn d_target() -> PredictTarget {
    PredictTarget::Process
}
fn d_n_train() -> usize {
    1000
}
fn d_n_test() -> usize {
    4000
}
fn d_beta() -> Vec<f64> {
    vec![0.0]
}
fn d_range() -> f64 {
    0.2
}
fn d_nu() -> f64 {
    1.5
}
fn d_max_n() -> usize {
    crate::engine::BASELINE_MAX_N
}
fn d_bench_n() -> Vec<usize> {
    vec![1_000, 10_000, 100_000]
}
fn d_dense_max() -> usize {
    2000
}
fn d_repeats() -> usize {
    3
}
fn d_bench_targets() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_train")]
    pub train: PathBuf,
    #[serde(default = "d_test")]
    pub test: PathBuf,
    /// Prediction locations; the test file when absent.
    #[serde(default)]
    pub targets: Option<PathBuf>,
    #[serde(default = "d_coords")]
    pub coords: Vec<String>,
    #[serde(default = "d_value")]
    pub value: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default = "d_true")]
    pub intercept: bool,
    /// Column of the test file scored by `validate`.
    #[serde(default = "d_truth")]
    pub truth: String,

    pub domain_lower: Vec<f64>,
    pub domain_upper: Vec<f64>,
    pub resolutions: Vec<Vec<usize>>,
    #[serde(default = "d_ratio")]
    pub aperture_ratio: f64,

    #[serde(default = "d_kform")]
    pub k_model: KForm,
    #[serde(default = "d_one")]
    pub k_variance: f64,
    #[serde(default = "d_rho")]
    pub k_rho: f64,
    #[serde(default = "d_ls")]
    pub k_length_scale: f64,
    /// Dense matrix file for an unstructured `K`.
    #[serde(default)]
    pub k_file: Option<PathBuf>,
    #[serde(default = "d_noise")]
    pub sigma2_delta: f64,
    #[serde(default = "d_noise")]
    pub sigma2_eps: f64,

    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub loglik_tol: Option<f64>,
    #[serde(default)]
    pub param_tol: Option<f64>,
    #[serde(default)]
    pub init: InitRule,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    #[serde(default = "d_true")]
    pub free_beta: bool,
    #[serde(default = "d_true")]
    pub free_k: bool,
    #[serde(default = "d_true")]
    pub free_delta: bool,
    #[serde(default = "d_true")]
    pub free_eps: bool,

    #[serde(default = "d_level")]
    pub level: f64,
    #[serde(default = "d_target")]
    pub predict_target: PredictTarget,
    #[serde(default)]
    pub seed: u64,

    #[serde(default)]
    pub box_cox_lambda: Option<f64>,
    #[serde(default)]
    pub mc_samples: Option<usize>,

    #[serde(default = "d_n_train")]
    pub sim_n_train: usize,
    #[serde(default = "d_n_test")]
    pub sim_n_test: usize,
    /// Intercept followed by one coefficient per coordinate, as many as given.
    #[serde(default = "d_beta")]
    pub sim_beta: Vec<f64>,

    #[serde(default)]
    pub baseline: bool,
    #[serde(default = "d_one")]
    pub baseline_variance: f64,
    #[serde(default = "d_range")]
    pub baseline_range: f64,
    #[serde(default = "d_nu")]
    pub baseline_nu: f64,
    #[serde(default = "d_noise")]
    pub baseline_sigma2_eps: f64,
    #[serde(default = "d_max_n")]
    pub baseline_max_n: usize,

    #[serde(default = "d_bench_n")]
    pub bench_n: Vec<usize>,
    #[serde(default = "d_dense_max")]
    pub bench_dense_max_n: usize,
    #[serde(default = "d_repeats")]
    pub bench_repeats: usize,
    #[serde(default = "d_bench_targets")]
    pub bench_targets: usize,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| FrkError::Config(e.message().replace('\n', " ")))?;
        for p in [&mut cfg.train, &mut cfg.test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for p in [&mut cfg.targets, &mut cfg.k_file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FrkError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FrkError::Config(m));
        let d = self.coords.len();
        if d == 0 {
            return bad("coords must name at least one column".into());
        }
        if self.domain_lower.len() != d || self.domain_upper.len() != d {
            return bad(format!("domain bounds must have {d} entries to match coords"));
        }
        if self.domain_lower.iter().zip(&self.domain_upper).any(|(a, b)| !(a < b)) {
            return bad("domain_lower must be below domain_upper on every axis".into());
        }
        if self.resolutions.is_empty() || self.resolutions.iter().any(|r| r.len() != d || r.contains(&0)) {
            return bad(format!("resolutions must be nonempty lists of {d} positive counts"));
        }
        if !(self.aperture_ratio > 0.0) {
            return bad("aperture_ratio must be positive".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level {} outside (0,1)", self.level));
        }
        if self.k_model == KForm::Unstructured && self.k_file.is_none() {
            return bad("k_model = \"unstructured\" needs k_file".into());
        }
        if self.sim_beta.len() > d + 1 {
            return bad(format!("sim_beta has at most {} entries", d + 1));
        }
        if self.sim_n_train == 0 || self.sim_n_test == 0 {
            return bad("simulation sizes must be positive".into());
        }
        if self.bench_n.is_empty() || self.bench_repeats == 0 || self.bench_targets == 0 {
            return bad("bench_n, bench_repeats and bench_targets must be nonempty/positive".into());
        }
        self.em_config().validate()?;
        self.template_params()?;
        if let Some(l) = self.box_cox_lambda {
            BoxCox::new(l).map_err(|e| FrkError::Config(e.to_string()))?;
        }
        self.mc_config().validate().map_err(|e| FrkError::Config(e.to_string()))?;
        if self.baseline {
            self.baseline_params()?;
        }
        Ok(())
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            coords: self.coords.clone(),
            value: self.value.clone(),
            covariates: self.covariates.clone(),
            intercept: self.intercept,
        }
    }

    pub fn p(&self) -> usize {
        self.covariates.len() + usize::from(self.intercept)
    }

    pub fn basis_spec(&self) -> MultiResSpec {
        MultiResSpec::new(
            self.domain_lower.clone(),
            self.domain_upper.clone(),
            &self.resolutions,
            self.aperture_ratio,
        )
    }

    pub fn basis(&self) -> Result<BasisSet> {
        build_multires(&self.basis_spec())
    }

    pub fn k_model(&self) -> Result<KModel> {
        let m = match self.k_model {
            KForm::Unstructured => {
                let path = self.k_file.as_ref().expect("validated");
                KModel::Unstructured { k: read_matrix(path)? }
            }
            KForm::ScaledIdentity => KModel::ScaledIdentity {
                variance: self.k_variance,
            },
            KForm::Ar1 => KModel::Ar1PerResolution {
                variance: self.k_variance,
                rho: self.k_rho,
            },
            KForm::ExpCentroid => KModel::ExpCentroid {
                variance: self.k_variance,
                length_scale: self.k_length_scale,
            },
        };
        m.validate().map_err(|e| FrkError::Config(e.to_string()))?;
        Ok(m)
    }

    pub fn noise(&self) -> Result<NoiseParams> {
        NoiseParams::new(self.sigma2_delta, self.sigma2_eps).map_err(|e| FrkError::Config(e.to_string()))
    }

    /// Starting values (and values of fixed parameters) for fitting.
    pub fn template_params(&self) -> Result<SreParams> {
        Ok(SreParams {
            beta: DVector::zeros(self.p()),
            k_model: self.k_model()?,
            noise: self.noise()?,
        })
    }

    /// The generating model used by `simulate`.
    pub fn simulation_params(&self) -> Result<SreParams> {
        Ok(SreParams {
            beta: DVector::from_vec(self.sim_beta.clone()),
            k_model: self.k_model()?,
            noise: self.noise()?,
        })
    }

    pub fn em_config(&self) -> EmConfig {
        let d = EmConfig::default();
        EmConfig {
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            loglik_tol: self.loglik_tol.unwrap_or(d.loglik_tol),
            param_tol: self.param_tol.unwrap_or(d.param_tol),
            init: self.init,
            free: FreeParams {
                beta: self.free_beta,
                k: self.free_k,
                delta: self.free_delta,
                eps: self.free_eps,
            },
            noise_mode: self.noise_mode,
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            samples: self.mc_samples.unwrap_or(McConfig::default().samples),
            seed: self.seed,
            keep_samples: false,
        }
    }

    pub fn baseline_params(&self) -> Result<MaternParams> {
        MaternParams::new(self.baseline_variance, self.baseline_range, self.baseline_nu)
            .map_err(|e| FrkError::Config(e.to_string()))
    }
}
