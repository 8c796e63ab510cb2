//! Fixed rank kriging: spatial prediction with a spatial random effects
//! model whose hidden process is a low-rank basis expansion plus fine-scale
//! variation.
//!
//! Inference goes through an r×r capacitance system, so conditioning on `n`
//! observations costs `O(n r²)` rather than `O(n³)`.

pub mod basis;
pub mod bivariate;
pub mod config;
pub mod covariance;
pub mod data;
pub mod design;
pub mod diagnostics;
pub mod dynamic;
pub mod em;
pub mod engine;
pub mod error;
pub mod noise;
pub mod pipeline;
pub mod simulate;
pub mod transgauss;

pub use basis::{build_multires, design_matrix, tensor_st_basis, BasisFunction, BasisSet, BisquareFn, MultiResSpec};
pub use covariance::{cov_y, k_matrix, matern, psd_check, KModel, MaternParams, NoiseParams};
pub use data::{load_csv, split, CsvSchema, Location, SpatialDataset, SplitSpec, StDataset};
pub use design::DesignMatrix;
pub use em::{e_step, fit_em, m_step, EmConfig, FitResult, NoiseMode};
pub use engine::{log_likelihood, predict, smw_apply, FittedSolve, PredictiveResult, SreParams, Targets};
pub use error::{FrkError, Result};
pub use noise::NoiseCov;
