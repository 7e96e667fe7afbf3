//! Deep mixtures of linear mixed models for irregularly sampled
//! longitudinal data.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod data;
pub mod dmfa;
pub mod error;
pub mod gmm;
pub mod linalg;
pub mod predict;
pub mod rng;
pub mod scalar;
pub mod simlab;
pub mod vi;

pub use basis::{BasisSpec, DesignMatrix};
pub use data::{LongitudinalDataset, Subject};
pub use dmfa::{DmfaArchitecture, DmfaParams, PriorHyper};
pub use error::{Error, Result};
pub use gmm::{GaussianMixture, KlEstimate, LinearObservationMap};
pub use predict::{PluginParams, PredictiveResult};
pub use scalar::Scalar;
pub use vi::{FitConfig, FitResult, VariationalState};

pub type GaussianMixtureF64 = GaussianMixture<f64>;
pub type GaussianMixtureF32 = GaussianMixture<f32>;
pub type DmfaParamsF64 = DmfaParams<f64>;
pub type DmfaParamsF32 = DmfaParams<f32>;
pub type PluginParamsF64 = PluginParams<f64>;
pub type PredictiveResultF64 = PredictiveResult<f64>;
pub type DesignMatrixF64 = DesignMatrix<f64>;
