//! Unsupervised representation learning for two-channel vehicle acceleration
//! series: a temporal neighborhood contrastive encoder, a GP-prior
//! variational encoder, and the downstream evaluation used to compare them.

pub mod config;
pub mod dlg;
pub mod eval;
pub mod linalg;
pub mod ndtensor;
pub mod nets;
pub mod rng;
pub mod scalar;
pub mod signals;
pub mod stationarity;
pub mod tnc;

pub use config::TrainConfig;
pub use scalar::Scalar;
pub use signals::MultivariateSeries;

/// Autodiff graph over `f64`.
pub type Graph = ndtensor::Graph<f64>;
/// Dense tensor over `f64`.
pub type Tensor = ndtensor::Tensor<f64>;
/// Trained TNC run over `f64`.
pub type TncRun = tnc::TncRun<f64>;
/// Trained DLG run over `f64`.
pub type DlgRun = dlg::DlgRun<f64>;
