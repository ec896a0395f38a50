pub mod datagen;
pub mod error;
pub mod linalg;
pub mod neuralnet;
pub mod oracle;
pub mod repranalysis;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};

/// Double-precision instantiations used by the runner and tests.
pub type Model = neuralnet::ModelState<f64>;
pub type Params = neuralnet::Parameters<f64>;
pub type Optimizer = neuralnet::Adam<f64>;
pub type Reps = repranalysis::RepMatrix<f64>;
pub type Probe = repranalysis::LinearProbe<f64>;
pub type Projector = repranalysis::Projection<f64>;
pub type Inlp = repranalysis::InlpResult<f64>;
pub type Outcome = training::TrainOutcome<f64>;
pub type Dense = linalg::Matrix<f64>;
