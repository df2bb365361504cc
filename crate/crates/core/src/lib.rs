pub mod convolution;
pub mod covparam;
pub mod data;
pub mod dist;
pub mod error;
pub mod fit;
pub mod gls;
pub mod integrate;
pub mod lme;
pub mod mcem;
pub mod optim;
pub mod quadrature;
pub mod rng;
pub mod simulate;
pub mod slice;
pub mod special;

pub use convolution::{ConvolutionKind, ConvolutionParams};
pub use covparam::{CovSpec, CovStructure};
pub use data::{Cluster, ClusteredData, ColumnMapping, ModelSpec, ResidualMode};
pub use error::{Error, Result};
pub use fit::{fit, FitMethod, FitResult, Fitter, SeMethod};
pub use mcem::McemConfig;
pub use quadrature::QuadratureFitConfig;
pub use simulate::{run_study, generate_scenario, Scenario, ScenarioSpec, SimReport, StudyOptions};
