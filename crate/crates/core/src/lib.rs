//! Online test-time adaptation (TTA) methods together with a harness for
//! studying how their hyperparameters can be chosen without target labels.

pub mod augment;
pub mod batch;
pub mod data;
pub mod error;
pub mod exec;
pub mod harness;
pub mod methods;
pub mod metrics;
pub mod model;
pub mod prob;
pub mod report;
pub mod rng;
pub mod selection;
pub mod streams;
pub mod train;

pub use batch::{Batch, LabelAccess};
pub use error::{Error, Result};
pub use model::{AdaptableModel, Architecture, Images, ModelState, NormMode, ParamGroup, ParamScope};
pub use prob::{softmax, ProbabilityVector};
