//! Policy iteration for optimal stationary control of continuous-time linear
//! stochastic systems, model-based and from sampled data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod error;
pub mod linalg;
pub mod model;
pub mod solvers;
pub mod sim;
pub mod learning;
pub mod bench;

pub use error::{Error, Result};
pub use linalg::{smat, svec, SymVec};
pub use model::{CostWeights, GMatrix, PolicyGain, SystemModel, ThetaMatrix, ValueMatrix};
