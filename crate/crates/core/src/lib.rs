// NaN must fail validation, so bounds are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod report;
pub mod slow;
pub mod stack;
pub mod train;
pub mod world;

pub use autodiff::{Gradients, Graph, Tensor, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, SceneData};
pub use params::{Checkpoint, ParamBuilder, ParamStore, Session};
