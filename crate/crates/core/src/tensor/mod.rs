//! Dense `f64` tensors, a reverse-mode tape, named parameter storage and Adam.

mod adam;
mod array;
mod graph;
pub mod init;
mod params;

pub use adam::{Adam, AdamConfig};
pub use array::Tensor;
pub use graph::{barlow_twins_terms, BarlowTerms, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use params::{ParamGrads, ParamStore};
