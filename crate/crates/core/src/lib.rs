pub mod autodiff;
pub mod cvgae;
pub mod error;
pub mod evalharness;
pub mod explainers;
pub mod frontdoor;
pub mod graph;
pub mod nn;
pub mod predictor;
pub mod seeds;
pub mod tr3;

pub use error::{DseError, Result};
pub use graph::{induce_subgraph, top_fraction_mask, Edge, EdgeMask, Graph};
