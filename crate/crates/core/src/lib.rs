pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod nn;
pub mod node;
#[cfg(test)]
pub(crate) mod oracles;
pub mod params;
pub mod presets;
pub mod routes;
pub mod seed;
pub mod space;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{BufferId, ParamId, ParamStore};
pub use tensor::{Init, Shape, Tensor};
