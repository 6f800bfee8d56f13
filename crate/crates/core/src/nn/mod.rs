//! Minimal neural-network stack: reverse-mode tape, parameters, layers,
//! optimizer, the denoiser/encoder model and its checkpoint format.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;

pub use model::{Architecture, DiffEncModel};
pub use optim::{optimizer_step, AdamConfig};
pub use params::{ParamId, ParamStore, Tensor};
pub use tape::{Gradients, Graph, Var};
