//! Dense tensors, tape-based reverse-mode gradients, Adam, and checkpoints.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod rng;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC};
pub use graph::{bce_logit, masked_softmax, sigmoid, Gradients, Graph, ParamStore, Var};
pub use optim::{Adam, AdamConfig};
pub use rng::{derived_rng, gaussian, rng_from_seed, standard_normal, Rng};
pub use tensor::{cosine, normalize_in_place, Real, Tensor};
