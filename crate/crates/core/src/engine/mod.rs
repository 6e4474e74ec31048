//! Minimal dense-tensor library with reverse-mode automatic
//! differentiation, sized for training and attacking small CNNs on CPU.

mod error;
mod gradcheck;
pub mod linalg;
mod optim;
mod tape;
mod tensor;

pub use error::EngineError;
pub use gradcheck::{finite_difference_check, FdCheckConfig};
pub use optim::Sgd;
pub use tape::{BnStats, Gradients, NodeId, Tape};
pub use tensor::{Parameter, Tensor};
