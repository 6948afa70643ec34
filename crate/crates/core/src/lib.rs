//! Continual learning with parameter-efficient experts on a small vision
//! transformer.

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod l2x;
pub mod peft;
pub mod rng;
pub mod sx;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Gradients, OptimizerState, Tape, Tensor, Var};
pub use harness::run::{JointMode, Method, RunRecord, RunSettings, TrainedState, Variant};
pub use harness::stream::{Scenario, StreamSpec, Task};
pub use peft::{AdapterKind, PeftSpec};
pub use rng::{Seed, StreamId};
pub use sx::SxVariant;
pub use vit::{ViTConfig, ViTParams};
