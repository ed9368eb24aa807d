//! Leader-coordinated team training on level-based foraging.

pub mod diff;
pub mod env;
pub mod error;
pub mod mixer;
pub mod net;
pub mod protocol;
pub mod rng;
pub mod trainer;

pub use diff::{ParamStore, Tensor};
pub use env::{Action, EnvConfig, EnvState, Observation};
pub use error::{Error, Result};
pub use net::{HiddenState, InstructionPolicy, NetDims, PolicyOutput, TTrans};
pub use protocol::{Role, RoleAssignment, StepTrace};
pub use trainer::{ModelDims, RunSpec, TrainConfig};
