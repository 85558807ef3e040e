//! Heterogeneous expert encoders, their classifier heads and temporal
//! averages.

mod arch;
mod checkpoint;
mod model;

pub use arch::{ArchitectureSpec, Topology};
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry, CHECKPOINT_FORMAT};
pub use model::{
    build_experts, record_forward, ExpertModel, ForwardOutput, ForwardVars, Head, ParamChoice, ParamSet,
};
