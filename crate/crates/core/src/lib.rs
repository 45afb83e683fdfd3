//! Empowerment maximization with implicit variational intrinsic control.
//!
//! The crate trains agents that maximize the mutual information between an
//! option (a complete trajectory ending in a termination action) and its
//! final state. Three learners are provided: plain implicit VIC, a variant
//! that corrects its transition bias with softmax transition models, and a
//! variant that models Gaussian-smoothed transitions with mixture heads.
//! The [`oracle`] module computes every quantity exactly by enumeration on
//! small worlds and is used to check the learners.

pub mod agents;
pub mod envs;
pub mod error;
pub mod harness;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use agents::{AgentBundle, Algo, RewardBreakdown, TrainConfig};
pub use envs::{Action, StateId, Trajectory, WorldName, WorldSpec};
pub use error::{Error, Result};
pub use harness::{EmpowermentEstimator, FinalReport, RunRecord};
pub use oracle::{ExactAnalysis, TabularPolicy};
pub use tensor::{Graph, NodeId, ParamBlock, ParamStore};
