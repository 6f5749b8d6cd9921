//! Hierarchical Bayesian active causal learning on blicket tasks.
//!
//! The crate keeps an exact joint belief over causal structures (which
//! blocks are blickets) and sigmoid functional forms (how the machine turns a
//! blicket count into an activation probability), chooses interventions by
//! expected information gain, carries the form marginal from task to task,
//! and scores model variants against intervention logs.

pub mod agents;
pub mod blocks;
pub mod error;
pub mod evaluation;
pub mod forms;
pub mod inference;
pub mod io;
pub mod log;
pub mod policy;
pub mod tasks;

pub use agents::{AgentSpec, AgentState, ModelKind};
pub use blocks::BlockSet;
pub use error::{Error, Result};
pub use forms::{CanonicalForm, FormGrid, FormPrior, GammaParams, PriorSpec, SigmoidForm};
pub use inference::{Event, JointBelief};
pub use policy::{EigTable, PolicyParams, Target};
pub use tasks::{Condition, Experiment, TaskConfig, TaskRole};
