//! Interactive training: a training loop that accepts control commands at
//! step boundaries, with branching checkpoints, intervention logging and
//! deterministic replay.

pub mod agent;
pub mod dataset;
pub mod floats;
pub mod hub;
pub mod model;
pub mod par;
pub mod protocol;
pub mod rng;
pub mod schedule;
pub mod state;
pub mod trainer;

pub use hub::Hub;
pub use protocol::{CommandEnvelope, CommandKind, CommandStatus, EventType, TrainingEvent};
pub use trainer::{RunConfig, Trainer, TrainerOptions};
