//! The per-instance executor.
//!
//! An [`Instance`] owns its status ⟨scope chain, input queue E, active state⟩.
//! A step drains E in FIFO order; each event selects at most one
//! on-transition, whose effects run as cancel, exit, transition actions,
//! entry, while, after which always-transitions are followed until none is
//! enabled. Two enabled transitions for one event is a conflict and halts the
//! instance.

mod class;
mod effects;
mod instance;
mod replay;
pub mod runner;

use thiserror::Error;

use crate::data::DataError;
use crate::events::TransportError;
use crate::expr::EvalError;

pub use class::MachineClass;
pub use effects::{Effects, InvokeRequest, ScriptedEffects, TraceRecord};
pub use instance::{seed_for, Instance, InstanceStatus, MAX_ALWAYS_CHAIN};
pub use replay::{replay, Replay};
pub use runner::{spawn, spawn_on, InboxMessage, InstanceHandle, TimerSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("transition conflict in state `{state}`{}: {count} transitions enabled", .event.as_ref().map(|e| format!(" on `{e}`")).unwrap_or_default())]
    TransitionConflict { state: String, event: Option<String>, count: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("guard `{source_text}`: {error}")]
    Guard { source_text: String, error: EvalError },
    #[error("service invocation failed: {0}")]
    Service(String),
    #[error("unknown timeout `{0}`")]
    UnknownTimeout(String),
    #[error("always-transitions from `{state}` did not settle within {limit} steps")]
    AlwaysLoop { state: String, limit: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("delay `{0}` is not a non-negative number of milliseconds")]
    BadDelay(String),
    #[error("invalid state machine: {0}")]
    Class(String),
    #[error("instance is not alive")]
    NotAlive,
}
