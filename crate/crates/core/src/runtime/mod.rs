//! Runtimes, job placement and service invocation.
//!
//! A [`Runtime`] hosts state machine instances and wires them to an event
//! transport, a persistent store, service implementations and a metrics
//! sink. A [`Coordinator`] places [`Job`]s on runtimes: every runtime bids,
//! the least-loaded eligible one is awarded the job and starts the instance
//! with its nested machines.

mod control;
mod coordinator;
mod host;
mod job;
mod select;
mod service;

use thiserror::Error;

use crate::events::TransportError;
use crate::exec::ExecError;

pub use control::ControlServer;
pub use coordinator::{join_coordinator, submit_remote, Coordinator, CoordinatorLink, CoordinatorServer, LocalNode, Node, Receipt};
pub use host::{Bid, Runtime, RuntimeConfig};
pub use job::{Job, Protocol, ServiceImplementationDescription};
pub use select::{evaluate_eligibility, select_implementation, select_runtime};
pub use service::{invoke_service, Invocation, ServiceClient, StubServices, DEFAULT_INVOKE_TIMEOUT};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("no eligible runtime for {0}")]
    NoEligibleRuntime(String),
    #[error("validation failed:\n{0}")]
    ValidationFailed(String),
    #[error("no implementation for service type `{0}`")]
    NoImplementation(String),
    #[error("no local implementation for service type `{0}`")]
    NoLocalImplementation(String),
    #[error("unsupported protocol {0}")]
    UnsupportedProtocol(String),
    #[error("service at {endpoint} unreachable: {cause}")]
    ServiceUnreachable { endpoint: String, cause: String },
    #[error("service answered {status}: {body}")]
    ServiceError { status: u16, body: String },
    #[error("service at {0} timed out")]
    Timeout(String),
    #[error("instance `{0}` already exists")]
    DuplicateInstance(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("coordinator: {0}")]
    Coordinator(String),
}
