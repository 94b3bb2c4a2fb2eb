//! Collaborative state machines.
//!
//! A collaborative state machine (CSM) is an application described as a tree of
//! state machines that cooperate through events and shared data. This crate
//! provides every piece needed to run one:
//!
//! - [`csml`]: the JSON description language, its object model and static checks.
//! - [`expr`]: the expression language used for data, guards and service inputs.
//! - [`data`]: local, static and persistent data contexts and scope chains.
//! - [`exec`]: the per-instance step executor.
//! - [`events`]: channel routing between instances (in-process and TCP broker).
//! - [`runtime`]: runtimes hosting instances, job placement and service invocation.
//! - [`metrics`]: the JSON-lines metrics stream.

pub mod csml;
pub mod data;
pub mod events;
pub mod exec;
pub mod expr;
pub mod metrics;
pub mod runtime;
pub mod wire;

pub use csml::{parse_description, resolve_named, validate, CsmDescription, ValidationReport};
pub use expr::{evaluate, parse_expression, Expression, Value};
