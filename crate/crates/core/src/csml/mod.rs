//! The CSML description language: object model, JSON parsing, static
//! validation and resolution of named guards and actions.

mod model;
mod parse;
mod resolve;
mod validate;

pub use model::*;
pub use parse::{description_from_json, parse_description, ParseError};
pub use resolve::{is_fully_resolved, resolve_named, ResolveError};
pub use validate::{validate, Diagnostic, DiagnosticCode, ValidationReport};
