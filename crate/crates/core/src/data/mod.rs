//! Data contexts and scope chains.
//!
//! Every component (the collaborative state machine, a state machine, a
//! state) may own a local context; states may also own a static context that
//! survives exit and re-entry. Persistent data lives in a [`PersistentStore`]
//! shared by all instances. A [`ScopeChain`] lists the contexts visible from one
//! component, innermost first, with the store consulted last.

mod remote;
mod scope;
mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use thiserror::Error;

use crate::expr::{EvalError, SyntaxError, Value};

pub use remote::{RemoteStore, StoreServer};
pub use scope::{chain_for_component, ComponentData, ScopeChain, WriteTarget};
pub use store::{MemoryStore, PersistentStore, StoreError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("`{0}` is not in scope")]
    OutOfScope(String),
    #[error("`{0}` already exists in the target context")]
    AlreadyExists(String),
    #[error("`{name}` declared twice in {owner}")]
    DuplicateName { name: String, owner: String },
    #[error("evaluating `{source_text}`: {error}")]
    Expression { source_text: String, error: EvalError },
    #[error("parsing `{source_text}`: {error}")]
    Syntax { source_text: String, error: SyntaxError },
    #[error("no component at `{0}`")]
    UnknownComponent(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContextKind {
    Local,
    Static,
    /// Event payload bound while one event is handled.
    Transient,
}

impl fmt::Display for ContextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextKind::Local => "local",
            ContextKind::Static => "static",
            ContextKind::Transient => "transient",
        })
    }
}

/// A named set of variables owned by one component. Clones share entries, so
/// a nested machine can see its parent's live local context.
#[derive(Debug, Clone)]
pub struct DataContext {
    kind: ContextKind,
    owner: String,
    entries: Arc<RwLock<BTreeMap<String, Value>>>,
}

impl DataContext {
    pub fn new(kind: ContextKind, owner: impl Into<String>) -> Self {
        DataContext { kind, owner: owner.into(), entries: Arc::default() }
    }

    pub fn with_entries(kind: ContextKind, owner: impl Into<String>, entries: BTreeMap<String, Value>) -> Self {
        DataContext { kind, owner: owner.into(), entries: Arc::new(RwLock::new(entries)) }
    }

    pub fn kind(&self) -> ContextKind {
        self.kind
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn get(&self, name: &str) -> Option<Value> {
        self.entries.read().get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.read().contains_key(name)
    }

    pub fn set(&self, name: impl Into<String>, value: Value) -> Option<Value> {
        self.entries.write().insert(name.into(), value)
    }

    pub fn remove(&self, name: &str) -> Option<Value> {
        self.entries.write().remove(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.read().keys().cloned().collect()
    }

    pub fn snapshot(&self) -> BTreeMap<String, Value> {
        self.entries.read().clone()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.read().is_empty()
    }

    /// Whether both handles refer to the same entries.
    pub fn same_as(&self, other: &DataContext) -> bool {
        Arc::ptr_eq(&self.entries, &other.entries)
    }
}
