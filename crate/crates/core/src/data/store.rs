use std::collections::HashMap;

use parking_lot::RwLock;
use thiserror::Error;

use crate::expr::Value;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("persistent store unavailable: {0}")]
    Unavailable(String),
    #[error("persistent store protocol error: {0}")]
    Protocol(String),
}

/// Globally shared variables. Every operation is atomic per key and a client
/// always reads its own writes.
pub trait PersistentStore: Send + Sync {
    fn get(&self, name: &str) -> Result<Option<Value>, StoreError>;
    fn put(&self, name: &str, value: Value) -> Result<(), StoreError>;
    /// Returns whether the name existed.
    fn delete(&self, name: &str) -> Result<bool, StoreError>;

    /// Whether operations cross a network hop; used to label write metrics.
    fn is_remote(&self) -> bool {
        false
    }
}

/// In-process backend.
#[derive(Default)]
pub struct MemoryStore {
    entries: RwLock<HashMap<String, Value>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PersistentStore for MemoryStore {
    fn get(&self, name: &str) -> Result<Option<Value>, StoreError> {
        Ok(self.entries.read().get(name).cloned())
    }

    fn put(&self, name: &str, value: Value) -> Result<(), StoreError> {
        self.entries.write().insert(name.to_string(), value);
        Ok(())
    }

    fn delete(&self, name: &str) -> Result<bool, StoreError> {
        Ok(self.entries.write().remove(name).is_some())
    }
}
