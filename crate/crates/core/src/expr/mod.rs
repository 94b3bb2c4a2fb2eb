//! The expression language.
//!
//! A small, side-effect free language for data values, guards, service inputs
//! and event payloads: literals, variable references, arithmetic, comparison
//! and boolean operators, list literals, member access, the list macros
//! `map`, `filter`, `contains` and `exists_one`, plus `size()` and `rand()`.

pub mod ast;
mod eval;
mod parser;
mod value;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use eval::{evaluate, evaluate_guard, evaluate_guards};
pub use parser::parse_expression;
pub use value::{Value, BYTES_TAG};

/// A parsed expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    pub source: String,
    pub root: ast::Expr,
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("expression syntax error at offset {position}: expected {expected}")]
pub struct SyntaxError {
    pub position: usize,
    pub expected: String,
}

impl SyntaxError {
    pub(crate) fn new(position: usize, expected: impl Into<String>) -> Self {
        SyntaxError { position, expected: expected.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("type mismatch for `{op}`: got {got}")]
    TypeMismatch { op: String, got: String },
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow in `{0}`")]
    Overflow(String),
    #[error("no key `{0}` in map")]
    NoSuchKey(String),
    #[error("guard `{0}` did not evaluate to a boolean")]
    GuardNotBoolean(String),
    #[error("variable lookup failed: {0}")]
    Lookup(String),
}

/// Name resolution seen by the evaluator.
pub trait Resolver {
    /// Returns the innermost binding of `name`. A missing name is an error.
    fn lookup(&self, name: &str) -> Result<Value, EvalError>;

    /// Source for `rand()`, uniform in `[0, 1)`.
    fn random(&self) -> f64 {
        rand::random()
    }
}

type StoreView = Box<dyn Fn(&str) -> Option<Value>>;

/// A plain chain of frames, innermost first, with an optional persistent-store
/// view consulted after every frame.
#[derive(Default)]
pub struct Environment {
    frames: Vec<BTreeMap<String, Value>>,
    store: Option<StoreView>,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl Environment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<K: Into<String>>(pairs: impl IntoIterator<Item = (K, Value)>) -> Self {
        let mut env = Self::new();
        env.push_frame(pairs.into_iter().map(|(k, v)| (k.into(), v)).collect());
        env
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    pub fn with_store(mut self, view: impl Fn(&str) -> Option<Value> + 'static) -> Self {
        self.store = Some(Box::new(view));
        self
    }

    /// Push a new innermost frame.
    pub fn push_frame(&mut self, frame: BTreeMap<String, Value>) {
        self.frames.insert(0, frame);
    }

    pub fn pop_frame(&mut self) -> Option<BTreeMap<String, Value>> {
        if self.frames.is_empty() {
            None
        } else {
            Some(self.frames.remove(0))
        }
    }
}

impl Resolver for Environment {
    fn lookup(&self, name: &str) -> Result<Value, EvalError> {
        self.frames
            .iter()
            .find_map(|f| f.get(name).cloned())
            .or_else(|| self.store.as_ref().and_then(|s| s(name)))
            .ok_or_else(|| EvalError::UnboundVariable(name.to_string()))
    }

    fn random(&self) -> f64 {
        match &self.rng {
            Some(rng) => rng.borrow_mut().gen(),
            None => rand::random(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn innermost_frame_wins_then_store() {
        let mut env = Environment::from_pairs([("a", Value::Int(1)), ("b", Value::Int(2))])
            .with_store(|n| (n == "p").then_some(Value::Int(25)));
        env.push_frame([("a".to_string(), Value::Int(10))].into());
        assert_eq!(env.lookup("a"), Ok(Value::Int(10)));
        assert_eq!(env.lookup("b"), Ok(Value::Int(2)));
        assert_eq!(env.lookup("p"), Ok(Value::Int(25)));
        assert_eq!(env.lookup("q"), Err(EvalError::UnboundVariable("q".into())));
        env.pop_frame();
        assert_eq!(env.lookup("a"), Ok(Value::Int(1)));
    }
}
