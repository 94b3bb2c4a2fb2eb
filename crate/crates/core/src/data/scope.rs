use std::collections::BTreeSet;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ContextKind, DataContext, DataError, MemoryStore, PersistentStore};
use crate::csml::{CsmDescription, MemoryMode, StateMachineDef, VariableDecl};
use crate::expr::{evaluate, parse_expression, EvalError, Expression, Resolver, Value};

/// Where a create, assign or delete landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteTarget {
    Context(ContextKind),
    Persistent,
}

/// Declarations of one component, in evaluation order.
#[derive(Debug, Clone, Copy, Default)]
pub struct ComponentData<'a> {
    pub static_data: &'a [VariableDecl],
    pub local_data: &'a [VariableDecl],
    pub persistent_data: &'a [VariableDecl],
}

impl<'a> ComponentData<'a> {
    pub fn of_machine(m: &'a StateMachineDef) -> Self {
        ComponentData { static_data: &[], local_data: &m.local_data, persistent_data: &m.persistent_data }
    }

    pub fn of_state(s: &'a crate::csml::StateDef) -> Self {
        ComponentData { static_data: &s.static_data, local_data: &s.local_data, persistent_data: &s.persistent_data }
    }
}

/// Contexts visible from one component, innermost first. The persistent store
/// is always the outermost link.
#[derive(Clone)]
pub struct ScopeChain {
    frames: Vec<DataContext>,
    store: Arc<dyn PersistentStore>,
    rng: Option<Arc<Mutex<ChaCha8Rng>>>,
}

impl std::fmt::Debug for ScopeChain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScopeChain").field("frames", &self.frames).finish_non_exhaustive()
    }
}

impl ScopeChain {
    pub fn new(store: Arc<dyn PersistentStore>) -> Self {
        ScopeChain { frames: Vec::new(), store, rng: None }
    }

    /// A chain over a fresh in-process store.
    pub fn in_memory() -> Self {
        Self::new(Arc::new(MemoryStore::new()))
    }

    /// Makes `rand()` reproducible.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = Some(Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))));
        self
    }

    pub fn store(&self) -> &Arc<dyn PersistentStore> {
        &self.store
    }

    pub fn frames(&self) -> &[DataContext] {
        &self.frames
    }

    /// Adds an innermost frame.
    pub fn push(&mut self, ctx: DataContext) {
        self.frames.insert(0, ctx);
    }

    /// Removes the innermost frame.
    pub fn pop(&mut self) -> Option<DataContext> {
        (!self.frames.is_empty()).then(|| self.frames.remove(0))
    }

    /// Removes every frame owned by `owner`.
    pub fn leave(&mut self, owner: &str) -> Vec<DataContext> {
        let (gone, kept) = self.frames.drain(..).partition(|f| f.owner() == owner);
        self.frames = kept;
        gone
    }

    pub fn resolve(&self, name: &str) -> Result<Value, DataError> {
        if let Some(v) = self.frames.iter().find_map(|f| f.get(name)) {
            return Ok(v);
        }
        self.store.get(name)?.ok_or_else(|| DataError::OutOfScope(name.to_string()))
    }

    /// Names bound in the chain's frames, without the persistent store.
    pub fn visible_names(&self) -> BTreeSet<String> {
        self.frames.iter().flat_map(|f| f.names()).collect()
    }

    pub fn evaluate(&self, expr: &Expression) -> Result<Value, DataError> {
        evaluate(expr, self).map_err(|error| DataError::Expression { source_text: expr.source.clone(), error })
    }

    pub fn evaluate_source(&self, source: &str) -> Result<Value, DataError> {
        let expr = parse_expression(source)
            .map_err(|error| DataError::Syntax { source_text: source.to_string(), error })?;
        self.evaluate(&expr)
    }

    /// Creates a variable in the innermost local context, or in the store.
    pub fn create_variable(&self, name: &str, value: Value, persistent: bool) -> Result<WriteTarget, DataError> {
        if persistent {
            if self.store.get(name)?.is_some() {
                return Err(DataError::AlreadyExists(name.to_string()));
            }
            self.store.put(name, value)?;
            return Ok(WriteTarget::Persistent);
        }
        let ctx = self
            .frames
            .iter()
            .find(|f| f.kind() == ContextKind::Local)
            .ok_or_else(|| DataError::OutOfScope(name.to_string()))?;
        if ctx.contains(name) {
            return Err(DataError::AlreadyExists(name.to_string()));
        }
        ctx.set(name, value);
        Ok(WriteTarget::Context(ContextKind::Local))
    }

    /// Writes to the context where `name` currently resolves.
    pub fn assign_variable(&self, name: &str, value: Value) -> Result<WriteTarget, DataError> {
        if let Some(ctx) = self.frames.iter().find(|f| f.contains(name)) {
            ctx.set(name, value);
            return Ok(WriteTarget::Context(ctx.kind()));
        }
        if self.store.get(name)?.is_some() {
            self.store.put(name, value)?;
            return Ok(WriteTarget::Persistent);
        }
        Err(DataError::OutOfScope(name.to_string()))
    }

    pub fn delete_variable(&self, name: &str) -> Result<WriteTarget, DataError> {
        if let Some(ctx) = self.frames.iter().find(|f| f.contains(name)) {
            ctx.remove(name);
            return Ok(WriteTarget::Context(ctx.kind()));
        }
        if self.store.delete(name)? {
            return Ok(WriteTarget::Persistent);
        }
        Err(DataError::OutOfScope(name.to_string()))
    }

    /// Evaluates `decls` in order into `ctx`, each seeing the earlier ones.
    /// `ctx` must already be part of the chain.
    fn declare_into(&self, ctx: &DataContext, decls: &[VariableDecl]) -> Result<(), DataError> {
        for d in decls {
            if ctx.contains(&d.name) {
                return Err(DataError::DuplicateName { name: d.name.clone(), owner: ctx.owner().to_string() });
            }
            let v = self.evaluate_source(&d.value)?;
            ctx.set(d.name.clone(), v);
        }
        Ok(())
    }

    fn declare_persistent(&self, owner: &str, decls: &[VariableDecl]) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for d in decls {
            if !seen.insert(&d.name) {
                return Err(DataError::DuplicateName { name: d.name.clone(), owner: owner.to_string() });
            }
            // Another instance may have declared it first; keep that value.
            if self.store.get(&d.name)?.is_none() {
                let v = self.evaluate_source(&d.value)?;
                self.store.put(&d.name, v)?;
            }
        }
        Ok(())
    }

    /// Lexical declaration when `owner` is entered or created: static data
    /// (only when `existing_static` is `None`), then local data, then
    /// persistent data. Returns the static context so the caller can retain it
    /// across re-entries.
    pub fn enter_component(
        &mut self,
        owner: &str,
        data: ComponentData<'_>,
        existing_static: Option<DataContext>,
    ) -> Result<Option<DataContext>, DataError> {
        self.enter_with_locals(owner, data, existing_static, DataContext::new(ContextKind::Local, owner))
    }

    /// As [`enter_component`](Self::enter_component), with a pre-populated
    /// local context. Declarations for names already present are skipped,
    /// so supplied values win.
    pub fn enter_with_locals(
        &mut self,
        owner: &str,
        data: ComponentData<'_>,
        existing_static: Option<DataContext>,
        locals: DataContext,
    ) -> Result<Option<DataContext>, DataError> {
        let statics = match existing_static {
            Some(ctx) => {
                self.push(ctx.clone());
                Some(ctx)
            }
            None if !data.static_data.is_empty() => {
                let ctx = DataContext::new(ContextKind::Static, owner);
                self.push(ctx.clone());
                self.declare_into(&ctx, data.static_data)?;
                Some(ctx)
            }
            None => None,
        };
        let preset: BTreeSet<String> = locals.names().into_iter().collect();
        self.push(locals.clone());
        let fresh: Vec<VariableDecl> = data.local_data.iter().filter(|d| !preset.contains(&d.name)).cloned().collect();
        let mut names = BTreeSet::new();
        for d in data.local_data {
            if !names.insert(&d.name) {
                return Err(DataError::DuplicateName { name: d.name.clone(), owner: owner.to_string() });
            }
        }
        self.declare_into(&locals, &fresh)?;
        self.declare_persistent(owner, data.persistent_data)?;
        Ok(statics)
    }
}

impl Resolver for ScopeChain {
    fn lookup(&self, name: &str) -> Result<Value, EvalError> {
        self.resolve(name).map_err(|e| match e {
            DataError::OutOfScope(n) => EvalError::UnboundVariable(n),
            other => EvalError::Lookup(other.to_string()),
        })
    }

    fn random(&self) -> f64 {
        match &self.rng {
            Some(rng) => rng.lock().gen(),
            None => rand::random(),
        }
    }
}

/// Builds the chain seen from a component addressed by name path from the
/// top-level machine downwards, e.g. `["SM2", "SM21", "Se"]`. Each machine
/// and state on the path is entered in order. In shared mode the root local
/// context is the outermost frame; in distributed mode there is none.
pub fn chain_for_component(
    desc: &CsmDescription,
    path: &[&str],
    store: Arc<dyn PersistentStore>,
) -> Result<ScopeChain, DataError> {
    let mut chain = ScopeChain::new(store);
    if desc.memory_mode == MemoryMode::Shared {
        let root = DataContext::new(ContextKind::Local, desc.name.clone());
        chain.push(root.clone());
        chain.declare_into(&root, &desc.local_data)?;
    }
    chain.declare_persistent(&desc.name, &desc.persistent_data)?;

    let mut owner = desc.name.clone();
    let mut machines: &[StateMachineDef] = &desc.state_machines;
    let mut current: Option<&StateMachineDef> = None;
    for (i, segment) in path.iter().enumerate() {
        owner = format!("{owner}/{segment}");
        if let Some(m) = machines.iter().find(|m| m.name == *segment) {
            chain.enter_component(&owner, ComponentData::of_machine(m), None)?;
            machines = &m.nested;
            current = Some(m);
            continue;
        }
        match current.and_then(|m| m.state(segment)) {
            Some(state) if i + 1 == path.len() => {
                chain.enter_component(&owner, ComponentData::of_state(state), None)?;
            }
            _ => return Err(DataError::UnknownComponent(path[..=i].join("/"))),
        }
    }
    Ok(chain)
}
