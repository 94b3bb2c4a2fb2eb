use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use crate::csml::{
    resolve_named, ActionDef, ActionKind, ActionRef, CsmDescription, GuardRef, MemoryMode, StateDef, StateMachineDef,
};
use crate::expr::{parse_expression, Expression};

use super::ExecError;

/// A state machine ready to instantiate: names resolved, every expression
/// parsed once.
#[derive(Debug)]
pub struct MachineClass {
    pub name: String,
    /// Component path, e.g. `CSM/SM2/SM21`; owner of the machine's frames.
    pub path: String,
    pub def: StateMachineDef,
    pub memory_mode: MemoryMode,
    pub nested: Vec<Arc<MachineClass>>,
    expressions: HashMap<String, Expression>,
    timeouts: BTreeSet<String>,
}

impl MachineClass {
    /// Compiles the machine named `machine` (top-level or nested) of `desc`.
    pub fn compile(desc: &CsmDescription, machine: &str) -> Result<Arc<MachineClass>, ExecError> {
        let resolved = resolve_named(desc).map_err(|e| ExecError::Class(e.to_string()))?;
        fn find<'a>(ms: &'a [StateMachineDef], name: &str, parent: &str) -> Option<(&'a StateMachineDef, String)> {
            ms.iter().find_map(|m| {
                let path = format!("{parent}/{}", m.name);
                if m.name == name {
                    Some((m, path))
                } else {
                    find(&m.nested, name, &path)
                }
            })
        }
        let (def, path) = find(&resolved.state_machines, machine, &resolved.name)
            .ok_or_else(|| ExecError::Class(format!("no state machine named `{machine}`")))?;
        Self::build(def, path, resolved.memory_mode)
    }

    fn build(def: &StateMachineDef, path: String, mode: MemoryMode) -> Result<Arc<MachineClass>, ExecError> {
        if def.initial_state().is_none() {
            return Err(ExecError::Class(format!("{path} has no initial state")));
        }
        let mut sources = Vec::new();
        let mut timeouts = BTreeSet::new();
        collect_machine(def, &mut sources, &mut timeouts);
        let mut expressions = HashMap::new();
        for src in sources {
            if !expressions.contains_key(&src) {
                let e = parse_expression(&src).map_err(|e| ExecError::Class(format!("`{src}`: {e}")))?;
                expressions.insert(src, e);
            }
        }
        let nested = def
            .nested
            .iter()
            .map(|n| Self::build(n, format!("{path}/{}", n.name), mode))
            .collect::<Result<_, _>>()?;
        Ok(Arc::new(MachineClass {
            name: def.name.clone(),
            path,
            def: def.clone(),
            memory_mode: mode,
            nested,
            expressions,
            timeouts,
        }))
    }

    pub fn state(&self, name: &str) -> Option<&StateDef> {
        self.def.state(name)
    }

    pub fn initial_state(&self) -> &StateDef {
        self.def.initial_state().expect("checked at compile time")
    }

    /// Parsed form of an expression appearing in the machine.
    pub fn expression(&self, source: &str) -> Result<std::borrow::Cow<'_, Expression>, ExecError> {
        match self.expressions.get(source) {
            Some(e) => Ok(std::borrow::Cow::Borrowed(e)),
            None => parse_expression(source)
                .map(std::borrow::Cow::Owned)
                .map_err(|e| ExecError::Class(format!("`{source}`: {e}"))),
        }
    }

    pub fn declares_timeout(&self, name: &str) -> bool {
        self.timeouts.contains(name)
    }

    /// Owner path of a state's frames.
    pub fn state_path(&self, state: &str) -> String {
        format!("{}/{state}", self.path)
    }
}

fn collect_machine(m: &StateMachineDef, out: &mut Vec<String>, timeouts: &mut BTreeSet<String>) {
    out.extend(m.local_data.iter().chain(&m.persistent_data).map(|d| d.value.clone()));
    for s in &m.states {
        out.extend(s.static_data.iter().chain(&s.local_data).chain(&s.persistent_data).map(|d| d.value.clone()));
        for a in s.entry.iter().chain(&s.exit).chain(&s.while_actions).chain(&s.after) {
            collect_action(a, out, timeouts);
        }
        for t in s.on.iter().chain(&s.always) {
            for g in &t.guards {
                if let GuardRef::Inline(g) = g {
                    out.push(g.expression.clone());
                }
            }
            for a in &t.actions {
                collect_action(a, out, timeouts);
            }
        }
    }
}

fn collect_action(a: &ActionRef, out: &mut Vec<String>, timeouts: &mut BTreeSet<String>) {
    if let ActionRef::Inline(def) = a {
        collect_def(def, out, timeouts);
    }
}

fn collect_def(def: &ActionDef, out: &mut Vec<String>, timeouts: &mut BTreeSet<String>) {
    match &def.kind {
        ActionKind::Invoke { input, done, properties, .. } => {
            out.extend(input.iter().chain(properties).map(|d| d.value.clone()));
            out.extend(done.iter().flat_map(|e| e.data.iter().map(|d| d.value.clone())));
        }
        ActionKind::Create { variable, .. } => out.push(variable.value.clone()),
        ActionKind::Assign { value, .. } => out.push(value.clone()),
        ActionKind::Delete { .. } | ActionKind::ResetTimeout { .. } => {}
        ActionKind::Raise { event } => out.extend(event.data.iter().map(|d| d.value.clone())),
        ActionKind::Timeout { delay, actions } => {
            if let Some(n) = &def.name {
                timeouts.insert(n.clone());
            }
            out.push(delay.clone());
            actions.iter().for_each(|a| collect_action(a, out, timeouts));
        }
        ActionKind::Match { value, cases } => {
            out.push(value.clone());
            for c in cases {
                out.push(c.case.clone());
                collect_action(&c.action, out, timeouts);
            }
        }
    }
}
