use thiserror::Error;

use super::model::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("unresolved reference `{name}` at {path}")]
    UnresolvedReference { name: String, path: String },
    #[error("cyclic reference through `{name}` at {path}")]
    CyclicReference { name: String, path: String },
}

/// Lexical lookup of named guards and actions: the innermost machine is
/// searched first, then its ancestors towards the root.
pub(crate) struct Scope<'a> {
    machines: Vec<&'a StateMachineDef>,
}

impl<'a> Scope<'a> {
    pub(crate) fn new() -> Self {
        Scope { machines: Vec::new() }
    }

    pub(crate) fn push(&mut self, machine: &'a StateMachineDef) {
        self.machines.push(machine);
    }

    pub(crate) fn pop(&mut self) {
        self.machines.pop();
    }

    /// Returns the guard and the depth of the machine declaring it.
    pub(crate) fn guard(&self, name: &str) -> Option<(&'a GuardDef, usize)> {
        self.machines.iter().enumerate().rev().find_map(|(depth, m)| {
            m.guards.iter().find(|g| g.name.as_deref() == Some(name)).map(|g| (g, depth))
        })
    }

    pub(crate) fn action(&self, name: &str) -> Option<(&'a ActionDef, usize)> {
        self.machines.iter().enumerate().rev().find_map(|(depth, m)| {
            m.actions.iter().find(|a| a.name.as_deref() == Some(name)).map(|a| (a, depth))
        })
    }

    pub(crate) fn machine_at(&self, depth: usize) -> &'a StateMachineDef {
        self.machines[depth]
    }

    pub(crate) fn machines(&self) -> impl Iterator<Item = &'a StateMachineDef> + '_ {
        self.machines.iter().copied()
    }

    fn truncated(&self, depth: usize) -> Scope<'a> {
        Scope { machines: self.machines[..=depth].to_vec() }
    }
}

/// Replace every name reference to a guard or action by the referenced
/// declaration.
pub fn resolve_named(desc: &CsmDescription) -> Result<CsmDescription, ResolveError> {
    let mut out = desc.clone();
    let mut scope = Scope::new();
    for (i, machine) in desc.state_machines.iter().enumerate() {
        out.state_machines[i] = resolve_machine(machine, &mut scope, &desc.name)?;
    }
    Ok(out)
}

fn resolve_machine<'a>(
    machine: &'a StateMachineDef,
    scope: &mut Scope<'a>,
    parent_path: &str,
) -> Result<StateMachineDef, ResolveError> {
    scope.push(machine);
    let path = format!("{parent_path}/{}", machine.name);
    let mut out = machine.clone();
    let mut stack = Vec::new();
    for (i, action) in machine.actions.iter().enumerate() {
        out.actions[i] = resolve_action_def(action, scope, &format!("{path}/actions[{i}]"), &mut stack)?;
    }
    for (i, state) in machine.states.iter().enumerate() {
        let state_path = format!("{path}/{}", state.name);
        let s = &mut out.states[i];
        s.entry = resolve_actions(&state.entry, scope, &format!("{state_path}/entry"))?;
        s.exit = resolve_actions(&state.exit, scope, &format!("{state_path}/exit"))?;
        s.while_actions = resolve_actions(&state.while_actions, scope, &format!("{state_path}/while"))?;
        s.after = resolve_actions(&state.after, scope, &format!("{state_path}/after"))?;
        for (list, key) in [(&mut s.on, "on"), (&mut s.always, "always")] {
            for (j, t) in list.iter_mut().enumerate() {
                let t_path = format!("{state_path}/{key}[{j}]");
                t.guards = t
                    .guards
                    .iter()
                    .map(|g| resolve_guard(g, scope, &t_path).map(GuardRef::Inline))
                    .collect::<Result<_, _>>()?;
                t.actions = resolve_actions(&t.actions, scope, &t_path)?;
            }
        }
    }
    for (i, nested) in machine.nested.iter().enumerate() {
        out.nested[i] = resolve_machine(nested, scope, &path)?;
    }
    scope.pop();
    Ok(out)
}

pub(crate) fn resolve_guard(guard: &GuardRef, scope: &Scope<'_>, path: &str) -> Result<GuardDef, ResolveError> {
    match guard {
        GuardRef::Inline(g) => Ok(g.clone()),
        GuardRef::Named(name) => scope
            .guard(name)
            .map(|(g, _)| g.clone())
            .ok_or_else(|| ResolveError::UnresolvedReference { name: name.clone(), path: path.to_string() }),
    }
}

fn resolve_actions(actions: &[ActionRef], scope: &Scope<'_>, path: &str) -> Result<Vec<ActionRef>, ResolveError> {
    let mut stack = Vec::new();
    actions
        .iter()
        .enumerate()
        .map(|(i, a)| {
            resolve_action(a, scope, &format!("{path}[{i}]"), &mut stack).map(ActionRef::inline)
        })
        .collect()
}

pub(crate) fn resolve_action(
    action: &ActionRef,
    scope: &Scope<'_>,
    path: &str,
    stack: &mut Vec<String>,
) -> Result<ActionDef, ResolveError> {
    match action {
        ActionRef::Inline(def) => resolve_action_def(def, scope, path, stack),
        ActionRef::Named(name) => {
            if stack.contains(name) {
                return Err(ResolveError::CyclicReference { name: name.clone(), path: path.to_string() });
            }
            let (def, depth) = scope
                .action(name)
                .ok_or_else(|| ResolveError::UnresolvedReference { name: name.clone(), path: path.to_string() })?;
            // References inside a named action resolve where it was declared.
            let declaring = scope.truncated(depth);
            stack.push(name.clone());
            let resolved = resolve_action_def(def, &declaring, path, stack);
            stack.pop();
            resolved
        }
    }
}

fn resolve_action_def(
    def: &ActionDef,
    scope: &Scope<'_>,
    path: &str,
    stack: &mut Vec<String>,
) -> Result<ActionDef, ResolveError> {
    let mut out = def.clone();
    match &mut out.kind {
        ActionKind::Timeout { actions, .. } => {
            for (i, a) in actions.iter_mut().enumerate() {
                *a = ActionRef::inline(resolve_action(a, scope, &format!("{path}/actions[{i}]"), stack)?);
            }
        }
        ActionKind::Match { cases, .. } => {
            for (i, c) in cases.iter_mut().enumerate() {
                c.action = ActionRef::inline(resolve_action(&c.action, scope, &format!("{path}/cases[{i}]"), stack)?);
            }
        }
        _ => {}
    }
    Ok(out)
}

/// True when no name reference remains anywhere in the tree.
pub fn is_fully_resolved(desc: &CsmDescription) -> bool {
    fn action_ok(a: &ActionRef) -> bool {
        match a {
            ActionRef::Named(_) => false,
            ActionRef::Inline(def) => def_ok(def),
        }
    }
    fn def_ok(def: &ActionDef) -> bool {
        match &def.kind {
            ActionKind::Timeout { actions, .. } => actions.iter().all(action_ok),
            ActionKind::Match { cases, .. } => cases.iter().all(|c| action_ok(&c.action)),
            _ => true,
        }
    }
    fn machine_ok(m: &StateMachineDef) -> bool {
        m.actions.iter().all(def_ok)
            && m.states.iter().all(|s| {
                [&s.entry, &s.exit, &s.while_actions, &s.after].iter().all(|l| l.iter().all(action_ok))
                    && s.on.iter().chain(&s.always).all(|t| {
                        t.guards.iter().all(|g| matches!(g, GuardRef::Inline(_))) && t.actions.iter().all(action_ok)
                    })
            })
            && m.nested.iter().all(machine_ok)
    }
    desc.state_machines.iter().all(machine_ok)
}
