use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::model::*;
use super::resolve::{resolve_action, resolve_guard, ResolveError, Scope};
use crate::expr::parse_expression;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum DiagnosticCode {
    InitialStateCount,
    DuplicateName,
    UnresolvedGuard,
    UnresolvedAction,
    CyclicReference,
    UnknownTarget,
    TerminalWithTransitions,
    AfterNotTimeout,
    TimeoutNonRaise,
    UnknownTimeout,
    DistributedRootLocalData,
    ExpressionSyntax,
    UnusedDeclaration,
    UnsupportedProtocol,
    MissingImplementation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub code: DiagnosticCode,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}: {}", self.path, self.code, self.message)
    }
}

/// Result of static validation. A description is accepted for execution iff
/// `errors` is empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<Diagnostic>,
    pub warnings: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn has_error(&self, code: DiagnosticCode) -> bool {
        self.errors.iter().any(|d| d.code == code)
    }

    pub(crate) fn error(&mut self, path: impl Into<String>, code: DiagnosticCode, message: impl Into<String>) {
        self.errors.push(Diagnostic { path: path.into(), code, message: message.into() });
    }

    pub(crate) fn warning(&mut self, path: impl Into<String>, code: DiagnosticCode, message: impl Into<String>) {
        self.warnings.push(Diagnostic { path: path.into(), code, message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// Check every structural rule and collect all violations.
pub fn validate(desc: &CsmDescription) -> ValidationReport {
    let mut v = Validator { report: ValidationReport::default(), used_guards: BTreeSet::new(), used_actions: BTreeSet::new() };
    let root = desc.name.clone();
    if desc.memory_mode == MemoryMode::Distributed && !desc.local_data.is_empty() {
        v.report.error(
            format!("{root}/localData"),
            DiagnosticCode::DistributedRootLocalData,
            "the root of a distributed-mode description cannot declare local data",
        );
    }
    v.variables(&desc.local_data, &format!("{root}/localData"));
    v.variables(&desc.persistent_data, &format!("{root}/persistentData"));
    v.unique(desc.state_machines.iter().map(|m| m.name.as_str()), &root, "state machine");
    let mut scope = Scope::new();
    for m in &desc.state_machines {
        v.machine(m, &mut scope, &root);
    }
    v.report
}

struct Validator {
    report: ValidationReport,
    used_guards: BTreeSet<(usize, String)>,
    used_actions: BTreeSet<(usize, String)>,
}

impl Validator {
    fn expression(&mut self, source: &str, path: &str) {
        if let Err(e) = parse_expression(source) {
            self.report.error(path, DiagnosticCode::ExpressionSyntax, format!("`{source}`: {e}"));
        }
    }

    fn variables(&mut self, decls: &[VariableDecl], path: &str) {
        self.unique(decls.iter().map(|d| d.name.as_str()), path, "variable");
        for (i, d) in decls.iter().enumerate() {
            let p = format!("{path}[{i}]");
            if d.name.is_empty() {
                self.report.error(&p, DiagnosticCode::DuplicateName, "variable name must not be empty");
            }
            self.expression(&d.value, &p);
        }
    }

    fn unique<'a>(&mut self, names: impl Iterator<Item = &'a str>, path: &str, what: &str) {
        let mut seen = BTreeSet::new();
        for name in names {
            if !seen.insert(name) {
                self.report.error(path, DiagnosticCode::DuplicateName, format!("duplicate {what} name `{name}`"));
            }
        }
    }

    fn machine<'a>(&mut self, m: &'a StateMachineDef, scope: &mut Scope<'a>, parent: &str) {
        scope.push(m);
        let path = format!("{parent}/{}", m.name);
        let initial = m.states.iter().filter(|s| s.initial).count();
        if initial != 1 {
            self.report.error(
                &path,
                DiagnosticCode::InitialStateCount,
                format!("expected exactly one initial state, found {initial}"),
            );
        }
        self.unique(
            m.states.iter().map(|s| s.name.as_str()).chain(m.nested.iter().map(|n| n.name.as_str())),
            &path,
            "state or nested machine",
        );
        self.unique(m.guards.iter().filter_map(|g| g.name.as_deref()), &format!("{path}/guards"), "guard");
        self.unique(m.actions.iter().filter_map(|a| a.name.as_deref()), &format!("{path}/actions"), "action");
        self.variables(&m.local_data, &format!("{path}/localData"));
        self.variables(&m.persistent_data, &format!("{path}/persistentData"));
        for (i, g) in m.guards.iter().enumerate() {
            self.expression(&g.expression, &format!("{path}/guards[{i}]"));
        }

        let timeouts = timeout_names(m, scope);
        for (i, a) in m.actions.iter().enumerate() {
            self.action(&ActionRef::inline(a.clone()), scope, &format!("{path}/actions[{i}]"), &timeouts, false);
        }
        for s in &m.states {
            self.state(m, s, scope, &path, &timeouts);
        }
        for nested in &m.nested {
            self.machine(nested, scope, &path);
        }
        let key = m as *const StateMachineDef as usize;
        for g in m.guards.iter().filter_map(|g| g.name.as_ref()) {
            if !self.used_guards.contains(&(key, g.clone())) {
                self.report.warning(format!("{path}/guards"), DiagnosticCode::UnusedDeclaration, format!("guard `{g}` is never referenced"));
            }
        }
        for a in m.actions.iter().filter_map(|a| a.name.as_ref()) {
            let is_timeout = m.actions.iter().any(|d| d.name.as_ref() == Some(a) && matches!(d.kind, ActionKind::Timeout { .. }));
            if !is_timeout && !self.used_actions.contains(&(key, a.clone())) {
                self.report.warning(format!("{path}/actions"), DiagnosticCode::UnusedDeclaration, format!("action `{a}` is never referenced"));
            }
        }
        scope.pop();
    }

    fn state(&mut self, m: &StateMachineDef, s: &StateDef, scope: &Scope<'_>, parent: &str, timeouts: &BTreeSet<String>) {
        let path = format!("{parent}/{}", s.name);
        if s.terminal && !(s.on.is_empty() && s.always.is_empty()) {
            self.report.error(&path, DiagnosticCode::TerminalWithTransitions, "a terminal state declares no outgoing transitions");
        }
        self.variables(&s.static_data, &format!("{path}/staticData"));
        self.variables(&s.local_data, &format!("{path}/localData"));
        self.variables(&s.persistent_data, &format!("{path}/persistentData"));
        for (key, list) in [("entry", &s.entry), ("exit", &s.exit), ("while", &s.while_actions)] {
            for (i, a) in list.iter().enumerate() {
                self.action(a, scope, &format!("{path}/{key}[{i}]"), timeouts, false);
            }
        }
        for (i, a) in s.after.iter().enumerate() {
            self.action(a, scope, &format!("{path}/after[{i}]"), timeouts, true);
        }
        for (key, list) in [("on", &s.on), ("always", &s.always)] {
            for (i, t) in list.iter().enumerate() {
                let t_path = format!("{path}/{key}[{i}]");
                if let Some(target) = &t.target {
                    if m.state(target).is_none() {
                        self.report.error(
                            &t_path,
                            DiagnosticCode::UnknownTarget,
                            format!("target `{target}` is not a state of `{}`", m.name),
                        );
                    }
                }
                for g in &t.guards {
                    if let GuardRef::Named(name) = g {
                        if let Some((_, depth)) = scope.guard(name) {
                            self.used_guards.insert((owner_key(scope, depth), name.clone()));
                        }
                    }
                    match resolve_guard(g, scope, &t_path) {
                        Ok(def) => self.expression(&def.expression, &t_path),
                        Err(e) => self.report.error(&t_path, DiagnosticCode::UnresolvedGuard, e.to_string()),
                    }
                }
                for (j, a) in t.actions.iter().enumerate() {
                    self.action(a, scope, &format!("{t_path}/actions[{j}]"), timeouts, false);
                }
            }
        }
    }

    fn action(&mut self, a: &ActionRef, scope: &Scope<'_>, path: &str, timeouts: &BTreeSet<String>, in_after: bool) {
        if let ActionRef::Named(name) = a {
            if let Some((_, depth)) = scope.action(name) {
                self.used_actions.insert((owner_key(scope, depth), name.clone()));
            }
        }
        let def = match resolve_action(a, scope, path, &mut Vec::new()) {
            Ok(def) => def,
            Err(e @ ResolveError::CyclicReference { .. }) => {
                self.report.error(path, DiagnosticCode::CyclicReference, e.to_string());
                return;
            }
            Err(e) => {
                self.report.error(path, DiagnosticCode::UnresolvedAction, e.to_string());
                return;
            }
        };
        if in_after && !matches!(def.kind, ActionKind::Timeout { .. }) {
            self.report.error(
                path,
                DiagnosticCode::AfterNotTimeout,
                format!("`after` accepts timeout actions only, found {}", def.type_name()),
            );
        }
        self.action_def(&def, path, timeouts);
    }

    fn action_def(&mut self, def: &ActionDef, path: &str, timeouts: &BTreeSet<String>) {
        match &def.kind {
            ActionKind::Invoke { input, done, properties, .. } => {
                self.variables(input, &format!("{path}/input"));
                self.variables(properties, &format!("{path}/properties"));
                for (i, e) in done.iter().enumerate() {
                    self.variables(&e.data, &format!("{path}/done[{i}]/data"));
                }
            }
            ActionKind::Create { variable, .. } => self.variables(std::slice::from_ref(variable), path),
            ActionKind::Assign { value, .. } => self.expression(value, path),
            ActionKind::Delete { .. } => {}
            ActionKind::Raise { event } => self.variables(&event.data, &format!("{path}/event/data")),
            ActionKind::Timeout { delay, actions } => {
                self.expression(delay, &format!("{path}/delay"));
                for (i, a) in actions.iter().enumerate() {
                    let p = format!("{path}/actions[{i}]");
                    match a {
                        ActionRef::Inline(inner) => {
                            if !matches!(inner.kind, ActionKind::Raise { .. }) {
                                self.report.error(
                                    &p,
                                    DiagnosticCode::TimeoutNonRaise,
                                    format!("timeout actions must be raise actions, found {}", inner.type_name()),
                                );
                            }
                            self.action_def(inner, &p, timeouts);
                        }
                        ActionRef::Named(_) => {}
                    }
                }
            }
            ActionKind::ResetTimeout { action } => {
                if !timeouts.contains(action) {
                    self.report.error(
                        path,
                        DiagnosticCode::UnknownTimeout,
                        format!("`{action}` does not name a timeout action"),
                    );
                }
            }
            ActionKind::Match { value, cases } => {
                self.expression(value, &format!("{path}/value"));
                for (i, c) in cases.iter().enumerate() {
                    let p = format!("{path}/cases[{i}]");
                    self.expression(&c.case, &p);
                    if let ActionRef::Inline(inner) = &c.action {
                        self.action_def(inner, &p, timeouts);
                    }
                }
            }
        }
    }
}

fn owner_key(scope: &Scope<'_>, depth: usize) -> usize {
    scope.machine_at(depth) as *const StateMachineDef as usize
}

/// Names of all named timeout actions visible from `m`: inline named timeouts
/// anywhere in the machine's states plus named timeout declarations in the
/// machine and its ancestors.
fn timeout_names(m: &StateMachineDef, scope: &Scope<'_>) -> BTreeSet<String> {
    fn collect(a: &ActionRef, out: &mut BTreeSet<String>) {
        if let ActionRef::Inline(def) = a {
            match &def.kind {
                ActionKind::Timeout { .. } => {
                    if let Some(n) = &def.name {
                        out.insert(n.clone());
                    }
                }
                ActionKind::Match { cases, .. } => cases.iter().for_each(|c| collect(&c.action, out)),
                _ => {}
            }
        }
    }
    let mut out = BTreeSet::new();
    for s in &m.states {
        for a in s.entry.iter().chain(&s.exit).chain(&s.while_actions).chain(&s.after) {
            collect(a, &mut out);
        }
        for t in s.on.iter().chain(&s.always) {
            t.actions.iter().for_each(|a| collect(a, &mut out));
        }
    }
    for machine in scope.machines() {
        for a in &machine.actions {
            collect(&ActionRef::inline(a.clone()), &mut out);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csml::parse_description;

    fn report(text: &str) -> ValidationReport {
        validate(&parse_description(text).unwrap())
    }

    fn wrap(machine: &str) -> String {
        format!(r#"{{"name":"CSM","memoryMode":"shared","stateMachines":[{machine}]}}"#)
    }

    #[test]
    fn two_initial_states() {
        let r = report(&wrap(r#"{"name":"A","states":[{"name":"a","initial":true},{"name":"b","initial":true}]}"#));
        assert!(r.has_error(DiagnosticCode::InitialStateCount), "{r}");
        let r = report(&wrap(r#"{"name":"A","states":[{"name":"a"}]}"#));
        assert!(r.has_error(DiagnosticCode::InitialStateCount), "{r}");
    }

    #[test]
    fn named_guard_reference_is_accepted() {
        let r = report(&wrap(
            r#"{"name":"SM2","guards":[{"name":"guardA","expression":"b < 100"}],
                "localData":[{"name":"b","value":"[1, 2, 3]"}],
                "states":[{"name":"Sc","initial":true,"on":[{"event":"e","target":"Sd","guards":["guardA"]}]},{"name":"Sd"}]}"#,
        ));
        assert!(r.is_ok(), "{r}");
        assert!(r.warnings.is_empty(), "{r}");
    }

    #[test]
    fn distributed_root_local_data() {
        let r = report(
            r#"{"name":"CSM","memoryMode":"distributed","localData":[{"name":"x","value":"1"}],
                "stateMachines":[{"name":"A","states":[{"name":"a","initial":true}]}]}"#,
        );
        assert!(r.has_error(DiagnosticCode::DistributedRootLocalData), "{r}");
    }

    #[test]
    fn structural_errors_are_all_reported() {
        let r = report(&wrap(
            r#"{"name":"A","states":[
                {"name":"a","initial":true,
                 "on":[{"event":"e","target":"nowhere","guards":["missing"]}],
                 "entry":["noSuchAction",{"type":"resetTimeout","action":"tick"},{"type":"assign","variable":{"name":"x"},"value":"1 +"}],
                 "after":[{"type":"raiseEvent","event":{"name":"x","channel":"internal"}}]},
                {"name":"a","terminal":true,"always":[{"target":"a"}]},
                {"name":"t","after":[{"type":"timeout","name":"tock","delay":"10","actions":[{"type":"delete","variable":{"name":"x"}}]}]}
            ]}"#,
        ));
        for code in [
            DiagnosticCode::UnknownTarget,
            DiagnosticCode::UnresolvedGuard,
            DiagnosticCode::UnresolvedAction,
            DiagnosticCode::UnknownTimeout,
            DiagnosticCode::ExpressionSyntax,
            DiagnosticCode::AfterNotTimeout,
            DiagnosticCode::DuplicateName,
            DiagnosticCode::TerminalWithTransitions,
            DiagnosticCode::TimeoutNonRaise,
        ] {
            assert!(r.has_error(code), "missing {code:?} in\n{r}");
        }
    }

    #[test]
    fn reset_of_declared_timeout_is_fine() {
        let r = report(&wrap(
            r#"{"name":"A","states":[{"name":"a","initial":true,
                "after":[{"type":"timeout","name":"tick","delay":"1000","actions":[{"type":"raiseEvent","event":{"name":"t","channel":"internal"}}]}],
                "on":[{"event":"t","actions":[{"type":"resetTimeout","action":"tick"}]}]}]}"#,
        ));
        assert!(r.is_ok(), "{r}");
    }

    #[test]
    fn validation_is_pure() {
        let desc = parse_description(&wrap(r#"{"name":"A","states":[{"name":"a"},{"name":"a"}]}"#)).unwrap();
        assert_eq!(validate(&desc), validate(&desc));
    }
}
