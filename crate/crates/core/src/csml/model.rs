//! The CSML object model.
//!
//! Serialization produces the canonical JSON form accepted by
//! [`parse_description`](super::parse_description); nested state machines are
//! always written under `stateMachines`.

use serde::{Deserialize, Serialize};

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    Distributed,
    Shared,
}

/// Root of a description: the collaborative state machine.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CsmDescription {
    pub name: String,
    pub memory_mode: MemoryMode,
    pub state_machines: Vec<StateMachineDef>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub local_data: Vec<VariableDecl>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub persistent_data: Vec<VariableDecl>,
}

impl CsmDescription {
    /// Finds a top-level or nested machine by name, depth first.
    pub fn find_machine(&self, name: &str) -> Option<&StateMachineDef> {
        fn walk<'a>(machines: &'a [StateMachineDef], name: &str) -> Option<&'a StateMachineDef> {
            machines.iter().find_map(|m| {
                if m.name == name {
                    Some(m)
                } else {
                    walk(&m.nested, name)
                }
            })
        }
        walk(&self.state_machines, name)
    }

    /// Finds a top-level machine by name.
    pub fn top_level_machine(&self, name: &str) -> Option<&StateMachineDef> {
        self.state_machines.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StateMachineDef {
    pub name: String,
    pub states: Vec<StateDef>,
    #[serde(rename = "stateMachines", skip_serializing_if = "Vec::is_empty")]
    pub nested: Vec<StateMachineDef>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub guards: Vec<GuardDef>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<ActionDef>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub local_data: Vec<VariableDecl>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub persistent_data: Vec<VariableDecl>,
}

impl StateMachineDef {
    pub fn state(&self, name: &str) -> Option<&StateDef> {
        self.states.iter().find(|s| s.name == name)
    }

    pub fn initial_state(&self) -> Option<&StateDef> {
        self.states.iter().find(|s| s.initial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StateDef {
    pub name: String,
    #[serde(skip_serializing_if = "is_false")]
    pub initial: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub terminal: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub entry: Vec<ActionRef>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub exit: Vec<ActionRef>,
    #[serde(rename = "while", skip_serializing_if = "Vec::is_empty")]
    pub while_actions: Vec<ActionRef>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub after: Vec<ActionRef>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub on: Vec<TransitionDef>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub always: Vec<TransitionDef>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub static_data: Vec<VariableDecl>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub local_data: Vec<VariableDecl>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub persistent_data: Vec<VariableDecl>,
}

impl StateDef {
    pub fn named(name: impl Into<String>) -> Self {
        StateDef {
            name: name.into(),
            initial: false,
            terminal: false,
            entry: Vec::new(),
            exit: Vec::new(),
            while_actions: Vec::new(),
            after: Vec::new(),
            on: Vec::new(),
            always: Vec::new(),
            static_data: Vec::new(),
            local_data: Vec::new(),
            persistent_data: Vec::new(),
        }
    }
}

/// A transition. Without `target` it is internal: the active state is kept
/// and entry/exit actions are skipped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionDef {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub guards: Vec<GuardRef>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<ActionRef>,
}

impl TransitionDef {
    pub fn is_internal(&self) -> bool {
        self.target.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuardDef {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub expression: String,
}

/// A guard given inline or by the name of a declared guard.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum GuardRef {
    Named(String),
    Inline(GuardDef),
}

/// An action given inline or by the name of a declared action.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ActionRef {
    Named(String),
    Inline(Box<ActionDef>),
}

impl ActionRef {
    pub fn inline(action: ActionDef) -> Self {
        ActionRef::Inline(Box::new(action))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionDef {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub kind: ActionKind,
}

impl ActionDef {
    pub fn anonymous(kind: ActionKind) -> Self {
        ActionDef { name: None, kind }
    }

    pub fn type_name(&self) -> &'static str {
        self.kind.type_name()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type")]
pub enum ActionKind {
    #[serde(rename = "invoke", rename_all = "camelCase")]
    Invoke {
        service_type: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        local: Option<bool>,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        input: Vec<VariableDecl>,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        done: Vec<EventDef>,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        properties: Vec<VariableDecl>,
    },
    #[serde(rename = "create")]
    Create {
        variable: VariableDecl,
        #[serde(skip_serializing_if = "Option::is_none")]
        persistent: Option<bool>,
    },
    #[serde(rename = "assign")]
    Assign { variable: VariableRef, value: String },
    #[serde(rename = "delete")]
    Delete { variable: VariableRef },
    #[serde(rename = "raiseEvent")]
    Raise { event: EventDef },
    #[serde(rename = "timeout")]
    Timeout { delay: String, actions: Vec<ActionRef> },
    #[serde(rename = "resetTimeout")]
    ResetTimeout { action: String },
    #[serde(rename = "match")]
    Match { value: String, cases: Vec<MatchCase> },
}

impl ActionKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            ActionKind::Invoke { .. } => "invoke",
            ActionKind::Create { .. } => "create",
            ActionKind::Assign { .. } => "assign",
            ActionKind::Delete { .. } => "delete",
            ActionKind::Raise { .. } => "raiseEvent",
            ActionKind::Timeout { .. } => "timeout",
            ActionKind::ResetTimeout { .. } => "resetTimeout",
            ActionKind::Match { .. } => "match",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchCase {
    pub case: String,
    pub action: ActionRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventChannel {
    Internal,
    External,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventDef {
    pub name: String,
    pub channel: EventChannel,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub data: Vec<VariableDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VariableDecl {
    pub name: String,
    pub value: String,
}

impl VariableDecl {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Self {
        VariableDecl { name: name.into(), value: value.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VariableRef {
    pub name: String,
}
