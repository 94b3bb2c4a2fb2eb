use serde_json::{Map, Value as Json};
use thiserror::Error;

use super::model::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("invalid JSON: {0}")]
    JsonSyntax(String),
    #[error("unknown keyword at {path}")]
    UnknownKeyword { path: String },
    #[error("missing required {path}")]
    MissingRequired { path: String },
    #[error("wrong type at {path}: expected {expected}")]
    WrongType { path: String, expected: String },
}

type Result<T> = std::result::Result<T, ParseError>;

/// Parse a CSML document. Unknown keywords are rejected and defaults are
/// applied (`initial` and `terminal` false, `local` absent).
pub fn parse_description(text: &str) -> Result<CsmDescription> {
    let json: Json = serde_json::from_str(text).map_err(|e| ParseError::JsonSyntax(e.to_string()))?;
    description_from_json(&json)
}

/// Same as [`parse_description`] for an already decoded JSON document.
pub fn description_from_json(json: &Json) -> Result<CsmDescription> {
    let obj = Obj::new(json, "", &["name", "memoryMode", "stateMachines", "localData", "persistentData"])?;
    let memory_mode = match obj.req_str("memoryMode")? {
        "distributed" => MemoryMode::Distributed,
        "shared" => MemoryMode::Shared,
        _ => return Err(obj.wrong("memoryMode", "\"distributed\" or \"shared\"")),
    };
    let state_machines = obj.req_list("stateMachines", state_machine)?;
    if state_machines.is_empty() {
        return Err(ParseError::MissingRequired { path: obj.child("stateMachines[0]") });
    }
    Ok(CsmDescription {
        name: obj.req_str("name")?.to_string(),
        memory_mode,
        state_machines,
        local_data: obj.opt_list("localData", variable)?,
        persistent_data: obj.opt_list("persistentData", variable)?,
    })
}

struct Obj<'a> {
    map: &'a Map<String, Json>,
    path: String,
}

fn type_name(json: &Json) -> &'static str {
    match json {
        Json::Null => "null",
        Json::Bool(_) => "boolean",
        Json::Number(_) => "number",
        Json::String(_) => "string",
        Json::Array(_) => "array",
        Json::Object(_) => "object",
    }
}

impl<'a> Obj<'a> {
    fn new(json: &'a Json, path: &str, allowed: &[&str]) -> Result<Self> {
        let map = json.as_object().ok_or_else(|| ParseError::WrongType {
            path: display_path(path),
            expected: format!("object, found {}", type_name(json)),
        })?;
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ParseError::UnknownKeyword { path: join(path, key) });
            }
        }
        Ok(Obj { map, path: path.to_string() })
    }

    fn child(&self, key: &str) -> String {
        join(&self.path, key)
    }

    fn wrong(&self, key: &str, expected: &str) -> ParseError {
        ParseError::WrongType { path: self.child(key), expected: expected.to_string() }
    }

    fn get(&self, key: &str) -> Option<&'a Json> {
        self.map.get(key)
    }

    fn req(&self, key: &str) -> Result<&'a Json> {
        self.get(key).ok_or_else(|| ParseError::MissingRequired { path: self.child(key) })
    }

    fn req_str(&self, key: &str) -> Result<&'a str> {
        self.req(key)?.as_str().ok_or_else(|| self.wrong(key, "string"))
    }

    fn opt_str(&self, key: &str) -> Result<Option<String>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.as_str().map(|s| Some(s.to_string())).ok_or_else(|| self.wrong(key, "string")),
        }
    }

    fn opt_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.as_bool().map(Some).ok_or_else(|| self.wrong(key, "boolean")),
        }
    }

    /// Expressions may be given as strings or, for convenience, as JSON
    /// numbers or booleans which are taken verbatim.
    fn req_expr(&self, key: &str) -> Result<String> {
        match self.req(key)? {
            Json::String(s) => Ok(s.clone()),
            v @ (Json::Number(_) | Json::Bool(_)) => Ok(v.to_string()),
            _ => Err(self.wrong(key, "expression string")),
        }
    }

    fn req_list<T>(&self, key: &str, item: impl Fn(&Json, &str) -> Result<T>) -> Result<Vec<T>> {
        self.req(key)?;
        self.opt_list(key, item)
    }

    fn opt_list<T>(&self, key: &str, item: impl Fn(&Json, &str) -> Result<T>) -> Result<Vec<T>> {
        match self.get(key) {
            None => Ok(Vec::new()),
            Some(Json::Array(items)) => items
                .iter()
                .enumerate()
                .map(|(i, v)| item(v, &format!("{}[{i}]", self.child(key))))
                .collect(),
            Some(_) => Err(self.wrong(key, "array")),
        }
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn display_path(path: &str) -> String {
    if path.is_empty() {
        "<root>".to_string()
    } else {
        path.to_string()
    }
}

const MACHINE_KEYS: &[&str] =
    &["name", "states", "stateMachines", "guards", "actions", "localData", "persistentData"];

fn state_machine(json: &Json, path: &str) -> Result<StateMachineDef> {
    let obj = Obj::new(json, path, MACHINE_KEYS)?;
    let mut states = Vec::new();
    let mut nested = Vec::new();
    // A `states` entry that itself has `states` is a nested machine, which is
    // how nested machines appear when listed among a machine's states.
    for (i, entry) in obj.req("states")?.as_array().ok_or_else(|| obj.wrong("states", "array"))?.iter().enumerate() {
        let entry_path = format!("{}[{i}]", obj.child("states"));
        if entry.get("states").is_some() {
            nested.push(state_machine(entry, &entry_path)?);
        } else {
            states.push(state(entry, &entry_path)?);
        }
    }
    nested.extend(obj.opt_list("stateMachines", state_machine)?);
    Ok(StateMachineDef {
        name: obj.req_str("name")?.to_string(),
        states,
        nested,
        guards: obj.opt_list("guards", |v, p| {
            let g = guard(v, p)?;
            if g.name.is_none() {
                return Err(ParseError::MissingRequired { path: join(p, "name") });
            }
            Ok(g)
        })?,
        actions: obj.opt_list("actions", |v, p| {
            let a = action(v, p)?;
            if a.name.is_none() {
                return Err(ParseError::MissingRequired { path: join(p, "name") });
            }
            Ok(a)
        })?,
        local_data: obj.opt_list("localData", variable)?,
        persistent_data: obj.opt_list("persistentData", variable)?,
    })
}

const STATE_KEYS: &[&str] = &[
    "name", "initial", "terminal", "entry", "exit", "while", "after", "on", "always", "staticData",
    "localData", "persistentData",
];

fn state(json: &Json, path: &str) -> Result<StateDef> {
    let obj = Obj::new(json, path, STATE_KEYS)?;
    Ok(StateDef {
        name: obj.req_str("name")?.to_string(),
        initial: obj.opt_bool("initial")?.unwrap_or(false),
        terminal: obj.opt_bool("terminal")?.unwrap_or(false),
        entry: obj.opt_list("entry", action_ref)?,
        exit: obj.opt_list("exit", action_ref)?,
        while_actions: obj.opt_list("while", action_ref)?,
        after: obj.opt_list("after", action_ref)?,
        on: obj.opt_list("on", |v, p| transition(v, p, true))?,
        always: obj.opt_list("always", |v, p| transition(v, p, false))?,
        static_data: obj.opt_list("staticData", variable)?,
        local_data: obj.opt_list("localData", variable)?,
        persistent_data: obj.opt_list("persistentData", variable)?,
    })
}

fn transition(json: &Json, path: &str, on: bool) -> Result<TransitionDef> {
    let allowed: &[&str] = if on {
        &["target", "event", "guards", "actions"]
    } else {
        &["target", "guards", "actions"]
    };
    let obj = Obj::new(json, path, allowed)?;
    let event = if on { Some(obj.req_str("event")?.to_string()) } else { None };
    Ok(TransitionDef {
        target: obj.opt_str("target")?,
        event,
        guards: obj.opt_list("guards", guard_ref)?,
        actions: obj.opt_list("actions", action_ref)?,
    })
}

fn guard(json: &Json, path: &str) -> Result<GuardDef> {
    let obj = Obj::new(json, path, &["name", "expression"])?;
    Ok(GuardDef { name: obj.opt_str("name")?, expression: obj.req_expr("expression")? })
}

fn guard_ref(json: &Json, path: &str) -> Result<GuardRef> {
    match json {
        Json::String(name) => Ok(GuardRef::Named(name.clone())),
        _ => guard(json, path).map(GuardRef::Inline),
    }
}

fn action_ref(json: &Json, path: &str) -> Result<ActionRef> {
    match json {
        Json::String(name) => Ok(ActionRef::Named(name.clone())),
        _ => action(json, path).map(ActionRef::inline),
    }
}

fn action(json: &Json, path: &str) -> Result<ActionDef> {
    let kind = json
        .as_object()
        .ok_or_else(|| ParseError::WrongType {
            path: display_path(path),
            expected: format!("action object or name, found {}", type_name(json)),
        })?
        .get("type")
        .ok_or_else(|| ParseError::MissingRequired { path: join(path, "type") })?
        .as_str()
        .ok_or_else(|| ParseError::WrongType { path: join(path, "type"), expected: "string".into() })?;
    let keys: &[&str] = match kind {
        "invoke" => &["type", "name", "serviceType", "local", "input", "done", "properties"],
        "create" => &["type", "name", "variable", "persistent"],
        "assign" => &["type", "name", "variable", "value"],
        "delete" => &["type", "name", "variable"],
        "raiseEvent" => &["type", "name", "event"],
        "timeout" => &["type", "name", "delay", "actions"],
        "resetTimeout" => &["type", "name", "action"],
        "match" => &["type", "name", "value", "cases"],
        _ => {
            return Err(ParseError::WrongType {
                path: join(path, "type"),
                expected: "one of invoke, create, assign, delete, raiseEvent, timeout, resetTimeout, match"
                    .into(),
            })
        }
    };
    let obj = Obj::new(json, path, keys)?;
    let kind = match kind {
        "invoke" => ActionKind::Invoke {
            service_type: obj.req_str("serviceType")?.to_string(),
            local: obj.opt_bool("local")?,
            input: obj.opt_list("input", variable)?,
            done: obj.opt_list("done", event)?,
            properties: obj.opt_list("properties", variable)?,
        },
        "create" => ActionKind::Create {
            variable: variable(obj.req("variable")?, &obj.child("variable"))?,
            persistent: obj.opt_bool("persistent")?,
        },
        "assign" => ActionKind::Assign {
            variable: variable_ref(obj.req("variable")?, &obj.child("variable"))?,
            value: obj.req_expr("value")?,
        },
        "delete" => ActionKind::Delete { variable: variable_ref(obj.req("variable")?, &obj.child("variable"))? },
        "raiseEvent" => ActionKind::Raise { event: event(obj.req("event")?, &obj.child("event"))? },
        "timeout" => ActionKind::Timeout {
            delay: obj.req_expr("delay")?,
            actions: obj.req_list("actions", action_ref)?,
        },
        "resetTimeout" => ActionKind::ResetTimeout { action: obj.req_str("action")?.to_string() },
        _ => ActionKind::Match {
            value: obj.req_expr("value")?,
            cases: obj.req_list("cases", match_case)?,
        },
    };
    Ok(ActionDef { name: obj.opt_str("name")?, kind })
}

fn match_case(json: &Json, path: &str) -> Result<MatchCase> {
    let obj = Obj::new(json, path, &["case", "action"])?;
    Ok(MatchCase {
        case: obj.req_expr("case")?,
        action: action_ref(obj.req("action")?, &obj.child("action"))?,
    })
}

fn event(json: &Json, path: &str) -> Result<EventDef> {
    let obj = Obj::new(json, path, &["name", "channel", "data"])?;
    let channel = match obj.opt_str("channel")?.as_deref() {
        None | Some("internal") => EventChannel::Internal,
        Some("external") => EventChannel::External,
        Some("global") => EventChannel::Global,
        Some(_) => return Err(obj.wrong("channel", "\"internal\", \"external\" or \"global\"")),
    };
    Ok(EventDef {
        name: obj.req_str("name")?.to_string(),
        channel,
        data: obj.opt_list("data", variable)?,
    })
}

fn variable(json: &Json, path: &str) -> Result<VariableDecl> {
    let obj = Obj::new(json, path, &["name", "value"])?;
    Ok(VariableDecl { name: obj.req_str("name")?.to_string(), value: obj.req_expr("value")? })
}

fn variable_ref(json: &Json, path: &str) -> Result<VariableRef> {
    match json {
        Json::String(name) => Ok(VariableRef { name: name.clone() }),
        _ => {
            let obj = Obj::new(json, path, &["name"])?;
            Ok(VariableRef { name: obj.req_str("name")?.to_string() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_state_machine_list_is_rejected() {
        let err = parse_description(r#"{"name":"X","memoryMode":"shared","stateMachines":[]}"#).unwrap_err();
        assert!(matches!(err, ParseError::MissingRequired { .. }), "{err}");
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = r#"{"name":"X","memoryMode":"shared","stateMachines":[
            {"name":"A","states":[{"name":"s","initial":true,"on":[{"event":"e","trget":"s"}]}]}]}"#;
        assert_eq!(
            parse_description(text).unwrap_err(),
            ParseError::UnknownKeyword { path: "stateMachines[0].states[0].on[0].trget".into() }
        );
    }

    #[test]
    fn error_kinds() {
        assert!(matches!(parse_description("{"), Err(ParseError::JsonSyntax(_))));
        assert!(matches!(
            parse_description(r#"{"name":"X","stateMachines":[]}"#),
            Err(ParseError::MissingRequired { path }) if path == "memoryMode"
        ));
        assert!(matches!(
            parse_description(r#"{"name":1,"memoryMode":"shared","stateMachines":[{"name":"A","states":[]}]}"#),
            Err(ParseError::WrongType { path, .. }) if path == "name"
        ));
        assert!(matches!(
            parse_description(r#"{"name":"X","memoryMode":"both","stateMachines":[{"name":"A","states":[]}]}"#),
            Err(ParseError::WrongType { path, .. }) if path == "memoryMode"
        ));
        let bad_action = r#"{"name":"X","memoryMode":"shared","stateMachines":[
            {"name":"A","states":[{"name":"s","entry":[{"type":"jump"}]}]}]}"#;
        assert!(matches!(parse_description(bad_action), Err(ParseError::WrongType { path, .. }) if path.ends_with("type")));
        let on_without_event = r#"{"name":"X","memoryMode":"shared","stateMachines":[
            {"name":"A","states":[{"name":"s","on":[{"target":"s"}]}]}]}"#;
        assert!(matches!(parse_description(on_without_event), Err(ParseError::MissingRequired { path }) if path.ends_with("event")));
    }

    #[test]
    fn defaults_are_applied() {
        let text = r#"{"name":"X","memoryMode":"distributed","stateMachines":[
            {"name":"A","states":[{"name":"s","entry":[{"type":"invoke","serviceType":"t"}]}]}]}"#;
        let desc = parse_description(text).unwrap();
        let s = &desc.state_machines[0].states[0];
        assert!(!s.initial && !s.terminal);
        match &s.entry[0] {
            ActionRef::Inline(a) => assert!(matches!(a.kind, ActionKind::Invoke { local: None, .. })),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_machine_listed_among_states() {
        let text = r#"{"name":"CSM","memoryMode":"shared","stateMachines":[
            {"name":"SM2","states":[
                {"name":"Sc","initial":true},
                {"name":"Sd"},
                {"name":"SM21","states":[{"name":"Se","initial":true}]}
            ]}]}"#;
        let desc = parse_description(text).unwrap();
        let sm2 = &desc.state_machines[0];
        assert_eq!(sm2.states.len(), 2);
        assert_eq!(sm2.nested.len(), 1);
        assert_eq!(sm2.nested[0].name, "SM21");
        // Canonical output puts the nested machine under stateMachines.
        let json = serde_json::to_value(&desc).unwrap();
        assert_eq!(json["stateMachines"][0]["stateMachines"][0]["name"], "SM21");
    }
}
