use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::csml::{
    description_from_json, validate, ActionKind, ActionRef, CsmDescription, DiagnosticCode, StateMachineDef,
    ValidationReport,
};
use crate::expr::{parse_expression, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Http,
    /// Recognized so it can be rejected with a clear message.
    Grpc,
}

/// One concrete implementation of a service type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ServiceImplementationDescription {
    pub service_type: String,
    pub endpoint: String,
    #[serde(default = "http")]
    pub protocol: Protocol,
    #[serde(default)]
    pub local: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_hint: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_hint: Option<f64>,
    /// Matched against invoke `properties` hints.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, Value>,
}

fn http() -> Protocol {
    Protocol::Http
}

impl ServiceImplementationDescription {
    pub fn http(service_type: &str, endpoint: &str, local: bool) -> Self {
        ServiceImplementationDescription {
            service_type: service_type.to_string(),
            endpoint: endpoint.to_string(),
            protocol: Protocol::Http,
            local,
            cost_hint: None,
            latency_hint: None,
            attributes: BTreeMap::new(),
        }
    }
}

/// A request to instantiate one state machine of a description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Job {
    #[serde(serialize_with = "ser_description", deserialize_with = "de_description")]
    pub description: CsmDescription,
    #[serde(default)]
    pub service_implementations: Vec<ServiceImplementationDescription>,
    pub state_machine_name: String,
    #[serde(default)]
    pub instance_data: BTreeMap<String, Value>,
    /// Instance ids (or machine names of jobs submitted together) whose
    /// external events this instance receives.
    #[serde(default)]
    pub bindings: Vec<String>,
    /// Expressions over runtime attributes; all must hold.
    #[serde(default)]
    pub eligibility: Vec<String>,
}

fn ser_description<S: Serializer>(d: &CsmDescription, s: S) -> Result<S::Ok, S::Error> {
    d.serialize(s)
}

fn de_description<'de, D: Deserializer<'de>>(d: D) -> Result<CsmDescription, D::Error> {
    let json = serde_json::Value::deserialize(d)?;
    description_from_json(&json).map_err(serde::de::Error::custom)
}

impl Job {
    pub fn new(description: CsmDescription, machine: &str) -> Job {
        Job {
            description,
            service_implementations: Vec::new(),
            state_machine_name: machine.to_string(),
            instance_data: BTreeMap::new(),
            bindings: Vec::new(),
            eligibility: Vec::new(),
        }
    }

    /// Description checks plus the job's own: the machine exists,
    /// eligibility parses, protocols are supported and every invoked service
    /// type has an implementation (a warning otherwise).
    pub fn validate(&self) -> ValidationReport {
        let mut report = validate(&self.description);
        let Some(machine) = self.description.find_machine(&self.state_machine_name) else {
            report.error(
                "stateMachineName",
                DiagnosticCode::UnknownTarget,
                format!("no state machine named `{}`", self.state_machine_name),
            );
            return report;
        };
        for (i, cond) in self.eligibility.iter().enumerate() {
            if let Err(e) = parse_expression(cond) {
                report.error(format!("eligibility[{i}]"), DiagnosticCode::ExpressionSyntax, e.to_string());
            }
        }
        for (i, imp) in self.service_implementations.iter().enumerate() {
            if imp.protocol != Protocol::Http {
                report.error(
                    format!("serviceImplementations[{i}].protocol"),
                    DiagnosticCode::UnsupportedProtocol,
                    format!("unsupported protocol {:?}", imp.protocol),
                );
            }
        }
        let mut types = BTreeSet::new();
        invoked_types(machine, &mut types);
        for t in types {
            if !self.service_implementations.iter().any(|i| i.service_type == t) {
                report.warning(
                    "serviceImplementations",
                    DiagnosticCode::MissingImplementation,
                    format!("no implementation for service type `{t}`"),
                );
            }
        }
        report
    }
}

/// Service types invoked by `m`, its nested machines and named actions.
fn invoked_types(m: &StateMachineDef, out: &mut BTreeSet<String>) {
    fn action(a: &ActionRef, out: &mut BTreeSet<String>) {
        if let ActionRef::Inline(def) = a {
            kind(&def.kind, out);
        }
    }
    fn kind(k: &ActionKind, out: &mut BTreeSet<String>) {
        match k {
            ActionKind::Invoke { service_type, .. } => {
                out.insert(service_type.clone());
            }
            ActionKind::Timeout { actions, .. } => actions.iter().for_each(|a| action(a, out)),
            ActionKind::Match { cases, .. } => cases.iter().for_each(|c| action(&c.action, out)),
            _ => {}
        }
    }
    m.actions.iter().for_each(|a| kind(&a.kind, out));
    for s in &m.states {
        let lists = [&s.entry, &s.exit, &s.while_actions, &s.after];
        lists.into_iter().flatten().for_each(|a| action(a, out));
        s.on.iter().chain(&s.always).flat_map(|t| &t.actions).for_each(|a| action(a, out));
    }
    for n in &m.nested {
        invoked_types(n, out);
    }
}
