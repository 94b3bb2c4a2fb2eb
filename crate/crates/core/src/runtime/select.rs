//! Eligibility, runtime placement and implementation selection.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::expr::{evaluate_guard, parse_expression, Environment, Value};

use super::{Job, RuntimeError, ServiceImplementationDescription};

/// True iff every eligibility condition holds over `attributes`. A condition
/// that fails to parse or evaluate makes the runtime ineligible; the cause is
/// logged.
pub fn evaluate_eligibility(job: &Job, node: &str, attributes: &BTreeMap<String, Value>) -> bool {
    let env = Environment::from_pairs(attributes.clone());
    for cond in &job.eligibility {
        let verdict = parse_expression(cond)
            .map_err(|e| e.to_string())
            .and_then(|e| evaluate_guard(&e, &env).map_err(|e| e.to_string()));
        match verdict {
            Ok(true) => {}
            Ok(false) => return false,
            Err(cause) => {
                log::warn!("runtime {node} ineligible for `{}`: condition `{cond}`: {cause}", job.state_machine_name);
                return false;
            }
        }
    }
    true
}

/// Least-loaded eligible runtime: fewest hosted instances, then the
/// lexicographically smallest id.
pub fn select_runtime<'a>(eligible: impl IntoIterator<Item = (&'a str, usize)>) -> Option<&'a str> {
    eligible.into_iter().min_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0))).map(|(id, _)| id)
}

/// Picks an implementation of `service_type`. With `local_required`, only
/// local implementations qualify. Candidates whose attributes contradict a
/// property hint are skipped; the rest are ranked by latency hint, then cost
/// hint, then catalog order. Missing hints rank last.
pub fn select_implementation<'a>(
    service_type: &str,
    local_required: Option<bool>,
    properties: &BTreeMap<String, Value>,
    catalog: &'a [ServiceImplementationDescription],
) -> Result<&'a ServiceImplementationDescription, RuntimeError> {
    let of_type: Vec<&ServiceImplementationDescription> =
        catalog.iter().filter(|i| i.service_type == service_type).collect();
    if of_type.is_empty() {
        return Err(RuntimeError::NoImplementation(service_type.to_string()));
    }
    let candidates: Vec<&ServiceImplementationDescription> = of_type
        .into_iter()
        .filter(|i| local_required != Some(true) || i.local)
        .filter(|i| properties.iter().all(|(k, v)| i.attributes.get(k).map_or(true, |a| a.loosely_equals(v))))
        .collect();
    let hint = |h: Option<f64>| h.unwrap_or(f64::INFINITY);
    candidates
        .into_iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            hint(a.latency_hint)
                .partial_cmp(&hint(b.latency_hint))
                .unwrap_or(Ordering::Equal)
                .then(hint(a.cost_hint).partial_cmp(&hint(b.cost_hint)).unwrap_or(Ordering::Equal))
                .then(ia.cmp(ib))
        })
        .map(|(_, i)| i)
        .ok_or_else(|| match local_required {
            Some(true) => RuntimeError::NoLocalImplementation(service_type.to_string()),
            _ => RuntimeError::NoImplementation(service_type.to_string()),
        })
}
