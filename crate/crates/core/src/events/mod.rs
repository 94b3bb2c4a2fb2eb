//! Event routing between instances.
//!
//! Internal events go back to the raiser only, external events to instances
//! subscribed to the raiser, global events to every live instance, and
//! peripheral events are injected from outside into one or all instances.

mod broker;
mod local;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csml::EventChannel;
use crate::expr::Value;
use crate::metrics::now_micros;

pub use broker::{BrokerServer, RemoteBus};
pub use local::LocalBus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Internal,
    External,
    Global,
    Peripheral,
}

impl From<EventChannel> for Channel {
    fn from(c: EventChannel) -> Self {
        match c {
            EventChannel::Internal => Channel::Internal,
            EventChannel::External => Channel::External,
            EventChannel::Global => Channel::Global,
        }
    }
}

/// A raised event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EventInstance {
    pub name: String,
    pub channel: Channel,
    #[serde(default)]
    pub data: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Unix time in microseconds.
    #[serde(default)]
    pub created_at: u64,
}

impl EventInstance {
    pub fn new(name: impl Into<String>, channel: Channel) -> Self {
        EventInstance { name: name.into(), channel, data: BTreeMap::new(), source: None, created_at: now_micros() }
    }

    pub fn peripheral(name: impl Into<String>, data: BTreeMap<String, Value>) -> Self {
        EventInstance { data, ..Self::new(name, Channel::Peripheral) }
    }

    pub fn from_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<Value>) -> Self {
        self.data.insert(name.into(), value.into());
        self
    }
}

/// Lets `subscriber` receive external events raised by `sources` (any source
/// when `None`), optionally only those named in `names`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub subscriber: String,
    #[serde(default)]
    pub sources: Option<BTreeSet<String>>,
    #[serde(default)]
    pub names: Option<BTreeSet<String>>,
}

impl Subscription {
    pub fn to_sources<I, S>(subscriber: impl Into<String>, sources: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Subscription {
            subscriber: subscriber.into(),
            sources: Some(sources.into_iter().map(Into::into).collect()),
            names: None,
        }
    }

    pub fn named<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.names = Some(names.into_iter().map(Into::into).collect());
        self
    }

    fn matches(&self, source: Option<&str>, name: &str) -> bool {
        let source_ok = match (&self.sources, source) {
            (None, Some(s)) => s != self.subscriber,
            (None, None) => true,
            (Some(set), Some(s)) => set.contains(s),
            (Some(_), None) => false,
        };
        source_ok && self.names.as_ref().map_or(true, |n| n.contains(name))
    }

    /// Self-subscription must be explicit.
    fn names_self(&self) -> bool {
        self.sources.as_ref().is_some_and(|s| s.contains(&self.subscriber))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    All,
    Instance(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("event transport unavailable: {0}")]
    Unavailable(String),
    #[error("unknown target instance `{0}`")]
    UnknownTarget(String),
    #[error("peripheral events are injected, not published")]
    PeripheralPublish,
}

/// Receives events for one attached instance. Returns `false` once the
/// instance is gone.
pub type Inbox = Arc<dyn Fn(EventInstance) -> bool + Send + Sync>;

/// Delivery fabric shared by the instances of one or more runtimes.
pub trait Transport: Send + Sync {
    fn attach(&self, instance: &str, inbox: Inbox) -> Result<(), TransportError>;
    fn detach(&self, instance: &str) -> Result<(), TransportError>;
    fn register(&self, sub: Subscription) -> Result<(), TransportError>;
    /// Drops every subscription held by `subscriber`.
    fn unregister(&self, subscriber: &str) -> Result<(), TransportError>;
    /// Routes a raised event; returns how many inboxes accepted it.
    fn publish(&self, event: EventInstance) -> Result<usize, TransportError>;
    fn inject_peripheral(&self, event: EventInstance, target: Target) -> Result<usize, TransportError>;
    /// Deliveries that found no live inbox.
    fn dropped(&self) -> u64;
}

/// Subscription table and live-instance set; decides recipients.
#[derive(Debug, Default)]
pub(crate) struct Routing {
    live: BTreeSet<String>,
    subs: BTreeMap<String, Vec<Subscription>>,
}

impl Routing {
    pub(crate) fn attach(&mut self, instance: &str) {
        self.live.insert(instance.to_string());
    }

    pub(crate) fn detach(&mut self, instance: &str) {
        self.live.remove(instance);
    }

    pub(crate) fn register(&mut self, sub: Subscription) {
        let list = self.subs.entry(sub.subscriber.clone()).or_default();
        if !list.contains(&sub) {
            list.push(sub);
        }
    }

    pub(crate) fn unregister(&mut self, subscriber: &str) {
        self.subs.remove(subscriber);
    }

    /// Recipients of a raised event, in instance-id order.
    pub(crate) fn recipients(&self, e: &EventInstance) -> Result<Vec<String>, TransportError> {
        let source = e.source.as_deref();
        let subscribed = |id: &str| self.subs.get(id).is_some_and(|l| l.iter().any(|s| s.matches(source, &e.name)));
        Ok(match e.channel {
            Channel::Internal => source.filter(|s| self.live.contains(*s)).map(|s| vec![s.to_string()]).unwrap_or_default(),
            Channel::External => self.live.iter().filter(|id| subscribed(id)).cloned().collect(),
            Channel::Global => self
                .live
                .iter()
                .filter(|id| {
                    Some(id.as_str()) != source
                        || self.subs.get(id.as_str()).is_some_and(|l| l.iter().any(Subscription::names_self))
                })
                .cloned()
                .collect(),
            Channel::Peripheral => return Err(TransportError::PeripheralPublish),
        })
    }

    pub(crate) fn targets(&self, target: &Target) -> Result<Vec<String>, TransportError> {
        match target {
            Target::All => Ok(self.live.iter().cloned().collect()),
            Target::Instance(id) if self.live.contains(id) => Ok(vec![id.clone()]),
            Target::Instance(id) => Err(TransportError::UnknownTarget(id.clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn routing(live: &[&str]) -> Routing {
        let mut r = Routing::default();
        live.iter().for_each(|i| r.attach(i));
        r
    }

    #[test]
    fn internal_goes_to_raiser_only() {
        let r = routing(&["A", "B"]);
        let e = EventInstance::new("e1", Channel::Internal).from_source("A");
        assert_eq!(r.recipients(&e).unwrap(), vec!["A"]);
    }

    #[test]
    fn external_follows_subscriptions() {
        let mut r = routing(&["A", "B", "C"]);
        r.register(Subscription::to_sources("B", ["A"]));
        let e = EventInstance::new("e", Channel::External).from_source("A");
        assert_eq!(r.recipients(&e).unwrap(), vec!["B"]);
        r.register(Subscription::to_sources("C", ["A"]).named(["other"]));
        assert_eq!(r.recipients(&e).unwrap(), vec!["B"]);
        r.unregister("B");
        assert!(r.recipients(&e).unwrap().is_empty());
    }

    #[test]
    fn global_reaches_everyone_but_raiser() {
        let mut r = routing(&["A", "B", "C"]);
        let e = EventInstance::new("alarm", Channel::Global).from_source("A");
        assert_eq!(r.recipients(&e).unwrap(), vec!["B", "C"]);
        r.register(Subscription::to_sources("A", ["A"]));
        assert_eq!(r.recipients(&e).unwrap(), vec!["A", "B", "C"]);
    }

    #[test]
    fn unknown_peripheral_target() {
        let r = routing(&["A"]);
        assert_eq!(r.targets(&Target::Instance("Z".into())), Err(TransportError::UnknownTarget("Z".into())));
        assert_eq!(r.targets(&Target::All).unwrap(), vec!["A"]);
    }

    #[test]
    fn event_json_shape() {
        let e = EventInstance { created_at: 5, ..EventInstance::new("seen", Channel::Peripheral) }.with("train", 3i64);
        let json = serde_json::to_value(&e).unwrap();
        assert_eq!(json, serde_json::json!({"name": "seen", "channel": "peripheral", "data": {"train": 3}, "createdAt": 5}));
        let back: EventInstance = serde_json::from_value(json).unwrap();
        assert_eq!(back, e);
    }
}
