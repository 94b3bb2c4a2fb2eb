use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;

use super::{EventInstance, Inbox, Routing, Subscription, Target, Transport, TransportError};

/// In-process fan-out. Delivery happens on the publisher's thread, directly
/// into the recipients' inboxes.
#[derive(Default)]
pub struct LocalBus {
    state: RwLock<State>,
    dropped: AtomicU64,
}

#[derive(Default)]
struct State {
    routing: Routing,
    inboxes: HashMap<String, Inbox>,
}

impl LocalBus {
    pub fn new() -> Self {
        Self::default()
    }

    fn deliver(&self, state: &State, ids: Vec<String>, event: &EventInstance) -> usize {
        let mut n = 0;
        for id in ids {
            match state.inboxes.get(&id) {
                Some(inbox) if inbox(event.clone()) => n += 1,
                _ => {
                    self.dropped.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        n
    }
}

impl Transport for LocalBus {
    fn attach(&self, instance: &str, inbox: Inbox) -> Result<(), TransportError> {
        let mut s = self.state.write();
        s.routing.attach(instance);
        s.inboxes.insert(instance.to_string(), inbox);
        Ok(())
    }

    fn detach(&self, instance: &str) -> Result<(), TransportError> {
        let mut s = self.state.write();
        s.routing.detach(instance);
        s.inboxes.remove(instance);
        Ok(())
    }

    fn register(&self, sub: Subscription) -> Result<(), TransportError> {
        self.state.write().routing.register(sub);
        Ok(())
    }

    fn unregister(&self, subscriber: &str) -> Result<(), TransportError> {
        self.state.write().routing.unregister(subscriber);
        Ok(())
    }

    fn publish(&self, event: EventInstance) -> Result<usize, TransportError> {
        let s = self.state.read();
        let ids = s.routing.recipients(&event)?;
        Ok(self.deliver(&s, ids, &event))
    }

    fn inject_peripheral(&self, event: EventInstance, target: Target) -> Result<usize, TransportError> {
        let s = self.state.read();
        let ids = s.routing.targets(&target)?;
        Ok(self.deliver(&s, ids, &event))
    }

    fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}
