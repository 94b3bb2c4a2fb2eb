use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver};
use csm_core::events::{
    BrokerServer, Channel, EventInstance, Inbox, LocalBus, RemoteBus, Subscription, Target, Transport, TransportError,
};
use proptest::prelude::*;

fn inbox() -> (Inbox, Receiver<EventInstance>) {
    let (tx, rx) = unbounded();
    (Arc::new(move |e| tx.send(e).is_ok()), rx)
}

fn drain(rx: &Receiver<EventInstance>) -> Vec<EventInstance> {
    rx.try_iter().collect()
}

fn wait_for(rx: &Receiver<EventInstance>, n: usize) -> Vec<EventInstance> {
    let deadline = Instant::now() + Duration::from_secs(5);
    let mut got = Vec::new();
    while got.len() < n {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok(e) => got.push(e),
            Err(_) => break,
        }
    }
    got
}

#[test]
fn internal_event_reaches_only_the_raiser() {
    let bus = LocalBus::new();
    let (a, ra) = inbox();
    let (b, rb) = inbox();
    bus.attach("A", a).unwrap();
    bus.attach("B", b).unwrap();
    let n = bus.publish(EventInstance::new("e1", Channel::Internal).from_source("A")).unwrap();
    assert_eq!(n, 1);
    assert_eq!(drain(&ra).len(), 1);
    assert!(drain(&rb).is_empty());
}

#[test]
fn external_event_reaches_subscribers_only() {
    let bus = LocalBus::new();
    let (a, ra) = inbox();
    let (b, rb) = inbox();
    let (c, rc) = inbox();
    bus.attach("A", a).unwrap();
    bus.attach("B", b).unwrap();
    bus.attach("C", c).unwrap();
    bus.register(Subscription::to_sources("B", ["A"])).unwrap();
    assert_eq!(bus.publish(EventInstance::new("e", Channel::External).from_source("A")).unwrap(), 1);
    assert!(drain(&ra).is_empty());
    assert_eq!(drain(&rb)[0].name, "e");
    assert!(drain(&rc).is_empty());
}

#[test]
fn peripheral_injection_and_unknown_target() {
    let bus = LocalBus::new();
    let (a, ra) = inbox();
    bus.attach("controller", a).unwrap();
    let seen = EventInstance::peripheral("seen", BTreeMap::new());
    assert_eq!(bus.inject_peripheral(seen.clone(), Target::Instance("controller".into())).unwrap(), 1);
    assert_eq!(drain(&ra)[0].channel, Channel::Peripheral);
    assert_eq!(
        bus.inject_peripheral(seen.clone(), Target::Instance("ghost".into())),
        Err(TransportError::UnknownTarget("ghost".into()))
    );
    assert_eq!(bus.publish(seen), Err(TransportError::PeripheralPublish));
}

#[test]
fn dead_inbox_counts_as_dropped() {
    let bus = LocalBus::new();
    let (a, ra) = inbox();
    bus.attach("A", a).unwrap();
    bus.attach("B", Arc::new(|_| false)).unwrap();
    drop(ra);
    assert_eq!(bus.publish(EventInstance::new("g", Channel::Global).from_source("X")).unwrap(), 0);
    assert_eq!(bus.dropped(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Random topologies: nobody receives an internal event it did not raise,
    /// and a global event reaches exactly the live instances other than the raiser.
    #[test]
    fn channel_isolation(
        n in 2usize..7,
        subs in proptest::collection::vec((0usize..7, 0usize..7), 0..12),
        raises in proptest::collection::vec((0usize..7, 0u8..3), 1..30),
    ) {
        let bus = LocalBus::new();
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let rxs: Vec<_> = ids.iter().map(|id| {
            let (tx, rx) = inbox();
            bus.attach(id, tx).unwrap();
            rx
        }).collect();
        for (s, src) in &subs {
            if s < &n && src < &n && s != src {
                bus.register(Subscription::to_sources(&ids[*s], [&ids[*src]])).unwrap();
            }
        }
        for (k, (who, ch)) in raises.iter().enumerate() {
            let who = who % n;
            let channel = [Channel::Internal, Channel::External, Channel::Global][*ch as usize];
            let e = EventInstance::new(format!("e{k}"), channel).from_source(&ids[who]);
            let count = bus.publish(e).unwrap();
            for (i, rx) in rxs.iter().enumerate() {
                let got = drain(rx);
                let expect = match channel {
                    Channel::Internal => i == who,
                    Channel::External => subs.iter().any(|(s, src)| *s == i && *src == who && i != who),
                    _ => i != who,
                };
                prop_assert_eq!(got.len(), usize::from(expect), "instance {} channel {:?}", i, channel);
                if let Some(e) = got.first() {
                    prop_assert_eq!(e.source.as_deref(), Some(ids[who].as_str()));
                }
            }
            if channel == Channel::Global {
                prop_assert_eq!(count, n - 1);
            }
        }
    }
}

#[test]
fn broker_routes_between_runtimes() {
    let broker = BrokerServer::start("127.0.0.1:0", Duration::ZERO).unwrap();
    let r1 = RemoteBus::connect(broker.local_addr()).unwrap();
    let r2 = RemoteBus::connect(broker.local_addr()).unwrap();
    let (a, ra) = inbox();
    let (b, rb) = inbox();
    let (c, rc) = inbox();
    r1.attach("A", a).unwrap();
    r2.attach("B", b).unwrap();
    r2.attach("C", c).unwrap();
    r2.register(Subscription::to_sources("B", ["A"])).unwrap();

    assert_eq!(r1.publish(EventInstance::new("x", Channel::External).from_source("A")).unwrap(), 1);
    assert_eq!(wait_for(&rb, 1)[0].name, "x");

    assert_eq!(r1.publish(EventInstance::new("alarm", Channel::Global).from_source("A")).unwrap(), 2);
    assert_eq!(wait_for(&rb, 1)[0].name, "alarm");
    assert_eq!(wait_for(&rc, 1)[0].name, "alarm");
    assert!(drain(&ra).is_empty());

    let seen = EventInstance::peripheral("seen", BTreeMap::new());
    assert_eq!(r1.inject_peripheral(seen.clone(), Target::Instance("C".into())).unwrap(), 1);
    assert_eq!(wait_for(&rc, 1)[0].name, "seen");
    assert_eq!(
        r1.inject_peripheral(seen, Target::Instance("nobody".into())),
        Err(TransportError::UnknownTarget("nobody".into()))
    );
}

#[test]
fn broker_preserves_per_source_order_under_latency() {
    let broker = BrokerServer::start("127.0.0.1:0", Duration::from_millis(10)).unwrap();
    let r1 = RemoteBus::connect(broker.local_addr()).unwrap();
    let r2 = RemoteBus::connect(broker.local_addr()).unwrap();
    let (b, rb) = inbox();
    r1.attach("A", Arc::new(|_| true)).unwrap();
    r2.attach("B", b).unwrap();
    r2.register(Subscription::to_sources("B", ["A"])).unwrap();
    let start = Instant::now();
    for k in 0..50i64 {
        r1.publish(EventInstance::new("tick", Channel::External).from_source("A").with("k", k)).unwrap();
    }
    let got = wait_for(&rb, 50);
    assert!(start.elapsed() >= Duration::from_millis(10));
    let ks: Vec<i64> = got.iter().map(|e| e.data["k"].as_f64().unwrap() as i64).collect();
    assert_eq!(ks, (0..50).collect::<Vec<_>>());
}

#[test]
fn broker_forgets_instances_of_closed_connections() {
    let broker = BrokerServer::start("127.0.0.1:0", Duration::ZERO).unwrap();
    let r1 = RemoteBus::connect(broker.local_addr()).unwrap();
    {
        let r2 = RemoteBus::connect(broker.local_addr()).unwrap();
        r2.attach("B", Arc::new(|_| true)).unwrap();
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let n = r1.publish(EventInstance::new("g", Channel::Global).from_source("A")).unwrap();
        if n == 0 || Instant::now() > deadline {
            assert_eq!(n, 0);
            break;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}
