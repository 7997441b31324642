use std::collections::HashMap;
use std::sync::{Arc, Mutex, Weak};

use super::queue::DeliveryQueue;
use super::{validate_topic, BusError, Envelope, SeqCounters, Subscription, TopicQos, Transport};

/// In-process hub. Cloning shares the hub.
#[derive(Clone, Default)]
pub struct InProcBus {
    hub: Arc<Mutex<Hub>>,
}

#[derive(Default)]
struct Hub {
    next_id: u64,
    subs: HashMap<String, Vec<(u64, Arc<DeliveryQueue>)>>,
    retained: HashMap<String, Envelope>,
}

impl InProcBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// A new endpoint with its own publisher identity.
    pub fn client(&self) -> InProcClient {
        InProcClient {
            bus: self.clone(),
            seqs: SeqCounters::default(),
        }
    }

    /// Number of live subscriptions on `topic`.
    pub fn subscriber_count(&self, topic: &str) -> usize {
        self.hub.lock().unwrap().subs.get(topic).map_or(0, Vec::len)
    }
}

pub struct InProcClient {
    bus: InProcBus,
    seqs: SeqCounters,
}

impl Transport for InProcClient {
    fn publish(&self, topic: &str, payload: &[u8], timestamp_ns: u64) -> Result<u64, BusError> {
        validate_topic(topic)?;
        // Seq assignment and fan-out happen under the hub lock so concurrent
        // publishers of one client deliver in seq order.
        let mut hub = self.bus.hub.lock().unwrap();
        let seq = self.seqs.next(topic);
        let env = Envelope::new(topic, seq, timestamp_ns, payload.to_vec());
        if let Some(subs) = hub.subs.get(topic) {
            for (_, q) in subs {
                q.push(env.clone());
            }
        }
        hub.retained.insert(topic.to_owned(), env);
        Ok(seq)
    }

    fn subscribe(&self, topic: &str, qos: TopicQos) -> Result<Subscription, BusError> {
        validate_topic(topic)?;
        if qos == TopicQos::KeepLast(0) {
            return Err(BusError::InvalidQos("keep_last depth must be at least 1".into()));
        }
        let queue = Arc::new(DeliveryQueue::with_policy(topic, qos));
        let mut hub = self.bus.hub.lock().unwrap();
        if matches!(qos, TopicQos::KeepLast(_)) {
            if let Some(env) = hub.retained.get(topic) {
                queue.push(env.clone());
            }
        }
        let id = hub.next_id;
        hub.next_id += 1;
        hub.subs
            .entry(topic.to_owned())
            .or_default()
            .push((id, queue.clone()));
        drop(hub);

        let weak: Weak<Mutex<Hub>> = Arc::downgrade(&self.bus.hub);
        let owned_topic = topic.to_owned();
        Ok(Subscription::new(
            topic,
            qos,
            queue,
            Box::new(move || {
                if let Some(hub) = weak.upgrade() {
                    let mut hub = hub.lock().unwrap();
                    if let Some(list) = hub.subs.get_mut(&owned_topic) {
                        list.retain(|(i, _)| *i != id);
                        if list.is_empty() {
                            hub.subs.remove(&owned_topic);
                        }
                    }
                }
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::RecvError;

    #[test]
    fn fan_out_and_isolation() {
        let bus = InProcBus::new();
        let publisher = bus.client();
        let a = bus.client().subscribe("/led/status", TopicQos::Lossless).unwrap();
        let b = bus.client().subscribe("/led/status", TopicQos::Lossless).unwrap();
        let other = bus.client().subscribe("/b", TopicQos::Lossless).unwrap();
        for i in 0..3u8 {
            publisher.publish("/led/status", &[i % 2], i as u64).unwrap();
        }
        for sub in [&a, &b] {
            let seqs: Vec<u64> = (0..3).map(|_| sub.try_recv().unwrap().seq).collect();
            assert_eq!(seqs, vec![0, 1, 2]);
        }
        assert_eq!(other.try_recv(), Err(RecvError::Empty));
    }

    #[test]
    fn seq_is_per_publisher_and_topic() {
        let bus = InProcBus::new();
        let sub = bus.client().subscribe("/a", TopicQos::Lossless).unwrap();
        let p1 = bus.client();
        let p2 = bus.client();
        assert_eq!(p1.publish("/a", &[], 0).unwrap(), 0);
        assert_eq!(p1.publish("/b", &[], 0).unwrap(), 0);
        assert_eq!(p1.publish("/a", &[], 0).unwrap(), 1);
        assert_eq!(p2.publish("/a", &[], 0).unwrap(), 0);
        assert_eq!(sub.pending(), 3);
    }

    #[test]
    fn zero_subscribers_is_fine() {
        let bus = InProcBus::new();
        assert_eq!(bus.client().publish("/nobody", &[1], 0).unwrap(), 0);
    }

    #[test]
    fn late_keep_last_subscriber_gets_retained_value() {
        let bus = InProcBus::new();
        let p = bus.client();
        for i in 0..5u8 {
            p.publish("/led/status", &[i], i as u64).unwrap();
        }
        let late = bus.client().subscribe("/led/status", TopicQos::KeepLast(1)).unwrap();
        let env = late.try_recv().unwrap();
        assert_eq!((env.seq, env.payload), (4, vec![4]));
        let lossless = bus.client().subscribe("/led/status", TopicQos::Lossless).unwrap();
        assert_eq!(lossless.try_recv(), Err(RecvError::Empty));
    }

    #[test]
    fn slow_keep_last_subscriber_sees_newest() {
        let bus = InProcBus::new();
        let sub = bus.client().subscribe("/camera/frame", TopicQos::KeepLast(1)).unwrap();
        let p = bus.client();
        p.publish("/camera/frame", b"old", 0).unwrap();
        p.publish("/camera/frame", b"new", 1).unwrap();
        assert_eq!(sub.try_recv().unwrap().payload, b"new");
        assert_eq!(sub.try_recv(), Err(RecvError::Empty));
    }

    #[test]
    fn closed_handle_receives_nothing() {
        let bus = InProcBus::new();
        let sub = bus.client().subscribe("/t", TopicQos::Lossless).unwrap();
        assert_eq!(bus.subscriber_count("/t"), 1);
        sub.close();
        assert_eq!(bus.subscriber_count("/t"), 0);
        bus.client().publish("/t", &[1], 0).unwrap();
    }
}
