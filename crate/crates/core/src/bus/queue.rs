use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{Envelope, RecvError, TopicQos};

/// FIFO of envelopes with a per-topic delivery policy.
///
/// Used both as a subscription's receive buffer (one topic) and as a broker
/// connection's outbox (many topics, one global order). Keep-last topics
/// evict their own oldest entry; other topics are never touched.
#[derive(Debug, Default)]
pub(crate) struct DeliveryQueue {
    state: Mutex<QueueState>,
    ready: Condvar,
}

#[derive(Debug, Default)]
struct QueueState {
    items: VecDeque<Envelope>,
    policies: HashMap<String, TopicQos>,
    counts: HashMap<String, usize>,
    closed: bool,
    disconnected: bool,
}

impl DeliveryQueue {
    pub(crate) fn with_policy(topic: &str, qos: TopicQos) -> Self {
        let q = Self::default();
        q.set_policy(topic, qos);
        q
    }

    pub(crate) fn set_policy(&self, topic: &str, qos: TopicQos) {
        self.state.lock().unwrap().policies.insert(topic.to_owned(), qos);
    }

    /// Enqueues `env`; returns false when the queue no longer accepts input.
    pub(crate) fn push(&self, env: Envelope) -> bool {
        let mut st = self.state.lock().unwrap();
        if st.closed || st.disconnected {
            return false;
        }
        let qos = st.policies.get(&env.topic).copied().unwrap_or(TopicQos::Lossless);
        if let TopicQos::KeepLast(n) = qos {
            while st.counts.get(&env.topic).copied().unwrap_or(0) >= n {
                let idx = st
                    .items
                    .iter()
                    .position(|e| e.topic == env.topic)
                    .expect("count implies a queued entry");
                st.items.remove(idx);
                *st.counts.get_mut(&env.topic).unwrap() -= 1;
            }
        }
        *st.counts.entry(env.topic.clone()).or_default() += 1;
        st.items.push_back(env);
        drop(st);
        self.ready.notify_one();
        true
    }

    fn take_front(st: &mut QueueState) -> Option<Envelope> {
        let env = st.items.pop_front()?;
        if let Some(c) = st.counts.get_mut(&env.topic) {
            *c -= 1;
        }
        Some(env)
    }

    pub(crate) fn try_pop(&self) -> Result<Envelope, RecvError> {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return Err(RecvError::Closed);
        }
        match Self::take_front(&mut st) {
            Some(e) => Ok(e),
            None if st.disconnected => Err(RecvError::Disconnected),
            None => Err(RecvError::Empty),
        }
    }

    pub(crate) fn pop(&self, timeout: Option<Duration>) -> Result<Envelope, RecvError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.state.lock().unwrap();
        loop {
            if st.closed {
                return Err(RecvError::Closed);
            }
            if let Some(e) = Self::take_front(&mut st) {
                return Ok(e);
            }
            if st.disconnected {
                return Err(RecvError::Disconnected);
            }
            st = match deadline {
                None => self.ready.wait(st).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(RecvError::Timeout);
                    }
                    self.ready.wait_timeout(st, d - now).unwrap().0
                }
            };
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    #[cfg(test)]
    pub(crate) fn buffered_for(&self, topic: &str) -> usize {
        self.state.lock().unwrap().counts.get(topic).copied().unwrap_or(0)
    }

    /// Drops buffered entries and refuses further input.
    pub(crate) fn close(&self) {
        let mut st = self.state.lock().unwrap();
        st.closed = true;
        st.items.clear();
        st.counts.clear();
        drop(st);
        self.ready.notify_all();
    }

    /// Marks the upstream as gone; buffered entries can still be drained.
    pub(crate) fn disconnect(&self) {
        self.state.lock().unwrap().disconnected = true;
        self.ready.notify_all();
    }
}
