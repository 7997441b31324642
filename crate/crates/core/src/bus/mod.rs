//! Minimal topic-based publish/subscribe middleware.
//!
//! Two transports share one API ([`Transport`]):
//! - [`InProcBus`]: a hub inside one process, used for single-process runs and tests.
//! - [`tcp::Broker`] + [`tcp::TcpClient`]: a star topology where every node
//!   connects to one broker, which routes each envelope to the subscribers of
//!   its topic.
//!
//! Sequence numbers are assigned per publisher and per topic, starting at 0.
//! Timestamps are supplied by the publisher (the scenario clock), never by the
//! broker. The broker retains the latest envelope of every topic and hands it
//! to new `keep_last` subscribers so late joiners learn the current state.

mod envelope;
mod inproc;
mod queue;
pub mod tcp;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

pub use envelope::{
    decode_body, decode_envelope, encode_envelope, read_frame, validate_topic, CodecError,
    Envelope, FrameReadError, MAX_FRAME_LEN,
};
pub use inproc::{InProcBus, InProcClient};

use queue::DeliveryQueue;

/// Delivery policy of one subscription.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopicQos {
    /// Buffer at most N undelivered envelopes, dropping the oldest.
    KeepLast(usize),
    /// Deliver everything in order.
    Lossless,
}

impl TopicQos {
    pub fn keep_last(n: usize) -> Result<Self, BusError> {
        if n == 0 {
            return Err(BusError::InvalidQos("keep_last depth must be at least 1".into()));
        }
        Ok(TopicQos::KeepLast(n))
    }

    /// The policy that loses nothing either input would keep.
    pub(crate) fn merge(self, other: TopicQos) -> TopicQos {
        match (self, other) {
            (TopicQos::KeepLast(a), TopicQos::KeepLast(b)) => TopicQos::KeepLast(a.max(b)),
            _ => TopicQos::Lossless,
        }
    }
}

impl fmt::Display for TopicQos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopicQos::KeepLast(n) => write!(f, "keep_last({n})"),
            TopicQos::Lossless => f.write_str("lossless"),
        }
    }
}

impl FromStr for TopicQos {
    type Err = BusError;

    /// Accepts `lossless`, `keep_last` (depth 1) or `keep_last:N`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lossless" => Ok(TopicQos::Lossless),
            "keep_last" | "keep-last" => Ok(TopicQos::KeepLast(1)),
            _ => {
                let n = s
                    .strip_prefix("keep_last:")
                    .or_else(|| s.strip_prefix("keep-last:"))
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| BusError::InvalidQos(format!("unrecognised qos {s:?}")))?;
                TopicQos::keep_last(n)
            }
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum RecvError {
    #[error("subscription closed")]
    Closed,
    #[error("transport disconnected")]
    Disconnected,
    #[error("no envelope within the timeout")]
    Timeout,
    #[error("no envelope pending")]
    Empty,
}

#[derive(Debug, Error)]
pub enum BusError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid qos: {0}")]
    InvalidQos(String),
    #[error("transport disconnected")]
    Disconnected,
    #[error("cannot bind broker on {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("cannot reach broker at {addr} after {attempts} attempt(s): {source}")]
    Connect {
        addr: String,
        attempts: u32,
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A publish/subscribe endpoint. Each value is one publisher identity: it owns
/// the per-topic sequence counters of everything it publishes.
pub trait Transport: Send + Sync {
    /// Publishes `payload` on `topic`; returns the sequence number assigned.
    fn publish(&self, topic: &str, payload: &[u8], timestamp_ns: u64) -> Result<u64, BusError>;

    fn subscribe(&self, topic: &str, qos: TopicQos) -> Result<Subscription, BusError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn publish(&self, topic: &str, payload: &[u8], timestamp_ns: u64) -> Result<u64, BusError> {
        (**self).publish(topic, payload, timestamp_ns)
    }

    fn subscribe(&self, topic: &str, qos: TopicQos) -> Result<Subscription, BusError> {
        (**self).subscribe(topic, qos)
    }
}

/// Receiving end of one subscription. Dropping it closes it.
pub struct Subscription {
    topic: String,
    qos: TopicQos,
    queue: Arc<DeliveryQueue>,
    on_close: Option<Box<dyn FnOnce() + Send>>,
}

impl Subscription {
    pub(crate) fn new(
        topic: &str,
        qos: TopicQos,
        queue: Arc<DeliveryQueue>,
        on_close: Box<dyn FnOnce() + Send>,
    ) -> Self {
        Self {
            topic: topic.to_owned(),
            qos,
            queue,
            on_close: Some(on_close),
        }
    }

    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn qos(&self) -> TopicQos {
        self.qos
    }

    /// Blocks until an envelope arrives or the transport goes away.
    pub fn recv(&self) -> Result<Envelope, RecvError> {
        self.queue.pop(None)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Envelope, RecvError> {
        self.queue.pop(Some(timeout))
    }

    pub fn try_recv(&self) -> Result<Envelope, RecvError> {
        self.queue.try_pop()
    }

    /// Number of undelivered envelopes buffered for this handle.
    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(f) = self.on_close.take() {
            self.queue.close();
            f();
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl fmt::Debug for Subscription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Subscription")
            .field("topic", &self.topic)
            .field("qos", &self.qos)
            .field("pending", &self.queue.len())
            .finish()
    }
}

/// Per-topic publish counters of one publisher.
#[derive(Debug, Default)]
pub(crate) struct SeqCounters(Mutex<HashMap<String, u64>>);

impl SeqCounters {
    pub(crate) fn next(&self, topic: &str) -> u64 {
        let mut map = self.0.lock().unwrap();
        let slot = map.entry(topic.to_owned()).or_insert(0);
        let seq = *slot;
        *slot += 1;
        seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qos_parsing() {
        assert_eq!("lossless".parse::<TopicQos>().unwrap(), TopicQos::Lossless);
        assert_eq!("keep_last".parse::<TopicQos>().unwrap(), TopicQos::KeepLast(1));
        assert_eq!("keep_last:4".parse::<TopicQos>().unwrap(), TopicQos::KeepLast(4));
        assert!("keep_last:0".parse::<TopicQos>().is_err());
        assert!("bogus".parse::<TopicQos>().is_err());
        assert!(TopicQos::keep_last(0).is_err());
    }

    #[test]
    fn merge_prefers_the_less_lossy_policy() {
        assert_eq!(TopicQos::KeepLast(1).merge(TopicQos::KeepLast(3)), TopicQos::KeepLast(3));
        assert_eq!(TopicQos::KeepLast(1).merge(TopicQos::Lossless), TopicQos::Lossless);
    }
}
