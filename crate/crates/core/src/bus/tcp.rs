//! Broker-mediated TCP transport.
//!
//! Every frame on the wire is an [`Envelope`] in the standard framing. Topics
//! starting with `$` are reserved for control traffic between clients and the
//! broker:
//!
//! | topic       | direction        | payload                                             |
//! |-------------|------------------|-----------------------------------------------------|
//! | `$sub`      | client → broker  | `u64 sub_id, u8 qos_kind, u32 depth, topic bytes`   |
//! | `$unsub`    | client → broker  | `u64 sub_id, topic bytes`                           |
//! | `$retained` | broker → client  | `u64 sub_id, encoded envelope`                      |
//!
//! `qos_kind` is 0 for lossless and 1 for keep-last. A malformed frame from a
//! client drops that connection; the broker keeps serving everyone else.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tracing::{debug, info, warn};

use super::queue::DeliveryQueue;
use super::{
    decode_envelope, encode_envelope, read_frame, validate_topic, BusError, CodecError, Envelope,
    SeqCounters, Subscription, TopicQos, Transport,
};

const SUB_TOPIC: &str = "$sub";
const UNSUB_TOPIC: &str = "$unsub";
const RETAINED_TOPIC: &str = "$retained";

fn encode_sub(sub_id: u64, qos: TopicQos, topic: &str) -> Vec<u8> {
    let mut p = sub_id.to_be_bytes().to_vec();
    match qos {
        TopicQos::Lossless => {
            p.push(0);
            p.extend_from_slice(&0u32.to_be_bytes());
        }
        TopicQos::KeepLast(n) => {
            p.push(1);
            p.extend_from_slice(&(n.min(u32::MAX as usize) as u32).to_be_bytes());
        }
    }
    p.extend_from_slice(topic.as_bytes());
    p
}

fn decode_sub(p: &[u8]) -> Result<(u64, TopicQos, String), CodecError> {
    if p.len() < 13 {
        return Err(CodecError::Truncated {
            field: "subscribe request",
        });
    }
    let id = u64::from_be_bytes(p[..8].try_into().unwrap());
    let depth = u32::from_be_bytes(p[9..13].try_into().unwrap()) as usize;
    let qos = match (p[8], depth) {
        (0, _) => TopicQos::Lossless,
        (1, n) if n >= 1 => TopicQos::KeepLast(n),
        _ => return Err(CodecError::InvalidTopic { reason: "bad qos in subscribe request" }),
    };
    let topic = topic_from(&p[13..])?;
    Ok((id, qos, topic))
}

fn decode_unsub(p: &[u8]) -> Result<(u64, String), CodecError> {
    if p.len() < 8 {
        return Err(CodecError::Truncated {
            field: "unsubscribe request",
        });
    }
    Ok((u64::from_be_bytes(p[..8].try_into().unwrap()), topic_from(&p[8..])?))
}

fn topic_from(bytes: &[u8]) -> Result<String, CodecError> {
    let t = std::str::from_utf8(bytes)
        .map_err(|_| CodecError::InvalidTopic { reason: "not valid UTF-8" })?;
    validate_topic(t)?;
    Ok(t.to_owned())
}

#[derive(Default)]
struct BrokerState {
    next_conn: u64,
    conns: HashMap<u64, Arc<DeliveryQueue>>,
    /// topic → connection → subscription id → qos
    subs: HashMap<String, HashMap<u64, HashMap<u64, TopicQos>>>,
    retained: HashMap<String, Envelope>,
}

impl BrokerState {
    fn refresh_policy(&self, conn: u64, topic: &str) {
        let Some(outbox) = self.conns.get(&conn) else { return };
        if let Some(qos) = self
            .subs
            .get(topic)
            .and_then(|m| m.get(&conn))
            .and_then(|ids| ids.values().copied().reduce(TopicQos::merge))
        {
            outbox.set_policy(topic, qos);
        }
    }

    fn drop_conn(&mut self, conn: u64) {
        if let Some(outbox) = self.conns.remove(&conn) {
            outbox.close();
        }
        self.subs.retain(|_, by_conn| {
            by_conn.remove(&conn);
            !by_conn.is_empty()
        });
    }
}

/// TCP broker: the hub of the star topology.
pub struct Broker {
    listener: TcpListener,
    addr: SocketAddr,
    state: Arc<Mutex<BrokerState>>,
    stop: Arc<AtomicBool>,
}

impl Broker {
    pub fn bind(addr: &str) -> Result<Self, BusError> {
        let listener = TcpListener::bind(addr).map_err(|source| BusError::Bind {
            addr: addr.to_owned(),
            source,
        })?;
        let addr = listener.local_addr()?;
        Ok(Self {
            listener,
            addr,
            state: Arc::default(),
            stop: Arc::default(),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Accepts connections until [`BrokerHandle::shutdown`] is called.
    pub fn serve(self) -> Result<(), BusError> {
        info!(addr = %self.addr, "broker listening");
        for incoming in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match incoming {
                Ok(s) => s,
                Err(e) => {
                    warn!(error = %e, "accept failed");
                    continue;
                }
            };
            if let Err(e) = self.spawn_connection(stream) {
                warn!(error = %e, "could not start connection");
            }
        }
        let mut st = self.state.lock().unwrap();
        let conns: Vec<u64> = st.conns.keys().copied().collect();
        for c in conns {
            st.drop_conn(c);
        }
        Ok(())
    }

    /// Runs the broker on a background thread.
    pub fn spawn(self) -> BrokerHandle {
        let addr = self.addr;
        let stop = self.stop.clone();
        let thread = thread::Builder::new()
            .name("broker".into())
            .spawn(move || {
                if let Err(e) = self.serve() {
                    warn!(error = %e, "broker stopped with error");
                }
            })
            .expect("spawn broker thread");
        BrokerHandle {
            addr,
            stop,
            thread: Some(thread),
        }
    }

    fn spawn_connection(&self, stream: TcpStream) -> std::io::Result<()> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr().ok();
        let mut writer = stream.try_clone()?;
        let reader = stream;
        let outbox = Arc::new(DeliveryQueue::default());
        let conn = {
            let mut st = self.state.lock().unwrap();
            let id = st.next_conn;
            st.next_conn += 1;
            st.conns.insert(id, outbox.clone());
            id
        };
        debug!(conn, ?peer, "client connected");

        thread::Builder::new()
            .name(format!("broker-tx-{conn}"))
            .spawn(move || {
                while let Ok(env) = outbox.pop(None) {
                    let frame = match encode_envelope(&env) {
                        Ok(f) => f,
                        Err(e) => {
                            warn!(conn, error = %e, "dropping unencodable envelope");
                            continue;
                        }
                    };
                    if writer.write_all(&frame).is_err() {
                        break;
                    }
                }
                let _ = writer.shutdown(Shutdown::Both);
            })?;

        let state = self.state.clone();
        thread::Builder::new()
            .name(format!("broker-rx-{conn}"))
            .spawn(move || {
                let mut r = BufReader::new(reader.try_clone().expect("clone stream"));
                loop {
                    let env = match read_frame(&mut r) {
                        Ok(env) => env,
                        Err(super::FrameReadError::Eof) => {
                            debug!(conn, "client disconnected");
                            break;
                        }
                        Err(e) => {
                            warn!(conn, error = %e, "dropping connection");
                            break;
                        }
                    };
                    if let Err(e) = handle_client_frame(&state, conn, env) {
                        warn!(conn, error = %e, "malformed control frame, dropping connection");
                        break;
                    }
                }
                state.lock().unwrap().drop_conn(conn);
                let _ = reader.shutdown(Shutdown::Both);
            })?;
        Ok(())
    }
}

fn handle_client_frame(
    state: &Mutex<BrokerState>,
    conn: u64,
    env: Envelope,
) -> Result<(), CodecError> {
    let mut st = state.lock().unwrap();
    match env.topic.as_str() {
        SUB_TOPIC => {
            let (id, qos, topic) = decode_sub(&env.payload)?;
            st.subs
                .entry(topic.clone())
                .or_default()
                .entry(conn)
                .or_default()
                .insert(id, qos);
            st.refresh_policy(conn, &topic);
            if matches!(qos, TopicQos::KeepLast(_)) {
                if let (Some(retained), Some(outbox)) = (st.retained.get(&topic), st.conns.get(&conn)) {
                    let mut payload = id.to_be_bytes().to_vec();
                    payload.extend_from_slice(&encode_envelope(retained)?);
                    outbox.push(Envelope::new(RETAINED_TOPIC, 0, retained.timestamp_ns, payload));
                }
            }
        }
        UNSUB_TOPIC => {
            let (id, topic) = decode_unsub(&env.payload)?;
            let mut emptied = false;
            if let Some(by_conn) = st.subs.get_mut(&topic) {
                if let Some(ids) = by_conn.get_mut(&conn) {
                    ids.remove(&id);
                    if ids.is_empty() {
                        by_conn.remove(&conn);
                    }
                }
                emptied = by_conn.is_empty();
            }
            if emptied {
                st.subs.remove(&topic);
            }
            st.refresh_policy(conn, &topic);
        }
        t if t.starts_with('$') => {
            return Err(CodecError::InvalidTopic {
                reason: "unknown control topic",
            })
        }
        _ => {
            if let Some(by_conn) = st.subs.get(&env.topic) {
                for c in by_conn.keys() {
                    if let Some(outbox) = st.conns.get(c) {
                        outbox.push(env.clone());
                    }
                }
            }
            st.retained.insert(env.topic.clone(), env);
        }
    }
    Ok(())
}

/// Control handle of a broker running on a background thread.
pub struct BrokerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        if let Some(t) = self.thread.take() {
            self.stop.store(true, Ordering::SeqCst);
            // Wake the blocking accept.
            let _ = TcpStream::connect(self.addr);
            let _ = t.join();
        }
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

/// Reconnect policy: `attempts` tries with exponential backoff between them.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 10,
            initial_backoff: Duration::from_millis(50),
            max_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn once() -> Self {
        Self {
            attempts: 1,
            ..Self::default()
        }
    }
}

type LocalSubs = Arc<Mutex<HashMap<String, Vec<(u64, Arc<DeliveryQueue>)>>>>;

struct ClientInner {
    writer: Mutex<TcpStream>,
    seqs: SeqCounters,
    subs: LocalSubs,
    alive: Arc<AtomicBool>,
    next_id: AtomicU64,
}

impl ClientInner {
    fn send(&self, env: &Envelope) -> Result<(), BusError> {
        let frame = encode_envelope(env)?;
        self.write_frame(&frame)
    }

    fn write_frame(&self, frame: &[u8]) -> Result<(), BusError> {
        if !self.alive.load(Ordering::SeqCst) {
            return Err(BusError::Disconnected);
        }
        let mut w = self.writer.lock().unwrap();
        w.write_all(frame).map_err(|_| {
            self.alive.store(false, Ordering::SeqCst);
            BusError::Disconnected
        })
    }
}

impl Drop for ClientInner {
    fn drop(&mut self) {
        if let Ok(w) = self.writer.lock() {
            let _ = w.shutdown(Shutdown::Both);
        }
    }
}

/// A node's connection to the broker. Clones share the connection and the
/// publisher identity.
#[derive(Clone)]
pub struct TcpClient {
    inner: Arc<ClientInner>,
}

impl TcpClient {
    pub fn connect(addr: &str) -> Result<Self, BusError> {
        Self::connect_with_retry(addr, RetryPolicy::once())
    }

    pub fn connect_with_retry(addr: &str, policy: RetryPolicy) -> Result<Self, BusError> {
        let mut backoff = policy.initial_backoff;
        let mut last_err = None;
        let attempts = policy.attempts.max(1);
        for attempt in 1..=attempts {
            match addr.to_socket_addrs().and_then(|mut it| {
                it.next()
                    .ok_or_else(|| std::io::Error::other("address resolved to nothing"))
                    .and_then(TcpStream::connect)
            }) {
                Ok(stream) => return Self::from_stream(stream),
                Err(e) => {
                    debug!(addr, attempt, error = %e, "broker connect failed");
                    last_err = Some(e);
                    if attempt < attempts {
                        thread::sleep(backoff);
                        backoff = (backoff * 2).min(policy.max_backoff);
                    }
                }
            }
        }
        Err(BusError::Connect {
            addr: addr.to_owned(),
            attempts,
            source: last_err.expect("at least one attempt"),
        })
    }

    fn from_stream(stream: TcpStream) -> Result<Self, BusError> {
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let subs: LocalSubs = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        {
            let subs = subs.clone();
            let alive = alive.clone();
            thread::Builder::new()
                .name("bus-client-rx".into())
                .spawn(move || client_reader(reader, subs, alive))?;
        }
        Ok(Self {
            inner: Arc::new(ClientInner {
                writer: Mutex::new(stream),
                seqs: SeqCounters::default(),
                subs,
                alive,
                next_id: AtomicU64::new(0),
            }),
        })
    }

    pub fn is_connected(&self) -> bool {
        self.inner.alive.load(Ordering::SeqCst)
    }
}

fn client_reader(stream: TcpStream, subs: LocalSubs, alive: Arc<AtomicBool>) {
    let mut r = BufReader::new(stream);
    loop {
        let env = match read_frame(&mut r) {
            Ok(e) => e,
            Err(e) => {
                debug!(error = %e, "broker connection ended");
                break;
            }
        };
        if env.topic == RETAINED_TOPIC {
            if env.payload.len() < 8 {
                warn!("short retained frame from broker");
                continue;
            }
            let id = u64::from_be_bytes(env.payload[..8].try_into().unwrap());
            let Ok(inner) = decode_envelope(&env.payload[8..]) else {
                warn!("corrupt retained frame from broker");
                continue;
            };
            let map = subs.lock().unwrap();
            if let Some(q) = map
                .get(&inner.topic)
                .and_then(|l| l.iter().find(|(i, _)| *i == id))
                .map(|(_, q)| q)
            {
                q.push(inner);
            }
            continue;
        }
        let map = subs.lock().unwrap();
        if let Some(list) = map.get(&env.topic) {
            for (_, q) in list {
                q.push(env.clone());
            }
        }
    }
    alive.store(false, Ordering::SeqCst);
    for list in subs.lock().unwrap().values() {
        for (_, q) in list {
            q.disconnect();
        }
    }
}

impl Transport for TcpClient {
    fn publish(&self, topic: &str, payload: &[u8], timestamp_ns: u64) -> Result<u64, BusError> {
        validate_topic(topic)?;
        if topic.starts_with('$') {
            return Err(CodecError::InvalidTopic {
                reason: "topics starting with '$' are reserved",
            }
            .into());
        }
        if !self.is_connected() {
            return Err(BusError::Disconnected);
        }
        // Hold the writer lock across seq assignment so frames leave in seq order.
        let mut w = self.inner.writer.lock().unwrap();
        let seq = self.inner.seqs.next(topic);
        let frame = encode_envelope(&Envelope::new(topic, seq, timestamp_ns, payload.to_vec()))?;
        w.write_all(&frame).map_err(|_| {
            self.inner.alive.store(false, Ordering::SeqCst);
            BusError::Disconnected
        })?;
        Ok(seq)
    }

    fn subscribe(&self, topic: &str, qos: TopicQos) -> Result<Subscription, BusError> {
        validate_topic(topic)?;
        if qos == TopicQos::KeepLast(0) {
            return Err(BusError::InvalidQos("keep_last depth must be at least 1".into()));
        }
        if !self.is_connected() {
            return Err(BusError::Disconnected);
        }
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let queue = Arc::new(DeliveryQueue::with_policy(topic, qos));
        self.inner
            .subs
            .lock()
            .unwrap()
            .entry(topic.to_owned())
            .or_default()
            .push((id, queue.clone()));
        let req = Envelope::new(SUB_TOPIC, 0, 0, encode_sub(id, qos, topic));
        if let Err(e) = self.inner.send(&req) {
            remove_local(&self.inner.subs, topic, id);
            return Err(e);
        }

        let weak: Weak<ClientInner> = Arc::downgrade(&self.inner);
        let owned_topic = topic.to_owned();
        Ok(Subscription::new(
            topic,
            qos,
            queue,
            Box::new(move || {
                if let Some(inner) = weak.upgrade() {
                    remove_local(&inner.subs, &owned_topic, id);
                    let mut p = id.to_be_bytes().to_vec();
                    p.extend_from_slice(owned_topic.as_bytes());
                    let _ = inner.send(&Envelope::new(UNSUB_TOPIC, 0, 0, p));
                }
            }),
        ))
    }
}

fn remove_local(subs: &LocalSubs, topic: &str, id: u64) {
    let mut map = subs.lock().unwrap();
    if let Some(list) = map.get_mut(topic) {
        list.retain(|(i, _)| *i != id);
        if list.is_empty() {
            map.remove(topic);
        }
    }
}
