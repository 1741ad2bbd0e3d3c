//! Named channels connecting the client, the task queue and the agent
//! components.
//!
//! A channel is either a queue (each message goes to exactly one consumer)
//! or a topic (each message goes to every subscriber present when it was
//! sent). Channels live in-process; a channel opened with the tcp transport
//! also gets a listening bridge, and the handle returned for it talks to the
//! bridge over a socket, so both transports run the same code paths above
//! the wire.

mod inproc;
mod tcp;
pub mod wire;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use inproc::Envelope;

pub const DEFAULT_CAPACITY: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Queue,
    Topic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcess,
    /// Listening address of the channel bridge, `host:port`. Port 0 picks a
    /// free port.
    Tcp(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("channel name is empty")]
    EmptyName,
    #[error("channel {0} is closed")]
    ChannelClosed(String),
    #[error("channel {name} already open as {existing:?}")]
    KindMismatch { name: String, existing: ChannelKind },
    #[error("channel {0} already open with another transport")]
    TransportMismatch(String),
    #[error("address {0} is in use")]
    AddressInUse(String),
    #[error("bad address {0}")]
    BadAddress(String),
    #[error("transport error: {0}")]
    Io(String),
    #[error("payload codec error: {0}")]
    Codec(String),
}

fn epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

/// Seconds since the first bus use in this process.
pub(crate) fn now_s() -> f64 {
    epoch().elapsed().as_secs_f64()
}

#[derive(Clone)]
enum Backend {
    Local(Arc<inproc::Inner>),
    /// Handle backed by a bridge socket; `owned` is set when this process
    /// also hosts the channel.
    Remote {
        client: Arc<tcp::RemoteClient>,
        owned: Option<(Arc<inproc::Inner>, Arc<tcp::Bridge>)>,
    },
}

/// Shareable channel handle.
#[derive(Clone)]
pub struct Channel {
    name: Arc<str>,
    kind: ChannelKind,
    transport: Transport,
    backend: Backend,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("transport", &self.transport)
            .finish()
    }
}

impl Channel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    /// Bound bridge address for tcp channels.
    pub fn local_addr(&self) -> Option<SocketAddr> {
        match &self.backend {
            Backend::Local(_) => None,
            Backend::Remote { client, .. } => Some(client.addr()),
        }
    }

    /// Enqueues `payloads` in order. Blocks while the channel is full.
    pub fn send(&self, payloads: Vec<Vec<u8>>) -> Result<(), BusError> {
        if self.is_closed() {
            return Err(BusError::ChannelClosed(self.name.to_string()));
        }
        if payloads.is_empty() {
            return Ok(());
        }
        match &self.backend {
            Backend::Local(inner) => inner.send(payloads, now_s()),
            Backend::Remote { client, .. } => client.send(payloads),
        }
    }

    pub fn send_one(&self, payload: Vec<u8>) -> Result<(), BusError> {
        self.send(vec![payload])
    }

    /// Encodes and sends a batch of typed messages.
    pub fn send_msgs<T: Serialize>(&self, msgs: &[T]) -> Result<(), BusError> {
        let payloads = msgs.iter().map(wire::encode).collect::<Result<Vec<_>, _>>()?;
        self.send(payloads)
    }

    pub fn send_msg<T: Serialize>(&self, msg: &T) -> Result<(), BusError> {
        self.send(vec![wire::encode(msg)?])
    }

    /// Registers a consumer (queue) or subscriber (topic).
    pub fn receiver(&self) -> Result<Receiver, BusError> {
        if self.is_closed() {
            return Err(BusError::ChannelClosed(self.name.to_string()));
        }
        let inner = match &self.backend {
            Backend::Local(inner) => ReceiverInner::Local(inner.subscribe()?),
            Backend::Remote { client, .. } => ReceiverInner::Remote(client.consumer()?),
        };
        Ok(Receiver {
            channel: self.name.clone(),
            inner,
        })
    }

    pub fn close(&self) {
        match &self.backend {
            Backend::Local(inner) => inner.close(),
            Backend::Remote { client, owned } => match owned {
                Some((inner, bridge)) => {
                    inner.close();
                    bridge.shutdown();
                }
                None => client.close(),
            },
        }
    }

    pub fn is_closed(&self) -> bool {
        match &self.backend {
            Backend::Local(inner) => inner.is_closed(),
            Backend::Remote { client, owned } => match owned {
                Some((inner, _)) => inner.is_closed(),
                None => client.is_closed(),
            },
        }
    }
}

enum ReceiverInner {
    Local(inproc::Consumer),
    Remote(tcp::RemoteConsumer),
}

/// Consumer or subscriber endpoint.
pub struct Receiver {
    channel: Arc<str>,
    inner: ReceiverInner,
}

impl Receiver {
    pub fn channel(&self) -> &str {
        &self.channel
    }

    /// Up to `max` messages, waiting at most `timeout` for the first one.
    /// An empty result means the timeout expired.
    pub fn receive(&mut self, max: usize, timeout: Duration) -> Result<Vec<Vec<u8>>, BusError> {
        Ok(self
            .receive_envelopes(max, timeout)?
            .into_iter()
            .map(|e| e.payload)
            .collect())
    }

    pub fn receive_envelopes(&mut self, max: usize, timeout: Duration) -> Result<Vec<Envelope>, BusError> {
        let max = max.max(1);
        match &mut self.inner {
            ReceiverInner::Local(c) => c.receive(max, timeout),
            ReceiverInner::Remote(c) => c.receive(max, timeout),
        }
    }

    pub fn recv_msgs<T: DeserializeOwned>(&mut self, max: usize, timeout: Duration) -> Result<Vec<T>, BusError> {
        self.receive(max, timeout)?
            .iter()
            .map(|p| wire::decode(p))
            .collect()
    }
}

/// Registry of named channels.
pub struct Bus {
    channels: Mutex<HashMap<String, Channel>>,
    capacity: usize,
}

impl Default for Bus {
    fn default() -> Self {
        Bus::new(DEFAULT_CAPACITY)
    }
}

impl Bus {
    pub fn new(capacity: usize) -> Self {
        epoch();
        Bus {
            channels: Mutex::new(HashMap::new()),
            capacity: capacity.max(1),
        }
    }

    pub fn open_channel(&self, name: &str, kind: ChannelKind, transport: Transport) -> Result<Channel, BusError> {
        self.open_with_capacity(name, kind, transport, self.capacity)
    }

    /// Opens or returns the channel `name`. Reopening with the same kind and
    /// transport yields the same logical channel.
    pub fn open_with_capacity(
        &self,
        name: &str,
        kind: ChannelKind,
        transport: Transport,
        capacity: usize,
    ) -> Result<Channel, BusError> {
        if name.trim().is_empty() {
            return Err(BusError::EmptyName);
        }
        let mut map = self.channels.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(ch) = map.get(name) {
            if ch.kind != kind {
                return Err(BusError::KindMismatch {
                    name: name.to_string(),
                    existing: ch.kind,
                });
            }
            let same = match (&ch.transport, &transport) {
                (Transport::InProcess, Transport::InProcess) => true,
                (Transport::Tcp(a), Transport::Tcp(b)) => {
                    a == b || ch.local_addr().map(|x| x.to_string()).as_deref() == Some(b.as_str())
                }
                _ => false,
            };
            if !same {
                return Err(BusError::TransportMismatch(name.to_string()));
            }
            return Ok(ch.clone());
        }
        let inner = Arc::new(inproc::Inner::new(name, kind, capacity.max(1)));
        let backend = match &transport {
            Transport::InProcess => Backend::Local(inner),
            Transport::Tcp(addr) => {
                let bridge = tcp::Bridge::start(addr, Arc::clone(&inner))?;
                let client = Arc::new(tcp::RemoteClient::new(bridge.addr(), name, kind));
                Backend::Remote {
                    client,
                    owned: Some((inner, bridge)),
                }
            }
        };
        let ch = Channel {
            name: Arc::from(name),
            kind,
            transport,
            backend,
        };
        map.insert(name.to_string(), ch.clone());
        Ok(ch)
    }

    /// Handle for a channel hosted by a bridge at `addr`, possibly in
    /// another process.
    pub fn connect(name: &str, kind: ChannelKind, addr: SocketAddr) -> Channel {
        Channel {
            name: Arc::from(name),
            kind,
            transport: Transport::Tcp(addr.to_string()),
            backend: Backend::Remote {
                client: Arc::new(tcp::RemoteClient::new(addr, name, kind)),
                owned: None,
            },
        }
    }

    pub fn get(&self, name: &str) -> Option<Channel> {
        self.channels
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(name)
            .cloned()
    }

    /// Closes every channel.
    pub fn close_all(&self) {
        let chans: Vec<Channel> = self
            .channels
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect();
        for ch in chans {
            ch.close();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: Duration = Duration::from_millis(0);
    const T1: Duration = Duration::from_millis(200);

    fn transports() -> Vec<Transport> {
        vec![Transport::InProcess, Transport::Tcp("127.0.0.1:0".into())]
    }

    #[test]
    fn round_trip_and_bulk_order() {
        for t in transports() {
            let bus = Bus::default();
            let ch = bus.open_channel("agent.scheduler.in", ChannelKind::Queue, t).unwrap();
            let mut rx = ch.receiver().unwrap();
            ch.send_one(b"hello".to_vec()).unwrap();
            assert_eq!(rx.receive(10, T1).unwrap(), vec![b"hello".to_vec()]);
            let bulk: Vec<Vec<u8>> = (0..1024u32).map(|i| i.to_le_bytes().to_vec()).collect();
            ch.send(bulk.clone()).unwrap();
            let mut got = Vec::new();
            while got.len() < 1024 {
                got.extend(rx.receive(4096, T1).unwrap());
            }
            assert_eq!(got, bulk);
            ch.close();
        }
    }

    #[test]
    fn reopen_is_idempotent_and_kind_checked() {
        let bus = Bus::default();
        let a = bus.open_channel("x", ChannelKind::Queue, Transport::InProcess).unwrap();
        let b = bus.open_channel("x", ChannelKind::Queue, Transport::InProcess).unwrap();
        let mut rx = a.receiver().unwrap();
        b.send_one(vec![1]).unwrap();
        assert_eq!(rx.receive(1, T1).unwrap(), vec![vec![1]]);
        assert!(matches!(
            bus.open_channel("x", ChannelKind::Topic, Transport::InProcess),
            Err(BusError::KindMismatch { .. })
        ));
        assert_eq!(bus.open_channel("", ChannelKind::Queue, Transport::InProcess).unwrap_err(), BusError::EmptyName);
    }

    #[test]
    fn closed_channel_rejects() {
        for t in transports() {
            let bus = Bus::default();
            let ch = bus.open_channel("c", ChannelKind::Queue, t).unwrap();
            let mut rx = ch.receiver().unwrap();
            ch.close();
            assert!(matches!(ch.send_one(vec![0]), Err(BusError::ChannelClosed(_))));
            assert!(matches!(rx.receive(1, T1), Err(BusError::ChannelClosed(_))));
        }
    }

    #[test]
    fn empty_timeout_returns_nothing() {
        for t in transports() {
            let bus = Bus::default();
            let ch = bus.open_channel("e", ChannelKind::Queue, t).unwrap();
            let mut rx = ch.receiver().unwrap();
            assert!(rx.receive(5, T0).unwrap().is_empty());
            assert!(rx.receive(5, Duration::from_millis(20)).unwrap().is_empty());
        }
    }

    #[test]
    fn address_in_use() {
        let bus = Bus::default();
        let a = bus
            .open_channel("a", ChannelKind::Queue, Transport::Tcp("127.0.0.1:0".into()))
            .unwrap();
        let addr = a.local_addr().unwrap().to_string();
        let err = bus.open_channel("b", ChannelKind::Queue, Transport::Tcp(addr)).unwrap_err();
        assert!(matches!(err, BusError::AddressInUse(_)));
    }

    #[test]
    fn typed_messages() {
        let bus = Bus::default();
        let ch = bus.open_channel("typed", ChannelKind::Topic, Transport::InProcess).unwrap();
        let mut rx = ch.receiver().unwrap();
        ch.send_msgs(&[("a".to_string(), 1u32), ("b".to_string(), 2)]).unwrap();
        let got: Vec<(String, u32)> = rx.recv_msgs(10, T1).unwrap();
        assert_eq!(got, vec![("a".into(), 1), ("b".into(), 2)]);
    }

    #[test]
    fn envelope_metadata() {
        let bus = Bus::default();
        let ch = bus.open_channel("env", ChannelKind::Queue, Transport::InProcess).unwrap();
        let mut rx = ch.receiver().unwrap();
        ch.send(vec![vec![1], vec![2], vec![3]]).unwrap();
        let env = rx.receive_envelopes(10, T1).unwrap();
        assert_eq!(env.len(), 3);
        assert!(env.iter().all(|e| e.bulk_count == 3 && &*e.channel == "env" && e.sent_at >= 0.0));
    }
}
