use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::inproc::{Envelope, Inner};
use super::wire::{read_frame, write_frame, Frame, Role};
use super::{BusError, ChannelKind};

/// Listening side: serves one in-process channel to socket clients.
pub(crate) struct Bridge {
    addr: SocketAddr,
    stop: AtomicBool,
}

impl Bridge {
    pub(crate) fn start(addr: &str, inner: Arc<Inner>) -> Result<Arc<Bridge>, BusError> {
        let target = addr
            .to_socket_addrs()
            .map_err(|_| BusError::BadAddress(addr.to_string()))?
            .next()
            .ok_or_else(|| BusError::BadAddress(addr.to_string()))?;
        let listener = TcpListener::bind(target).map_err(|e| match e.kind() {
            io::ErrorKind::AddrInUse => BusError::AddressInUse(addr.to_string()),
            _ => BusError::Io(e.to_string()),
        })?;
        let local = listener.local_addr().map_err(|e| BusError::Io(e.to_string()))?;
        let bridge = Arc::new(Bridge {
            addr: local,
            stop: AtomicBool::new(false),
        });
        let b = Arc::clone(&bridge);
        thread::Builder::new()
            .name(format!("bridge-{}", inner.name()))
            .spawn(move || {
                for stream in listener.incoming() {
                    if b.stop.load(Ordering::Acquire) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let inner = Arc::clone(&inner);
                    let _ = thread::Builder::new()
                        .name(format!("bridge-conn-{}", inner.name()))
                        .spawn(move || {
                            if let Err(e) = serve(stream, &inner) {
                                if e.kind() != io::ErrorKind::UnexpectedEof {
                                    log::debug!("bridge {}: {e}", inner.name());
                                }
                            }
                        });
                }
            })
            .map_err(|e| BusError::Io(e.to_string()))?;
        Ok(bridge)
    }

    pub(crate) fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub(crate) fn shutdown(&self) {
        if !self.stop.swap(true, Ordering::AcqRel) {
            // wake the accept loop
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        }
    }
}

fn serve(stream: TcpStream, inner: &Inner) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let (channel, kind, role) = match read_frame(&mut reader)? {
        Frame::Hello { channel, kind, role } => (channel, kind, role),
        other => {
            write_frame(&mut writer, &Frame::Error(format!("expected hello, got {other:?}")))?;
            return Ok(());
        }
    };
    if channel != inner.name() || kind != inner.kind() {
        write_frame(
            &mut writer,
            &Frame::Error(format!("bridge serves {} ({:?})", inner.name(), inner.kind())),
        )?;
        return Ok(());
    }
    match role {
        Role::Producer => loop {
            let reply = match read_frame(&mut reader)? {
                Frame::SendBulk { payloads } => match inner.send(payloads, super::now_s()) {
                    Ok(()) => Frame::Ack,
                    Err(BusError::ChannelClosed(_)) => Frame::Closed,
                    Err(e) => Frame::Error(e.to_string()),
                },
                Frame::Close => {
                    inner.close();
                    Frame::Ack
                }
                other => Frame::Error(format!("unexpected frame {other:?}")),
            };
            write_frame(&mut writer, &reply)?;
        },
        Role::Consumer => {
            let mut consumer = match inner.subscribe() {
                Ok(c) => c,
                Err(_) => return write_frame(&mut writer, &Frame::Closed),
            };
            write_frame(&mut writer, &Frame::Ack)?;
            loop {
                let reply = match read_frame(&mut reader)? {
                    Frame::Request { max, timeout_ms } => {
                        match consumer.receive(max.max(1) as usize, Duration::from_millis(timeout_ms)) {
                            Ok(envs) => Frame::Batch {
                                payloads: envs.into_iter().map(|e| (e.payload, e.bulk_count, e.sent_at)).collect(),
                            },
                            Err(_) => Frame::Closed,
                        }
                    }
                    other => Frame::Error(format!("unexpected frame {other:?}")),
                };
                write_frame(&mut writer, &reply)?;
            }
        }
    }
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Conn {
    fn open(addr: SocketAddr, channel: &str, kind: ChannelKind, role: Role) -> io::Result<Conn> {
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))?;
        stream.set_nodelay(true)?;
        let mut conn = Conn {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        };
        write_frame(
            &mut conn.writer,
            &Frame::Hello {
                channel: channel.to_string(),
                kind,
                role,
            },
        )?;
        Ok(conn)
    }

    fn call(&mut self, frame: &Frame) -> io::Result<Frame> {
        write_frame(&mut self.writer, frame)?;
        read_frame(&mut self.reader)
    }
}

/// Client side of a bridge.
pub(crate) struct RemoteClient {
    addr: SocketAddr,
    name: Arc<str>,
    kind: ChannelKind,
    producer: Mutex<Option<Conn>>,
    closed: AtomicBool,
}

impl RemoteClient {
    pub(crate) fn new(addr: SocketAddr, name: &str, kind: ChannelKind) -> Self {
        RemoteClient {
            addr,
            name: Arc::from(name),
            kind,
            producer: Mutex::new(None),
            closed: AtomicBool::new(false),
        }
    }

    pub(crate) fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub(crate) fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    fn closed_err(&self) -> BusError {
        BusError::ChannelClosed(self.name.to_string())
    }

    fn with_producer(&self, frame: &Frame) -> Result<Frame, BusError> {
        let mut guard = self.producer.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            let conn = Conn::open(self.addr, &self.name, self.kind, Role::Producer)
                .map_err(|e| BusError::Io(e.to_string()))?;
            *guard = Some(conn);
        }
        let conn = guard.as_mut().expect("connected above");
        match conn.call(frame) {
            Ok(reply) => Ok(reply),
            Err(e) => {
                *guard = None;
                Err(BusError::Io(e.to_string()))
            }
        }
    }

    pub(crate) fn send(&self, payloads: Vec<Vec<u8>>) -> Result<(), BusError> {
        if self.is_closed() {
            return Err(self.closed_err());
        }
        match self.with_producer(&Frame::SendBulk { payloads })? {
            Frame::Ack => Ok(()),
            Frame::Closed => {
                self.closed.store(true, Ordering::Release);
                Err(self.closed_err())
            }
            Frame::Error(e) => Err(BusError::Io(e)),
            other => Err(BusError::Io(format!("unexpected reply {other:?}"))),
        }
    }

    pub(crate) fn close(&self) {
        if !self.closed.swap(true, Ordering::AcqRel) {
            let _ = self.with_producer(&Frame::Close);
        }
    }

    pub(crate) fn consumer(&self) -> Result<RemoteConsumer, BusError> {
        if self.is_closed() {
            return Err(self.closed_err());
        }
        let mut conn = Conn::open(self.addr, &self.name, self.kind, Role::Consumer)
            .map_err(|e| BusError::Io(e.to_string()))?;
        match read_frame(&mut conn.reader).map_err(|e| BusError::Io(e.to_string()))? {
            Frame::Ack => Ok(RemoteConsumer {
                name: Arc::clone(&self.name),
                conn,
            }),
            Frame::Closed => Err(self.closed_err()),
            other => Err(BusError::Io(format!("unexpected reply {other:?}"))),
        }
    }
}

pub(crate) struct RemoteConsumer {
    name: Arc<str>,
    conn: Conn,
}

impl RemoteConsumer {
    pub(crate) fn receive(&mut self, max: usize, timeout: Duration) -> Result<Vec<Envelope>, BusError> {
        let req = Frame::Request {
            max: max.min(u32::MAX as usize) as u32,
            timeout_ms: timeout.as_millis().min(u64::MAX as u128) as u64,
        };
        match self.conn.call(&req).map_err(|e| BusError::Io(e.to_string()))? {
            Frame::Batch { payloads } => Ok(payloads
                .into_iter()
                .map(|(payload, bulk_count, sent_at)| Envelope {
                    channel: Arc::clone(&self.name),
                    payload,
                    bulk_count,
                    sent_at,
                })
                .collect()),
            Frame::Closed => Err(BusError::ChannelClosed(self.name.to_string())),
            Frame::Error(e) => Err(BusError::Io(e)),
            other => Err(BusError::Io(format!("unexpected reply {other:?}"))),
        }
    }
}
