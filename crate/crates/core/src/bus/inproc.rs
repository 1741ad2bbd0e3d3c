use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{bounded, select, Receiver, Sender, TryRecvError, TrySendError};

use super::{BusError, ChannelKind};

/// A delivered message with its channel metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub channel: Arc<str>,
    pub payload: Vec<u8>,
    /// Size of the bulk send this message was part of.
    pub bulk_count: u32,
    /// Bus seconds at send time.
    pub sent_at: f64,
}

pub(crate) struct Inner {
    name: Arc<str>,
    kind: ChannelKind,
    capacity: usize,
    closed: AtomicBool,
    close_tx: Mutex<Option<Sender<()>>>,
    close_rx: Receiver<()>,
    queue: (Sender<Envelope>, Receiver<Envelope>),
    subscribers: Mutex<Vec<Sender<Envelope>>>,
}

impl Inner {
    pub(crate) fn new(name: &str, kind: ChannelKind, capacity: usize) -> Self {
        let (close_tx, close_rx) = bounded(0);
        let queue = match kind {
            ChannelKind::Queue => bounded(capacity),
            ChannelKind::Topic => bounded(0),
        };
        Inner {
            name: Arc::from(name),
            kind,
            capacity,
            closed: AtomicBool::new(false),
            close_tx: Mutex::new(Some(close_tx)),
            close_rx,
            queue,
            subscribers: Mutex::new(Vec::new()),
        }
    }

    pub(crate) fn name(&self) -> &str {
        &self.name
    }

    pub(crate) fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub(crate) fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    pub(crate) fn close(&self) {
        self.closed.store(true, Ordering::Release);
        // dropping the only sender wakes everything selecting on close_rx
        self.close_tx.lock().unwrap_or_else(|e| e.into_inner()).take();
    }

    fn closed_err(&self) -> BusError {
        BusError::ChannelClosed(self.name.to_string())
    }

    fn push(&self, tx: &Sender<Envelope>, env: Envelope) -> Result<(), Option<BusError>> {
        match tx.try_send(env) {
            Ok(()) => Ok(()),
            Err(TrySendError::Disconnected(_)) => Err(None),
            Err(TrySendError::Full(env)) => select! {
                send(tx, env) -> r => r.map_err(|_| None),
                recv(self.close_rx) -> _ => Err(Some(self.closed_err())),
            },
        }
    }

    pub(crate) fn send(&self, payloads: Vec<Vec<u8>>, sent_at: f64) -> Result<(), BusError> {
        if self.is_closed() {
            return Err(self.closed_err());
        }
        let bulk_count = payloads.len() as u32;
        match self.kind {
            ChannelKind::Queue => {
                for payload in payloads {
                    let env = Envelope {
                        channel: Arc::clone(&self.name),
                        payload,
                        bulk_count,
                        sent_at,
                    };
                    self.push(&self.queue.0, env)
                        .map_err(|e| e.unwrap_or_else(|| self.closed_err()))?;
                }
            }
            ChannelKind::Topic => {
                let mut subs = self.subscribers.lock().unwrap_or_else(|e| e.into_inner());
                let mut dead = vec![false; subs.len()];
                for payload in payloads {
                    for (i, tx) in subs.iter().enumerate() {
                        if dead[i] {
                            continue;
                        }
                        let env = Envelope {
                            channel: Arc::clone(&self.name),
                            payload: payload.clone(),
                            bulk_count,
                            sent_at,
                        };
                        match self.push(tx, env) {
                            Ok(()) => {}
                            Err(None) => dead[i] = true,
                            Err(Some(e)) => return Err(e),
                        }
                    }
                }
                let mut i = 0;
                subs.retain(|_| {
                    i += 1;
                    !dead[i - 1]
                });
            }
        }
        Ok(())
    }

    pub(crate) fn subscribe(&self) -> Result<Consumer, BusError> {
        if self.is_closed() {
            return Err(self.closed_err());
        }
        let rx = match self.kind {
            ChannelKind::Queue => self.queue.1.clone(),
            ChannelKind::Topic => {
                let (tx, rx) = bounded(self.capacity);
                self.subscribers.lock().unwrap_or_else(|e| e.into_inner()).push(tx);
                rx
            }
        };
        Ok(Consumer {
            name: Arc::clone(&self.name),
            rx,
            close_rx: self.close_rx.clone(),
        })
    }
}

pub(crate) struct Consumer {
    name: Arc<str>,
    rx: Receiver<Envelope>,
    close_rx: Receiver<()>,
}

impl Consumer {
    fn closed(&self) -> BusError {
        BusError::ChannelClosed(self.name.to_string())
    }

    fn is_closed(&self) -> bool {
        matches!(self.close_rx.try_recv(), Err(TryRecvError::Disconnected))
    }

    pub(crate) fn receive(&mut self, max: usize, timeout: Duration) -> Result<Vec<Envelope>, BusError> {
        let mut out = Vec::new();
        match self.rx.try_recv() {
            Ok(e) => out.push(e),
            Err(TryRecvError::Disconnected) => return Err(self.closed()),
            Err(TryRecvError::Empty) => {
                if self.is_closed() {
                    return Err(self.closed());
                }
                if timeout.is_zero() {
                    return Ok(out);
                }
                select! {
                    recv(self.rx) -> m => match m {
                        Ok(e) => out.push(e),
                        Err(_) => return Err(self.closed()),
                    },
                    recv(self.close_rx) -> _ => match self.rx.try_recv() {
                        Ok(e) => out.push(e),
                        Err(_) => return Err(self.closed()),
                    },
                    default(timeout) => return Ok(out),
                }
            }
        }
        while out.len() < max {
            match self.rx.try_recv() {
                Ok(e) => out.push(e),
                Err(_) => break,
            }
        }
        Ok(out)
    }
}
