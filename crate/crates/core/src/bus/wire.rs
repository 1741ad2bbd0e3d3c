//! Payload encoding and tcp framing.
//!
//! Payloads are structured values encoded with bincode's legacy layout:
//! integers little-endian at fixed width, `bool` as one byte, strings and
//! sequences as a `u64` little-endian length followed by the elements,
//! `Option` as a one-byte tag (0 = None, 1 = Some) followed by the value,
//! enums as a `u32` variant index followed by the fields, `f64` as IEEE-754
//! little-endian. The encoding is deterministic for a given value.
//!
//! On tcp every frame is a 4-byte big-endian length followed by that many
//! bytes holding one encoded [`Frame`].

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BusError, ChannelKind};

/// Largest frame accepted from a peer.
pub const MAX_FRAME: usize = 256 << 20;

pub fn encode<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, BusError> {
    bincode::serialize(value).map_err(|e| BusError::Codec(e.to_string()))
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, BusError> {
    bincode::deserialize(bytes).map_err(|e| BusError::Codec(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Producer,
    Consumer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Frame {
    /// First frame of every connection.
    Hello { channel: String, kind: ChannelKind, role: Role },
    SendBulk { payloads: Vec<Vec<u8>> },
    Ack,
    Request { max: u32, timeout_ms: u64 },
    Batch { payloads: Vec<(Vec<u8>, u32, f64)> },
    Close,
    Closed,
    Error(String),
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    let body = bincode::serialize(frame).map_err(io::Error::other)?;
    if body.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Frame> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    bincode::deserialize(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_layout() {
        let bytes = encode(&(7u32, "ab".to_string(), Some(true))).unwrap();
        assert_eq!(bytes, vec![7, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0, b'a', b'b', 1, 1]);
    }

    #[test]
    fn frame_prefix_is_big_endian_length() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Frame::Ack).unwrap();
        let body = bincode::serialize(&Frame::Ack).unwrap();
        assert_eq!(&buf[..4], &(body.len() as u32).to_be_bytes());
        assert_eq!(read_frame(&mut &buf[..]).unwrap(), Frame::Ack);
    }

    #[test]
    fn oversized_prefix_is_rejected() {
        let buf = u32::MAX.to_be_bytes();
        assert!(read_frame(&mut &buf[..]).is_err());
    }
}
