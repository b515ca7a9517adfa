//! Length-prefixed binary frames. All integers are big-endian:
//!
//! ```text
//! u32 length of the rest | u64 trans_id | u8 type
//! | u16 path len | u32 node ids...
//! | u16 capacity count | (u64 fwd, u64 rev, u64 fwd rate, u64 rev rate)...
//! | u64 commit
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{Message, MsgType};
use crate::flowpath::{HopProbe, Path, PathError};
use crate::graph::NodeId;

const HEADER: usize = 4;
const FIXED: usize = 8 + 1 + 2 + 2 + 8;
const HOP_BYTES: usize = 32;

/// Largest body any valid frame can have.
pub const MAX_BODY_LEN: usize = FIXED + u16::MAX as usize * 4 + u16::MAX as usize * HOP_BYTES;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("declared body length {declared} but {actual} bytes follow")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("frame body of {0} bytes exceeds the maximum")]
    Oversized(usize),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("bad path: {0}")]
    Path(#[from] PathError),
    #[error("path of {0} nodes does not fit a frame")]
    PathTooLong(usize),
    #[error("{entries} capacity entries for a path of {channels} channels")]
    CapacityTooLong { entries: usize, channels: usize },
    #[error("{0:?} must not carry capacity entries")]
    UnexpectedCapacity(MsgType),
    #[error("{ty:?} with commit amount {commit}")]
    BadCommit { ty: MsgType, commit: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Checks the field invariants shared by encoder and decoder.
pub fn validate(msg: &Message) -> Result<(), WireError> {
    let channels = msg.path.channel_count();
    if msg.path.nodes().len() > u16::MAX as usize {
        return Err(WireError::PathTooLong(msg.path.nodes().len()));
    }
    if msg.capacity.len() > channels {
        return Err(WireError::CapacityTooLong { entries: msg.capacity.len(), channels });
    }
    let probe = msg.msg_type.is_probe();
    if !probe && !msg.capacity.is_empty() {
        return Err(WireError::UnexpectedCapacity(msg.msg_type));
    }
    if probe == (msg.commit > 0) {
        return Err(WireError::BadCommit { ty: msg.msg_type, commit: msg.commit });
    }
    Ok(())
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    validate(msg)?;
    let body = FIXED + msg.path.nodes().len() * 4 + msg.capacity.len() * HOP_BYTES;
    let mut out = Vec::with_capacity(HEADER + body);
    out.extend_from_slice(&(body as u32).to_be_bytes());
    out.extend_from_slice(&msg.trans_id.to_be_bytes());
    out.push(msg.msg_type as u8);
    out.extend_from_slice(&(msg.path.nodes().len() as u16).to_be_bytes());
    for n in msg.path.nodes() {
        out.extend_from_slice(&n.0.to_be_bytes());
    }
    out.extend_from_slice(&(msg.capacity.len() as u16).to_be_bytes());
    for h in &msg.capacity {
        for v in [h.forward, h.reverse, h.forward_rate_ppm, h.reverse_rate_ppm] {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out.extend_from_slice(&msg.commit.to_be_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let have = self.buf.len() - self.pos;
        if have < n {
            return Err(WireError::Truncated { need: n, have });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    let mut head = Cursor { buf: bytes, pos: 0 };
    let declared = head.u32()? as usize;
    let actual = bytes.len() - HEADER;
    if declared > MAX_BODY_LEN {
        return Err(WireError::Oversized(declared));
    }
    if declared != actual {
        return Err(WireError::LengthMismatch { declared, actual });
    }
    decode_body(&bytes[HEADER..])
}

fn decode_body(body: &[u8]) -> Result<Message, WireError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let trans_id = c.u64()?;
    let raw = c.u8()?;
    let msg_type = MsgType::from_u8(raw).ok_or(WireError::UnknownType(raw))?;
    let n = c.u16()? as usize;
    let mut hops = Vec::with_capacity(n.min(body.len() / 4));
    for _ in 0..n {
        hops.push(NodeId(c.u32()?));
    }
    let path = Path::new(hops)?;
    let m = c.u16()? as usize;
    let mut capacity = Vec::with_capacity(m.min(body.len() / HOP_BYTES));
    for _ in 0..m {
        capacity.push(HopProbe {
            forward: c.u64()?,
            reverse: c.u64()?,
            forward_rate_ppm: c.u64()?,
            reverse_rate_ppm: c.u64()?,
        });
    }
    let commit = c.u64()?;
    if c.pos != body.len() {
        return Err(WireError::LengthMismatch { declared: c.pos, actual: body.len() });
    }
    let msg = Message { trans_id, msg_type, path, capacity, commit };
    validate(&msg)?;
    Ok(msg)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    w.write_all(&encode(msg)?)?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Message>, WireError> {
    let mut len = [0u8; HEADER];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let declared = u32::from_be_bytes(len) as usize;
    if declared > MAX_BODY_LEN {
        return Err(WireError::Oversized(declared));
    }
    let mut body = vec![0u8; declared];
    r.read_exact(&mut body)?;
    decode_body(&body).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(ids: &[u32]) -> Path {
        Path::new(ids.iter().map(|&i| NodeId(i)).collect()).unwrap()
    }

    fn probe() -> Message {
        Message {
            trans_id: (7 << 32) | 3,
            msg_type: MsgType::Probe,
            path: path(&[7, 2, 9]),
            capacity: vec![HopProbe { forward: 10, reverse: 4, forward_rate_ppm: 1000, reverse_rate_ppm: 2500 }],
            commit: 0,
        }
    }

    #[test]
    fn round_trip_and_layout() {
        let m = probe();
        let bytes = encode(&m).unwrap();
        assert_eq!(bytes.len(), 4 + FIXED + 3 * 4 + HOP_BYTES);
        assert_eq!(&bytes[..4], &((bytes.len() - 4) as u32).to_be_bytes());
        assert_eq!(&bytes[4..12], &m.trans_id.to_be_bytes());
        assert_eq!(bytes[12], MsgType::Probe as u8);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn rejects_malformed_frames() {
        let bytes = encode(&probe()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(WireError::LengthMismatch { .. })));
        assert!(matches!(decode(&bytes[..2]), Err(WireError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(WireError::LengthMismatch { .. })));
        let mut ty = bytes.clone();
        ty[12] = 0xee;
        assert!(matches!(decode(&ty), Err(WireError::UnknownType(0xee))));
        // shrink the declared path to zero nodes
        let mut empty = Vec::new();
        empty.extend_from_slice(&(FIXED as u32).to_be_bytes());
        empty.extend_from_slice(&1u64.to_be_bytes());
        empty.push(MsgType::Probe as u8);
        empty.extend_from_slice(&0u16.to_be_bytes());
        empty.extend_from_slice(&0u16.to_be_bytes());
        empty.extend_from_slice(&0u64.to_be_bytes());
        assert!(matches!(decode(&empty), Err(WireError::Path(_))));
    }

    #[test]
    fn encode_enforces_invariants() {
        let mut m = probe();
        m.commit = 5;
        assert!(matches!(encode(&m), Err(WireError::BadCommit { .. })));
        let mut c = probe();
        c.msg_type = MsgType::Commit;
        assert!(matches!(encode(&c), Err(WireError::UnexpectedCapacity(_))));
        c.capacity.clear();
        assert!(matches!(encode(&c), Err(WireError::BadCommit { .. })));
        c.commit = 4;
        assert!(encode(&c).is_ok());
        let mut long = probe();
        long.capacity = vec![HopProbe::default(); 3];
        assert!(matches!(encode(&long), Err(WireError::CapacityTooLong { .. })));
    }

    #[test]
    fn stream_framing() {
        let mut buf = Vec::new();
        let a = probe();
        let mut b = probe();
        b.msg_type = MsgType::Reverse;
        b.capacity.clear();
        b.commit = 12;
        write_frame(&mut buf, &a).unwrap();
        write_frame(&mut buf, &b).unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap(), Some(a));
        assert_eq!(read_frame(&mut r).unwrap(), Some(b));
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }
}
