//! Length-prefixed binary wire format for the store server.
//!
//! Every message is a frame: a `u32` little-endian payload length followed by the
//! payload. All integers and floats are little-endian.
//!
//! Request payloads start with an op code byte and a `u32` count:
//!
//! | op | name     | body after count                                                    |
//! |----|----------|---------------------------------------------------------------------|
//! | 1  | FETCH    | `count` x class id `u64`                                            |
//! | 2  | PUSH     | dim `u32`, then `count` x (id `u64`, flag `u8`, expected `u64`, dim x `f64`) |
//! | 3  | SNAPSHOT | `count` bytes of UTF-8 path                                         |
//! | 4  | INFO     | nothing (count is 0)                                                |
//!
//! The PUSH flag is 1 for a versioned update and 0 for a blind one. Responses start
//! with a status byte, 0 for success and 1 for an error followed by a `u32` length and
//! a UTF-8 message. Successful bodies:
//!
//! * FETCH: count `u32`, dim `u32`, `count` x (id `u64`, version `u64`, dim x `f64`)
//! * PUSH: count `u32`, `count` x (id `u64`, outcome `u8`, version `u64`), outcome 0 is
//!   applied (version is the new one) and 1 is stale (version is the current one)
//! * SNAPSHOT: nothing
//! * INFO: classes `u64`, dim `u64`, shards `u64`

use std::io::{ErrorKind, Read, Write};

use super::{PushOutcome, Update, WeightRecord};
use crate::error::{Error, Result};

pub const OP_FETCH: u8 = 1;
pub const OP_PUSH: u8 = 2;
pub const OP_SNAPSHOT: u8 = 3;
pub const OP_INFO: u8 = 4;

pub const STATUS_OK: u8 = 0;
pub const STATUS_ERR: u8 = 1;

/// Frames larger than this are refused without reading the payload.
pub const MAX_FRAME: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub enum Request {
    Fetch(Vec<usize>),
    Push { dim: usize, updates: Vec<Update> },
    Snapshot(String),
    Info,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreInfo {
    pub num_classes: usize,
    pub dim: usize,
    pub num_shards: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Response {
    Fetched { dim: usize, records: Vec<WeightRecord> },
    Pushed(Vec<(usize, PushOutcome)>),
    SnapshotWritten,
    Info(StoreInfo),
    Error(String),
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {} bytes is too large", payload.len())));
    }
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` means the peer closed the connection cleanly.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {len} bytes is too large")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Protocol("message truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Protocol("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn id(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Protocol("class id out of range".into()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Protocol(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }

    /// Guards allocations against counts that cannot fit in the remaining bytes.
    fn check_count(&self, count: usize, min_item: usize) -> Result<()> {
        if count.saturating_mul(min_item) > self.buf.len() - self.pos {
            Err(Error::Protocol("message truncated".into()))
        } else {
            Ok(())
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        match self {
            Request::Fetch(ids) => {
                buf.push(OP_FETCH);
                put_u32(&mut buf, ids.len());
                for &id in ids {
                    put_u64(&mut buf, id as u64);
                }
            }
            Request::Push { dim, updates } => {
                buf.push(OP_PUSH);
                put_u32(&mut buf, updates.len());
                put_u32(&mut buf, *dim);
                for u in updates {
                    put_u64(&mut buf, u.class_id as u64);
                    buf.push(u8::from(u.expected_version.is_some()));
                    put_u64(&mut buf, u.expected_version.unwrap_or(0));
                    put_f64s(&mut buf, &u.delta);
                }
            }
            Request::Snapshot(path) => {
                buf.push(OP_SNAPSHOT);
                put_u32(&mut buf, path.len());
                buf.extend_from_slice(path.as_bytes());
            }
            Request::Info => {
                buf.push(OP_INFO);
                put_u32(&mut buf, 0);
            }
        }
        buf
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(payload);
        let op = c.u8()?;
        let count = c.u32()? as usize;
        let req = match op {
            OP_FETCH => {
                c.check_count(count, 8)?;
                Request::Fetch((0..count).map(|_| c.id()).collect::<Result<_>>()?)
            }
            OP_PUSH => {
                let dim = c.u32()? as usize;
                c.check_count(count, 17 + 8 * dim)?;
                let mut updates = Vec::with_capacity(count);
                for _ in 0..count {
                    let class_id = c.id()?;
                    let flag = c.u8()?;
                    let expected = c.u64()?;
                    let expected_version = match flag {
                        0 => None,
                        1 => Some(expected),
                        f => return Err(Error::Protocol(format!("bad push flag {f}"))),
                    };
                    let delta = c.f64s(dim)?;
                    updates.push(Update { class_id, delta, expected_version });
                }
                Request::Push { dim, updates }
            }
            OP_SNAPSHOT => {
                let bytes = c.take(count)?;
                let path = std::str::from_utf8(bytes)
                    .map_err(|_| Error::Protocol("snapshot path is not UTF-8".into()))?;
                Request::Snapshot(path.to_owned())
            }
            OP_INFO => {
                if count != 0 {
                    return Err(Error::Protocol("INFO takes no arguments".into()));
                }
                Request::Info
            }
            other => return Err(Error::Protocol(format!("unknown op code {other}"))),
        };
        c.finish()?;
        Ok(req)
    }
}

impl Response {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        match self {
            Response::Error(msg) => {
                buf.push(STATUS_ERR);
                put_u32(&mut buf, msg.len());
                buf.extend_from_slice(msg.as_bytes());
            }
            Response::Fetched { dim, records } => {
                buf.push(STATUS_OK);
                put_u32(&mut buf, records.len());
                put_u32(&mut buf, *dim);
                for r in records {
                    put_u64(&mut buf, r.class_id as u64);
                    put_u64(&mut buf, r.version);
                    put_f64s(&mut buf, &r.weight);
                }
            }
            Response::Pushed(outcomes) => {
                buf.push(STATUS_OK);
                put_u32(&mut buf, outcomes.len());
                for &(id, o) in outcomes {
                    let (flag, v) = match o {
                        PushOutcome::Applied { version } => (0u8, version),
                        PushOutcome::StaleRejected { current } => (1u8, current),
                    };
                    put_u64(&mut buf, id as u64);
                    buf.push(flag);
                    put_u64(&mut buf, v);
                }
            }
            Response::SnapshotWritten => buf.push(STATUS_OK),
            Response::Info(info) => {
                buf.push(STATUS_OK);
                put_u64(&mut buf, info.num_classes as u64);
                put_u64(&mut buf, info.dim as u64);
                put_u64(&mut buf, info.num_shards as u64);
            }
        }
        buf
    }

    /// Decodes a response to a request with op code `op`.
    pub fn decode(op: u8, payload: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(payload);
        let status = c.u8()?;
        if status == STATUS_ERR {
            let n = c.u32()? as usize;
            let msg = String::from_utf8_lossy(c.take(n)?).into_owned();
            c.finish()?;
            return Ok(Response::Error(msg));
        }
        if status != STATUS_OK {
            return Err(Error::Protocol(format!("bad status byte {status}")));
        }
        let resp = match op {
            OP_FETCH => {
                let count = c.u32()? as usize;
                let dim = c.u32()? as usize;
                c.check_count(count, 16 + 8 * dim)?;
                let mut records = Vec::with_capacity(count);
                for _ in 0..count {
                    let class_id = c.id()?;
                    let version = c.u64()?;
                    let weight = c.f64s(dim)?;
                    records.push(WeightRecord { class_id, weight, version });
                }
                Response::Fetched { dim, records }
            }
            OP_PUSH => {
                let count = c.u32()? as usize;
                c.check_count(count, 17)?;
                let mut outcomes = Vec::with_capacity(count);
                for _ in 0..count {
                    let id = c.id()?;
                    let flag = c.u8()?;
                    let v = c.u64()?;
                    let outcome = match flag {
                        0 => PushOutcome::Applied { version: v },
                        1 => PushOutcome::StaleRejected { current: v },
                        f => return Err(Error::Protocol(format!("bad outcome flag {f}"))),
                    };
                    outcomes.push((id, outcome));
                }
                Response::Pushed(outcomes)
            }
            OP_SNAPSHOT => Response::SnapshotWritten,
            OP_INFO => {
                let num_classes = c.u64()? as usize;
                let dim = c.u64()? as usize;
                let num_shards = c.u64()? as usize;
                Response::Info(StoreInfo { num_classes, dim, num_shards })
            }
            other => return Err(Error::Protocol(format!("unknown op code {other}"))),
        };
        c.finish()?;
        Ok(resp)
    }
}
