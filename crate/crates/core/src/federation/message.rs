//! Round messages, their binary encoding, and the in-memory transport.
//!
//! # Wire format, version 1
//!
//! All integers are little-endian. A frame is
//!
//! ```text
//! magic   b"STHF"
//! version u16 (= 1)
//! kind    u8  (1 = broadcast, 2 = shared update, 3 = full model update)
//! body
//! ```
//!
//! Building blocks: `vec` is `len: u32` followed by `len` f64 values,
//! `matrix` is `rows: u32, cols: u32` followed by `rows * cols` f64 values in
//! row-major order, `shared` is `matrix vec` (weight, bias), `head` likewise,
//! `protos` is `count: u32` followed by `count` pairs of `class: u32, vec`.
//!
//! ```text
//! broadcast      round u32, stage u32, recipients (count u32, ids u32...),
//!                shared, has_head u8, [head], protos
//! shared update  client u32, round u32, stage u32, shared, protos,
//!                counts (count u32, pairs of class u32 and n u64)
//! full update    client u32, round u32, stage u32, shared, head
//! ```
//!
//! Client uploads carry no per-sample field of any kind; a shared update
//! cannot hold a head at all.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{HeadParams, SharedParams};
use crate::prototypes::PrototypeMap;

pub const MAGIC: &[u8; 4] = b"STHF";
pub const VERSION: u16 = 1;

const KIND_BROADCAST: u8 = 1;
const KIND_SHARED_UPDATE: u8 = 2;
const KIND_FULL_UPDATE: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum RoundMessage {
    /// Server to the selected clients at the start of a stage.
    Broadcast {
        round: usize,
        stage: usize,
        recipients: Vec<usize>,
        shared: SharedParams,
        /// Present only for algorithms that aggregate the whole model.
        head: Option<HeadParams>,
        prototypes: PrototypeMap,
    },
    /// Client to server: shared layer, fresh stage prototypes, per-class counts.
    SharedUpdate {
        client_id: usize,
        round: usize,
        stage: usize,
        shared: SharedParams,
        prototypes: PrototypeMap,
        class_counts: BTreeMap<usize, usize>,
    },
    /// Client to server for the full-model baselines.
    FullModelUpdate {
        client_id: usize,
        round: usize,
        stage: usize,
        shared: SharedParams,
        head: HeadParams,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToClients,
    ToServer,
}

impl RoundMessage {
    pub fn direction(&self) -> Direction {
        match self {
            RoundMessage::Broadcast { .. } => Direction::ToClients,
            _ => Direction::ToServer,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u16(VERSION);
        match self {
            RoundMessage::Broadcast {
                round,
                stage,
                recipients,
                shared,
                head,
                prototypes,
            } => {
                w.u8(KIND_BROADCAST);
                w.index(*round);
                w.index(*stage);
                w.index(recipients.len());
                for &r in recipients {
                    w.index(r);
                }
                w.shared(shared);
                match head {
                    Some(h) => {
                        w.u8(1);
                        w.head(h);
                    }
                    None => w.u8(0),
                }
                w.protos(prototypes);
            }
            RoundMessage::SharedUpdate {
                client_id,
                round,
                stage,
                shared,
                prototypes,
                class_counts,
            } => {
                w.u8(KIND_SHARED_UPDATE);
                w.index(*client_id);
                w.index(*round);
                w.index(*stage);
                w.shared(shared);
                w.protos(prototypes);
                w.index(class_counts.len());
                for (&c, &n) in class_counts {
                    w.index(c);
                    w.buf.extend_from_slice(&(n as u64).to_le_bytes());
                }
            }
            RoundMessage::FullModelUpdate {
                client_id,
                round,
                stage,
                shared,
                head,
            } => {
                w.u8(KIND_FULL_UPDATE);
                w.index(*client_id);
                w.index(*round);
                w.index(*stage);
                w.shared(shared);
                w.head(head);
            }
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Protocol("bad message magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Protocol(format!(
                "unsupported message version {version}"
            )));
        }
        let msg = match r.u8()? {
            KIND_BROADCAST => {
                let round = r.index()?;
                let stage = r.index()?;
                let n = r.index()?;
                let recipients = (0..n).map(|_| r.index()).collect::<Result<_>>()?;
                let shared = r.shared()?;
                let head = match r.u8()? {
                    0 => None,
                    1 => Some(r.head()?),
                    other => return Err(Error::Protocol(format!("bad head flag {other}"))),
                };
                let prototypes = r.protos()?;
                RoundMessage::Broadcast {
                    round,
                    stage,
                    recipients,
                    shared,
                    head,
                    prototypes,
                }
            }
            KIND_SHARED_UPDATE => {
                let client_id = r.index()?;
                let round = r.index()?;
                let stage = r.index()?;
                let shared = r.shared()?;
                let prototypes = r.protos()?;
                let n = r.index()?;
                let mut class_counts = BTreeMap::new();
                for _ in 0..n {
                    let c = r.index()?;
                    let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                    class_counts.insert(c, count as usize);
                }
                RoundMessage::SharedUpdate {
                    client_id,
                    round,
                    stage,
                    shared,
                    prototypes,
                    class_counts,
                }
            }
            KIND_FULL_UPDATE => RoundMessage::FullModelUpdate {
                client_id: r.index()?,
                round: r.index()?,
                stage: r.index()?,
                shared: r.shared()?,
                head: r.head()?,
            },
            other => return Err(Error::Protocol(format!("unknown message kind {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after message",
                bytes.len() - r.pos
            )));
        }
        Ok(msg)
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn index(&mut self, v: usize) {
        let v = u32::try_from(v).expect("index exceeds u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn values<'a>(&mut self, values: impl Iterator<Item = &'a f64>) {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn vector(&mut self, v: &Array1<f64>) {
        self.index(v.len());
        self.values(v.iter());
    }

    fn matrix(&mut self, m: &Array2<f64>) {
        self.index(m.nrows());
        self.index(m.ncols());
        self.values(m.iter());
    }

    fn shared(&mut self, p: &SharedParams) {
        self.matrix(&p.weight);
        self.vector(&p.bias);
    }

    fn head(&mut self, p: &HeadParams) {
        self.matrix(&p.weight);
        self.vector(&p.bias);
    }

    fn protos(&mut self, protos: &PrototypeMap) {
        self.index(protos.len());
        for (&c, v) in protos {
            self.index(c);
            self.vector(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Protocol("truncated message".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn index(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Protocol("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn vector(&mut self) -> Result<Array1<f64>> {
        let n = self.index()?;
        Ok(Array1::from(self.values(n)?))
    }

    fn matrix(&mut self) -> Result<Array2<f64>> {
        let rows = self.index()?;
        let cols = self.index()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Protocol("length overflow".into()))?;
        Array2::from_shape_vec((rows, cols), self.values(n)?)
            .map_err(|e| Error::Protocol(e.to_string()))
    }

    fn shared(&mut self) -> Result<SharedParams> {
        let weight = self.matrix()?;
        let bias = self.vector()?;
        if bias.len() != weight.ncols() {
            return Err(Error::Protocol("shared bias does not match weight".into()));
        }
        Ok(SharedParams { weight, bias })
    }

    fn head(&mut self) -> Result<HeadParams> {
        let weight = self.matrix()?;
        let bias = self.vector()?;
        if bias.len() != weight.ncols() {
            return Err(Error::Protocol("head bias does not match weight".into()));
        }
        Ok(HeadParams { weight, bias })
    }

    fn protos(&mut self) -> Result<PrototypeMap> {
        let n = self.index()?;
        let mut out = PrototypeMap::new();
        for _ in 0..n {
            let c = self.index()?;
            out.insert(c, self.vector()?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

/// In-memory channel between the server and its clients. Every frame that
/// passes through is kept when recording is enabled.
#[derive(Debug, Clone, Default)]
pub struct Transport {
    recording: bool,
    frames: Vec<Frame>,
}

impl Transport {
    pub fn new(recording: bool) -> Self {
        Self {
            recording,
            frames: Vec::new(),
        }
    }

    /// Serializes `msg`, records it, and hands back the bytes the receiver sees.
    pub fn send(&mut self, msg: &RoundMessage) -> Vec<u8> {
        let bytes = msg.encode();
        if self.recording {
            self.frames.push(Frame {
                direction: msg.direction(),
                bytes: bytes.clone(),
            });
        }
        bytes
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    /// Writes all recorded frames as `direction u8, len u32, bytes`, where
    /// direction is 0 for server to clients and 1 for client to server.
    pub fn dump(&self, out: &mut impl Write) -> Result<()> {
        for f in &self.frames {
            out.write_all(&[match f.direction {
                Direction::ToClients => 0,
                Direction::ToServer => 1,
            }])?;
            let len = u32::try_from(f.bytes.len())
                .map_err(|_| Error::Protocol("frame too large".into()))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(&f.bytes)?;
        }
        Ok(())
    }

    pub fn load(input: &mut impl Read) -> Result<Vec<Frame>> {
        let mut raw = Vec::new();
        input.read_to_end(&mut raw)?;
        let mut frames = Vec::new();
        let mut pos = 0;
        while pos < raw.len() {
            if raw.len() - pos < 5 {
                return Err(Error::Protocol("truncated message log".into()));
            }
            let direction = match raw[pos] {
                0 => Direction::ToClients,
                1 => Direction::ToServer,
                d => return Err(Error::Protocol(format!("bad frame direction {d}"))),
            };
            let len = u32::from_le_bytes(raw[pos + 1..pos + 5].try_into().unwrap()) as usize;
            pos += 5;
            if raw.len() - pos < len {
                return Err(Error::Protocol("truncated message log".into()));
            }
            frames.push(Frame {
                direction,
                bytes: raw[pos..pos + len].to_vec(),
            });
            pos += len;
        }
        Ok(frames)
    }
}

/// Result of scanning client-to-server frames.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub uploads: usize,
    /// Uploads whose message type carries a classifier head.
    pub head_uploads: usize,
    /// Byte offsets, over all uploads, where a forbidden f64 bit pattern occurs.
    pub forbidden_hits: usize,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.head_uploads == 0 && self.forbidden_hits == 0
    }
}

/// Decodes every upload and scans its raw bytes, at every offset, for the bit
/// pattern of any value in `forbidden` (for example head parameters or input
/// features). Zeros are ignored because they carry no information.
pub fn audit_uploads(
    frames: &[Frame],
    forbidden: impl IntoIterator<Item = f64>,
) -> Result<AuditReport> {
    let patterns: HashSet<u64> = forbidden
        .into_iter()
        .filter(|v| *v != 0.0)
        .map(f64::to_bits)
        .collect();
    let mut report = AuditReport::default();
    for f in frames.iter().filter(|f| f.direction == Direction::ToServer) {
        report.uploads += 1;
        if let RoundMessage::FullModelUpdate { .. } = RoundMessage::decode(&f.bytes)? {
            report.head_uploads += 1;
        }
        report.forbidden_hits += f
            .bytes
            .windows(8)
            .filter(|w| patterns.contains(&u64::from_le_bytes((*w).try_into().unwrap())))
            .count();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn shared() -> SharedParams {
        SharedParams {
            weight: array![[1.0, -2.0, 0.5], [3.0, 4.0, -0.25]],
            bias: array![0.1, 0.2, 0.3],
        }
    }

    fn head() -> HeadParams {
        HeadParams {
            weight: array![[1.5, 2.5], [3.5, 4.5], [5.5, 6.5]],
            bias: array![7.5, 8.5],
        }
    }

    fn samples() -> Vec<RoundMessage> {
        let protos: PrototypeMap = [(0, array![1.0, 2.0, 3.0]), (4, array![-1.0, 0.0, 9.0])].into();
        vec![
            RoundMessage::Broadcast {
                round: 3,
                stage: 2,
                recipients: vec![1, 5, 9],
                shared: shared(),
                head: None,
                prototypes: protos.clone(),
            },
            RoundMessage::Broadcast {
                round: 1,
                stage: 1,
                recipients: vec![],
                shared: shared(),
                head: Some(head()),
                prototypes: PrototypeMap::new(),
            },
            RoundMessage::SharedUpdate {
                client_id: 7,
                round: 2,
                stage: 5,
                shared: shared(),
                prototypes: protos,
                class_counts: [(0, 12), (4, 3)].into(),
            },
            RoundMessage::FullModelUpdate {
                client_id: 0,
                round: 1,
                stage: 1,
                shared: shared(),
                head: head(),
            },
        ]
    }

    #[test]
    fn round_trip() {
        for msg in samples() {
            assert_eq!(RoundMessage::decode(&msg.encode()).unwrap(), msg);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = samples()[2].encode();
        assert!(RoundMessage::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(RoundMessage::decode(&extra).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(RoundMessage::decode(&bad_version).is_err());
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(RoundMessage::decode(&bad_magic).is_err());
    }

    #[test]
    fn dump_load_and_audit() {
        let mut t = Transport::new(true);
        for msg in samples() {
            t.send(&msg);
        }
        let mut buf = Vec::new();
        t.dump(&mut buf).unwrap();
        let frames = Transport::load(&mut buf.as_slice()).unwrap();
        assert_eq!(frames, t.frames());

        let head_values: Vec<f64> = head()
            .weight
            .iter()
            .chain(head().bias.iter())
            .copied()
            .collect();
        let report = audit_uploads(&frames, head_values.clone()).unwrap();
        assert_eq!(report.uploads, 2);
        assert_eq!(report.head_uploads, 1);
        assert_eq!(report.forbidden_hits, head_values.len());
        assert!(!report.is_clean());

        let shared_only: Vec<Frame> = frames[..3].to_vec();
        assert!(audit_uploads(&shared_only, head_values).unwrap().is_clean());
    }
}
