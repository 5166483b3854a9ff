//! Framed binary protocol between the cut client and the backend.
//!
//! Every frame is `u32` little-endian payload length (excluding the type byte),
//! one type byte, then the payload. All integers and reals are little-endian;
//! reals are IEEE-754 binary32. The same bytes travel over TCP and, one frame per
//! binary message, over WebSocket.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::model::{
    CutDelta, DatasetMeta, Limit, NodeId, ResultMesh, SpecSet, SubVolumeSpec, WorkKey,
};

pub const PROTOCOL_VERSION: u16 = 1;

/// Frames larger than this are rejected before allocation.
pub const MAX_PAYLOAD: u32 = 256 << 20;

pub const HEADER_LEN: usize = 5;

pub mod frame_type {
    pub const HELLO: u8 = 0x01;
    pub const OPEN: u8 = 0x02;
    pub const DATASET_INFO: u8 = 0x03;
    pub const SET_SPEC: u8 = 0x10;
    pub const CUT_DELTA: u8 = 0x11;
    pub const RESULT_MESH: u8 = 0x20;
    pub const NODE_DONE: u8 = 0x21;
    pub const ABORT_ACK: u8 = 0x22;
    pub const STATS: u8 = 0x30;
    pub const ERROR: u8 = 0x7F;
}

/// Codes carried by `ERROR` frames.
pub mod error_code {
    /// Malformed or out-of-order frame; the session is closed.
    pub const PROTOCOL: u16 = 1;
    pub const UNKNOWN_DATASET: u16 = 2;
    /// Loading or extracting one node failed; the session continues.
    pub const EXTRACTION: u16 = 3;
    pub const UNSUPPORTED_VERSION: u16 = 4;
    pub const INVALID_SPEC: u16 = 5;
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("unknown frame type 0x{0:02x}")]
    UnknownType(u8),
    #[error("frame 0x{ty:02x} is truncated")]
    Truncated { ty: u8 },
    #[error("frame 0x{ty:02x} has {extra} trailing bytes")]
    TrailingBytes { ty: u8, extra: usize },
    #[error("frame payload of {0} bytes exceeds the limit")]
    TooLarge(u32),
    #[error("invalid utf-8 in frame 0x{ty:02x}")]
    Utf8 { ty: u8 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One sub-volume limit as transmitted: the field is an index into the dataset's field table.
#[derive(Debug, Clone, PartialEq)]
pub struct WireLimit {
    pub field: u8,
    pub lower: f32,
    pub upper: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireSubVolume {
    pub id: u8,
    pub limits: Vec<WireLimit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireSpecSet {
    pub version: u32,
    pub subvolumes: Vec<WireSubVolume>,
}

impl WireSpecSet {
    pub fn from_spec_set(set: &SpecSet, meta: &DatasetMeta) -> Result<Self, ProtocolError> {
        let subvolumes = set
            .subvolumes
            .iter()
            .map(|s| {
                let limits = s
                    .limits
                    .iter()
                    .map(|l| {
                        let field = meta.field_index(&l.field).ok_or_else(|| {
                            ProtocolError::Invalid(format!("unknown field `{}`", l.field))
                        })?;
                        Ok(WireLimit {
                            field: field as u8,
                            lower: l.lower,
                            upper: l.upper,
                        })
                    })
                    .collect::<Result<_, ProtocolError>>()?;
                Ok(WireSubVolume { id: s.id, limits })
            })
            .collect::<Result<_, ProtocolError>>()?;
        Ok(Self {
            version: set.version,
            subvolumes,
        })
    }

    pub fn to_spec_set(&self, meta: &DatasetMeta) -> Result<SpecSet, ProtocolError> {
        let subvolumes = self
            .subvolumes
            .iter()
            .map(|s| {
                let limits = s
                    .limits
                    .iter()
                    .map(|l| {
                        let name = meta.fields.get(l.field as usize).ok_or_else(|| {
                            ProtocolError::Invalid(format!("field index {} out of range", l.field))
                        })?;
                        Ok(Limit::new(name.clone(), l.lower, l.upper))
                    })
                    .collect::<Result<_, ProtocolError>>()?;
                Ok(SubVolumeSpec::new(s.id, limits))
            })
            .collect::<Result<_, ProtocolError>>()?;
        let set = SpecSet {
            version: self.version,
            subvolumes,
        };
        set.validate(meta)
            .map_err(|e| ProtocolError::Invalid(e.to_string()))?;
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Stats {
    pub pending: u32,
    pub running: u32,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Hello {
        proto: u16,
    },
    Open {
        dataset: String,
    },
    DatasetInfo(DatasetMeta),
    SetSpec(WireSpecSet),
    CutDelta {
        version: u32,
        timestep: u32,
        delta: CutDelta,
    },
    ResultMesh(ResultMesh),
    NodeDone(WorkKey),
    AbortAck {
        version: u32,
    },
    Stats(Stats),
    Error {
        code: u16,
        message: String,
    },
}

impl Frame {
    pub fn type_byte(&self) -> u8 {
        use frame_type::*;
        match self {
            Frame::Hello { .. } => HELLO,
            Frame::Open { .. } => OPEN,
            Frame::DatasetInfo(_) => DATASET_INFO,
            Frame::SetSpec(_) => SET_SPEC,
            Frame::CutDelta { .. } => CUT_DELTA,
            Frame::ResultMesh(_) => RESULT_MESH,
            Frame::NodeDone(_) => NODE_DONE,
            Frame::AbortAck { .. } => ABORT_ACK,
            Frame::Stats(_) => STATS,
            Frame::Error { .. } => ERROR,
        }
    }

    /// Spec version a result-carrying frame belongs to.
    pub fn spec_version(&self) -> Option<u32> {
        match self {
            Frame::ResultMesh(m) => Some(m.spec_version),
            Frame::NodeDone(k) => Some(k.spec_version),
            _ => None,
        }
    }

    pub fn error(code: u16, message: impl Into<String>) -> Self {
        Frame::Error {
            code,
            message: message.into(),
        }
    }

    /// Full frame bytes: header and payload.
    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let mut w = Vec::with_capacity(64);
        w.extend_from_slice(&[0; HEADER_LEN]);
        self.encode_payload(&mut w)?;
        let len = (w.len() - HEADER_LEN) as u64;
        if len > MAX_PAYLOAD as u64 {
            return Err(ProtocolError::TooLarge(len.min(u32::MAX as u64) as u32));
        }
        w[..4].copy_from_slice(&(len as u32).to_le_bytes());
        w[4] = self.type_byte();
        Ok(w)
    }

    fn encode_payload(&self, w: &mut Vec<u8>) -> Result<(), ProtocolError> {
        match self {
            Frame::Hello { proto } => put_u16(w, *proto),
            Frame::Open { dataset } => put_str16(w, dataset)?,
            Frame::DatasetInfo(meta) => {
                meta.dims.iter().for_each(|&d| put_u32(w, d));
                meta.spacing.iter().for_each(|&s| put_f32(w, s));
                meta.origin.iter().for_each(|&o| put_f32(w, o));
                let b = u16::try_from(meta.block_size)
                    .map_err(|_| ProtocolError::Invalid("block size exceeds u16".into()))?;
                put_u16(w, b);
                w.push(meta.levels);
                put_u32(w, meta.timesteps);
                w.push(count_u8(meta.fields.len(), "fields")?);
                for f in &meta.fields {
                    let bytes = f.as_bytes();
                    w.push(count_u8(bytes.len(), "field name bytes")?);
                    w.extend_from_slice(bytes);
                }
            }
            Frame::SetSpec(set) => {
                put_u32(w, set.version);
                w.push(count_u8(set.subvolumes.len(), "sub-volumes")?);
                for s in &set.subvolumes {
                    w.push(s.id);
                    w.push(count_u8(s.limits.len(), "limits")?);
                    for l in &s.limits {
                        w.push(l.field);
                        put_f32(w, l.lower);
                        put_f32(w, l.upper);
                    }
                }
            }
            Frame::CutDelta {
                version,
                timestep,
                delta,
            } => {
                put_u32(w, *version);
                put_u32(w, *timestep);
                put_u16(w, count_u16(delta.added.len(), "added nodes")?);
                for (n, p) in &delta.added {
                    put_node(w, *n);
                    put_f32(w, *p);
                }
                put_u16(w, count_u16(delta.removed.len(), "removed nodes")?);
                for n in &delta.removed {
                    put_node(w, *n);
                }
                put_u16(
                    w,
                    count_u16(delta.reprioritized.len(), "reprioritized nodes")?,
                );
                for (n, p) in &delta.reprioritized {
                    put_node(w, *n);
                    put_f32(w, *p);
                }
            }
            Frame::ResultMesh(m) => {
                let n = m.positions.len();
                if m.normals.len() != n
                    || m.attributes.iter().any(|a| a.len() != n)
                    || m.velocities.as_ref().is_some_and(|v| v.len() != n)
                {
                    return Err(ProtocolError::Invalid(
                        "mesh arrays disagree on vertex count".into(),
                    ));
                }
                put_key(w, m.key());
                w.push(m.subvolume_id);
                put_u32(
                    w,
                    u32::try_from(n)
                        .map_err(|_| ProtocolError::Invalid("too many vertices".into()))?,
                );
                w.reserve(n * 24 + m.attributes.len() * n * 4);
                m.positions.iter().flatten().for_each(|&v| put_f32(w, v));
                m.normals.iter().flatten().for_each(|&v| put_f32(w, v));
                w.push(count_u8(m.attributes.len(), "attributes")?);
                m.attributes.iter().flatten().for_each(|&v| put_f32(w, v));
                match &m.velocities {
                    Some(v) => {
                        w.push(1);
                        v.iter().flatten().for_each(|&c| put_f32(w, c));
                    }
                    None => w.push(0),
                }
            }
            Frame::NodeDone(key) => put_key(w, *key),
            Frame::AbortAck { version } => put_u32(w, *version),
            Frame::Stats(s) => {
                put_u32(w, s.pending);
                put_u32(w, s.running);
                put_u64(w, s.cache_hits);
                put_u64(w, s.cache_misses);
            }
            Frame::Error { code, message } => {
                put_u16(w, *code);
                w.extend_from_slice(message.as_bytes());
            }
        }
        Ok(())
    }

    /// Decodes one payload of type `ty`; the payload must be consumed exactly.
    pub fn decode(ty: u8, payload: &[u8]) -> Result<Frame, ProtocolError> {
        use frame_type::*;
        let mut r = Cursor {
            buf: payload,
            pos: 0,
            ty,
        };
        let frame = match ty {
            HELLO => Frame::Hello { proto: r.u16()? },
            OPEN => Frame::Open {
                dataset: r.str16()?,
            },
            DATASET_INFO => {
                let dims = [r.u32()?, r.u32()?, r.u32()?];
                let spacing = [r.f32()?, r.f32()?, r.f32()?];
                let origin = [r.f32()?, r.f32()?, r.f32()?];
                let block_size = r.u16()? as u32;
                let levels = r.u8()?;
                let timesteps = r.u32()?;
                let nfields = r.u8()?;
                let fields = (0..nfields)
                    .map(|_| {
                        let len = r.u8()? as usize;
                        r.utf8(len)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let meta = DatasetMeta {
                    dims,
                    spacing,
                    origin,
                    block_size,
                    fields,
                    timesteps,
                    levels,
                };
                meta.validate()
                    .map_err(|e| ProtocolError::Invalid(format!("dataset info: {e}")))?;
                Frame::DatasetInfo(meta)
            }
            SET_SPEC => {
                let version = r.u32()?;
                let count = r.u8()?;
                let subvolumes = (0..count)
                    .map(|_| {
                        let id = r.u8()?;
                        let nlimits = r.u8()?;
                        let limits = (0..nlimits)
                            .map(|_| {
                                Ok(WireLimit {
                                    field: r.u8()?,
                                    lower: r.f32()?,
                                    upper: r.f32()?,
                                })
                            })
                            .collect::<Result<_, ProtocolError>>()?;
                        Ok(WireSubVolume { id, limits })
                    })
                    .collect::<Result<_, ProtocolError>>()?;
                Frame::SetSpec(WireSpecSet {
                    version,
                    subvolumes,
                })
            }
            CUT_DELTA => {
                let version = r.u32()?;
                let timestep = r.u32()?;
                let n_add = r.u16()?;
                let added = (0..n_add)
                    .map(|_| Ok((r.node()?, r.f32()?)))
                    .collect::<Result<_, ProtocolError>>()?;
                let n_remove = r.u16()?;
                let removed = (0..n_remove).map(|_| r.node()).collect::<Result<_, _>>()?;
                let n_repri = r.u16()?;
                let reprioritized = (0..n_repri)
                    .map(|_| Ok((r.node()?, r.f32()?)))
                    .collect::<Result<_, ProtocolError>>()?;
                Frame::CutDelta {
                    version,
                    timestep,
                    delta: CutDelta {
                        added,
                        removed,
                        reprioritized,
                    },
                }
            }
            RESULT_MESH => {
                let key = r.key()?;
                let subvolume_id = r.u8()?;
                let n = r.u32()? as usize;
                // Each vertex needs at least 24 bytes; reject absurd counts before allocating.
                if n.saturating_mul(24) > r.remaining() {
                    return Err(ProtocolError::Truncated { ty });
                }
                let positions = r.vec3s(n)?;
                let normals = r.vec3s(n)?;
                let nfields = r.u8()? as usize;
                if n.saturating_mul(4).saturating_mul(nfields) > r.remaining() {
                    return Err(ProtocolError::Truncated { ty });
                }
                let attributes = (0..nfields)
                    .map(|_| (0..n).map(|_| r.f32()).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<Vec<_>, _>>()?;
                let velocities = match r.u8()? {
                    0 => None,
                    1 => Some(r.vec3s(n)?),
                    other => {
                        return Err(ProtocolError::Invalid(format!("has_velocity flag {other}")))
                    }
                };
                Frame::ResultMesh(ResultMesh {
                    node: key.node,
                    timestep: key.timestep,
                    spec_version: key.spec_version,
                    subvolume_id,
                    positions,
                    normals,
                    attributes,
                    velocities,
                })
            }
            NODE_DONE => Frame::NodeDone(r.key()?),
            ABORT_ACK => Frame::AbortAck { version: r.u32()? },
            STATS => Frame::Stats(Stats {
                pending: r.u32()?,
                running: r.u32()?,
                cache_hits: r.u64()?,
                cache_misses: r.u64()?,
            }),
            ERROR => {
                let code = r.u16()?;
                let rest = r.remaining();
                Frame::Error {
                    code,
                    message: r.utf8(rest)?,
                }
            }
            other => return Err(ProtocolError::UnknownType(other)),
        };
        if r.remaining() != 0 {
            return Err(ProtocolError::TrailingBytes {
                ty,
                extra: r.remaining(),
            });
        }
        Ok(frame)
    }

    /// Decodes a complete frame (header included), as carried by one WebSocket message.
    pub fn from_bytes(bytes: &[u8]) -> Result<Frame, ProtocolError> {
        if bytes.len() < HEADER_LEN {
            return Err(ProtocolError::Invalid(
                "frame shorter than its header".into(),
            ));
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
        let ty = bytes[4];
        if len as usize != bytes.len() - HEADER_LEN {
            return Err(ProtocolError::Invalid(format!(
                "frame length {len} does not match message length {}",
                bytes.len() - HEADER_LEN
            )));
        }
        Frame::decode(ty, &bytes[HEADER_LEN..])
    }
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a header.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, ProtocolError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().expect("4 bytes"));
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::TooLarge(len));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Frame::decode(header[4], &payload).map(Some)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), ProtocolError> {
    w.write_all(&frame.encode()?)?;
    Ok(())
}

fn count_u8(n: usize, what: &str) -> Result<u8, ProtocolError> {
    u8::try_from(n).map_err(|_| ProtocolError::Invalid(format!("too many {what}: {n}")))
}

fn count_u16(n: usize, what: &str) -> Result<u16, ProtocolError> {
    u16::try_from(n).map_err(|_| ProtocolError::Invalid(format!("too many {what}: {n}")))
}

fn put_u16(w: &mut Vec<u8>, v: u16) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(w: &mut Vec<u8>, v: f32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str16(w: &mut Vec<u8>, s: &str) -> Result<(), ProtocolError> {
    put_u16(w, count_u16(s.len(), "string bytes")?);
    w.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_node(w: &mut Vec<u8>, n: NodeId) {
    w.push(n.level);
    put_u16(w, n.ix);
    put_u16(w, n.iy);
    put_u16(w, n.iz);
}

fn put_key(w: &mut Vec<u8>, k: WorkKey) {
    put_u32(w, k.spec_version);
    put_u32(w, k.timestep);
    put_node(w, k.node);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    ty: u8,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.remaining() < n {
            return Err(ProtocolError::Truncated { ty: self.ty });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ProtocolError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, ProtocolError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn utf8(&mut self, len: usize) -> Result<String, ProtocolError> {
        let ty = self.ty;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| ProtocolError::Utf8 { ty })
    }

    fn str16(&mut self) -> Result<String, ProtocolError> {
        let len = self.u16()? as usize;
        self.utf8(len)
    }

    fn node(&mut self) -> Result<NodeId, ProtocolError> {
        Ok(NodeId::new(
            self.u8()?,
            self.u16()?,
            self.u16()?,
            self.u16()?,
        ))
    }

    fn key(&mut self) -> Result<WorkKey, ProtocolError> {
        Ok(WorkKey::new(self.u32()?, self.u32()?, self.node()?))
    }

    fn vec3s(&mut self, n: usize) -> Result<Vec<[f32; 3]>, ProtocolError> {
        (0..n)
            .map(|_| Ok([self.f32()?, self.f32()?, self.f32()?]))
            .collect()
    }
}
