//! Control-plane messages and their binary framing.
//!
//! Every frame is `u32 LE length ‖ u8 kind ‖ body`, where `length` counts the
//! kind byte plus the body. Integers are little-endian fixed width, strings are
//! a `u16` byte length followed by UTF-8. Kinds are numbered 1..=9 in the order
//! of the [`ControlMessage`] variants.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

/// Version carried in `Join`; the producer drops connections that disagree.
pub const PROTOCOL_VERSION: u16 = 1;

/// Upper bound on a single frame body. The largest legal message (an
/// `Announce` with a 255-byte name and 8 dimensions) is well under this.
pub const MAX_FRAME_LEN: u32 = 4096;

pub const MAX_SEGMENT_NAME_LEN: usize = 255;
pub const MAX_NDIM: usize = 8;

const LEN_PREFIX: usize = 4;

/// Element type of a batch payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I32,
    I64,
    F32,
    F64,
}

impl DType {
    pub const ALL: [DType; 5] = [DType::U8, DType::I32, DType::I64, DType::F32, DType::F64];

    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::I32 => 1,
            DType::I64 => 2,
            DType::F32 => 3,
            DType::F64 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        Some(match code {
            0 => DType::U8,
            1 => DType::I32,
            2 => DType::I64,
            3 => DType::F32,
            4 => DType::F64,
            _ => return None,
        })
    }

    /// Size of one element in bytes.
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I32 | DType::F32 => 4,
            DType::I64 | DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::U8 => "u8",
            DType::I32 => "i32",
            DType::I64 => "i64",
            DType::F32 => "f32",
            DType::F64 => "f64",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "u8" => Ok(DType::U8),
            "i32" => Ok(DType::I32),
            "i64" => Ok(DType::I64),
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype {other:?}")),
        }
    }
}

/// How a joining consumer was admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Admission {
    /// Joined mid-epoch past the rubberband window; starts at the next epoch.
    WaitForNextEpoch,
    /// Joined inside the rubberband window; the retained prefix is replayed.
    Rubberband,
    /// Joined at an epoch boundary.
    Immediate,
}

impl Admission {
    pub fn code(self) -> u8 {
        match self {
            Admission::WaitForNextEpoch => 0,
            Admission::Rubberband => 1,
            Admission::Immediate => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Admission> {
        Some(match code {
            0 => Admission::WaitForNextEpoch,
            1 => Admission::Rubberband,
            2 => Admission::Immediate,
            _ => return None,
        })
    }
}

impl fmt::Display for Admission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Admission::WaitForNextEpoch => "wait-for-next-epoch",
            Admission::Rubberband => "rubberband",
            Admission::Immediate => "immediate",
        })
    }
}

/// Announcement of one sealed batch: a shared-memory handle plus metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Announce {
    pub epoch: u32,
    pub batch_index: u64,
    pub segment_name: String,
    pub byte_len: u64,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub checksum: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    Join {
        consumer_id: u64,
        protocol_version: u16,
    },
    Welcome {
        consumer_id: u64,
        epoch: u32,
        epoch_len: u64,
        next_batch_index: u64,
        buffer_depth: u16,
        admitted: Admission,
    },
    Announce(Announce),
    Ack {
        consumer_id: u64,
        epoch: u32,
        batch_index: u64,
    },
    Heartbeat {
        consumer_id: u64,
        monotonic_millis: u64,
    },
    EpochStart {
        epoch: u32,
        epoch_len: u64,
    },
    EpochEnd {
        epoch: u32,
    },
    Bye {
        consumer_id: u64,
    },
    Shutdown,
}

impl ControlMessage {
    pub fn kind(&self) -> u8 {
        match self {
            ControlMessage::Join { .. } => 1,
            ControlMessage::Welcome { .. } => 2,
            ControlMessage::Announce(_) => 3,
            ControlMessage::Ack { .. } => 4,
            ControlMessage::Heartbeat { .. } => 5,
            ControlMessage::EpochStart { .. } => 6,
            ControlMessage::EpochEnd { .. } => 7,
            ControlMessage::Bye { .. } => 8,
            ControlMessage::Shutdown => 9,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("segment name is {0} bytes, limit is {MAX_SEGMENT_NAME_LEN}")]
    SegmentNameTooLong(usize),
    #[error("announce without a segment name")]
    EmptySegmentName,
    #[error("ndim {0} exceeds {MAX_NDIM}")]
    TooManyDims(usize),
    #[error("shape {shape:?} of {dtype} does not cover {byte_len} bytes")]
    ShapeMismatch {
        shape: Vec<u64>,
        dtype: DType,
        byte_len: u64,
    },
    #[error("epoch_len must be positive")]
    ZeroEpochLen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeCause {
    /// Fewer than four bytes for the length prefix.
    TruncatedLength,
    MissingKind,
    UnknownKind(u8),
    /// Declared length disagrees with the bytes supplied or consumed.
    LengthMismatch { declared: u32, actual: usize },
    FrameTooLarge(u32),
    /// Body ended before a field was complete.
    Truncated,
    UnknownDType(u8),
    UnknownAdmission(u8),
    InvalidUtf8,
    EmptySegmentName,
    TooManyDims(u8),
    ShapeMismatch,
    ZeroEpochLen,
}

impl fmt::Display for DecodeCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeCause::TruncatedLength => write!(f, "truncated length prefix"),
            DecodeCause::MissingKind => write!(f, "missing kind"),
            DecodeCause::UnknownKind(k) => write!(f, "unknown kind {k}"),
            DecodeCause::LengthMismatch { declared, actual } => {
                write!(f, "length mismatch: declared {declared}, got {actual}")
            }
            DecodeCause::FrameTooLarge(n) => write!(f, "frame of {n} bytes exceeds {MAX_FRAME_LEN}"),
            DecodeCause::Truncated => write!(f, "truncated field"),
            DecodeCause::UnknownDType(c) => write!(f, "unknown dtype code {c}"),
            DecodeCause::UnknownAdmission(c) => write!(f, "unknown admission code {c}"),
            DecodeCause::InvalidUtf8 => write!(f, "segment name is not UTF-8"),
            DecodeCause::EmptySegmentName => write!(f, "empty segment name"),
            DecodeCause::TooManyDims(n) => write!(f, "ndim {n} exceeds {MAX_NDIM}"),
            DecodeCause::ShapeMismatch => write!(f, "shape does not match byte_len"),
            DecodeCause::ZeroEpochLen => write!(f, "epoch_len is zero"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("decode error at offset {offset}: {cause}")]
pub struct DecodeError {
    pub offset: usize,
    pub cause: DecodeCause,
}

#[derive(Debug, Error)]
pub enum FrameIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// CRC-32 (IEEE) of a payload.
pub fn checksum(payload: &[u8]) -> u32 {
    crc32fast::hash(payload)
}

/// Number of bytes a tensor of `shape` and `dtype` occupies, or `None` on overflow.
pub fn shape_byte_len(shape: &[u64], dtype: DType) -> Option<u64> {
    shape
        .iter()
        .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d))
}

fn validate(msg: &ControlMessage) -> Result<(), EncodeError> {
    match msg {
        ControlMessage::Announce(a) => {
            if a.segment_name.is_empty() {
                return Err(EncodeError::EmptySegmentName);
            }
            if a.segment_name.len() > MAX_SEGMENT_NAME_LEN {
                return Err(EncodeError::SegmentNameTooLong(a.segment_name.len()));
            }
            if a.shape.len() > MAX_NDIM {
                return Err(EncodeError::TooManyDims(a.shape.len()));
            }
            if shape_byte_len(&a.shape, a.dtype) != Some(a.byte_len) {
                return Err(EncodeError::ShapeMismatch {
                    shape: a.shape.clone(),
                    dtype: a.dtype,
                    byte_len: a.byte_len,
                });
            }
        }
        ControlMessage::Welcome { epoch_len: 0, .. } | ControlMessage::EpochStart { epoch_len: 0, .. } => {
            return Err(EncodeError::ZeroEpochLen);
        }
        _ => {}
    }
    Ok(())
}

/// Appends the frame for `msg` to `out`.
pub fn encode_into(msg: &ControlMessage, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    validate(msg)?;
    let start = out.len();
    out.extend_from_slice(&[0; LEN_PREFIX]);
    out.push(msg.kind());
    match msg {
        ControlMessage::Join {
            consumer_id,
            protocol_version,
        } => {
            out.extend_from_slice(&consumer_id.to_le_bytes());
            out.extend_from_slice(&protocol_version.to_le_bytes());
        }
        ControlMessage::Welcome {
            consumer_id,
            epoch,
            epoch_len,
            next_batch_index,
            buffer_depth,
            admitted,
        } => {
            out.extend_from_slice(&consumer_id.to_le_bytes());
            out.extend_from_slice(&epoch.to_le_bytes());
            out.extend_from_slice(&epoch_len.to_le_bytes());
            out.extend_from_slice(&next_batch_index.to_le_bytes());
            out.extend_from_slice(&buffer_depth.to_le_bytes());
            out.push(admitted.code());
        }
        ControlMessage::Announce(a) => {
            out.extend_from_slice(&a.epoch.to_le_bytes());
            out.extend_from_slice(&a.batch_index.to_le_bytes());
            out.extend_from_slice(&(a.segment_name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.segment_name.as_bytes());
            out.extend_from_slice(&a.byte_len.to_le_bytes());
            out.push(a.dtype.code());
            out.push(a.shape.len() as u8);
            for d in &a.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&a.checksum.to_le_bytes());
        }
        ControlMessage::Ack {
            consumer_id,
            epoch,
            batch_index,
        } => {
            out.extend_from_slice(&consumer_id.to_le_bytes());
            out.extend_from_slice(&epoch.to_le_bytes());
            out.extend_from_slice(&batch_index.to_le_bytes());
        }
        ControlMessage::Heartbeat {
            consumer_id,
            monotonic_millis,
        } => {
            out.extend_from_slice(&consumer_id.to_le_bytes());
            out.extend_from_slice(&monotonic_millis.to_le_bytes());
        }
        ControlMessage::EpochStart { epoch, epoch_len } => {
            out.extend_from_slice(&epoch.to_le_bytes());
            out.extend_from_slice(&epoch_len.to_le_bytes());
        }
        ControlMessage::EpochEnd { epoch } => out.extend_from_slice(&epoch.to_le_bytes()),
        ControlMessage::Bye { consumer_id } => out.extend_from_slice(&consumer_id.to_le_bytes()),
        ControlMessage::Shutdown => {}
    }
    let len = (out.len() - start - LEN_PREFIX) as u32;
    out[start..start + LEN_PREFIX].copy_from_slice(&len.to_le_bytes());
    Ok(())
}

pub fn encode_message(msg: &ControlMessage) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(32);
    encode_into(msg, &mut out)?;
    Ok(out)
}

/// Bounded little-endian reader over one frame body. Offsets reported in
/// errors are relative to the start of the frame (including the prefix).
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, cause: DecodeCause) -> DecodeError {
        DecodeError {
            offset: self.base + self.pos,
            cause,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(DecodeCause::Truncated));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_body(kind: u8, body: &[u8]) -> Result<ControlMessage, DecodeError> {
    let mut c = Cursor {
        buf: body,
        pos: 0,
        base: LEN_PREFIX + 1,
    };
    let msg = match kind {
        1 => ControlMessage::Join {
            consumer_id: c.u64()?,
            protocol_version: c.u16()?,
        },
        2 => {
            let consumer_id = c.u64()?;
            let epoch = c.u32()?;
            let at = c.pos;
            let epoch_len = c.u64()?;
            if epoch_len == 0 {
                c.pos = at;
                return Err(c.err(DecodeCause::ZeroEpochLen));
            }
            let next_batch_index = c.u64()?;
            let buffer_depth = c.u16()?;
            let code = c.u8()?;
            let admitted = Admission::from_code(code).ok_or_else(|| {
                c.pos -= 1;
                c.err(DecodeCause::UnknownAdmission(code))
            })?;
            ControlMessage::Welcome {
                consumer_id,
                epoch,
                epoch_len,
                next_batch_index,
                buffer_depth,
                admitted,
            }
        }
        3 => {
            let epoch = c.u32()?;
            let batch_index = c.u64()?;
            let name_len = c.u16()? as usize;
            if name_len == 0 {
                return Err(c.err(DecodeCause::EmptySegmentName));
            }
            let at = c.pos;
            let raw = c.take(name_len)?;
            let segment_name = std::str::from_utf8(raw)
                .map_err(|_| DecodeError {
                    offset: c.base + at,
                    cause: DecodeCause::InvalidUtf8,
                })?
                .to_owned();
            let byte_len = c.u64()?;
            let code = c.u8()?;
            let dtype = DType::from_code(code).ok_or_else(|| {
                c.pos -= 1;
                c.err(DecodeCause::UnknownDType(code))
            })?;
            let ndim = c.u8()?;
            if ndim as usize > MAX_NDIM {
                c.pos -= 1;
                return Err(c.err(DecodeCause::TooManyDims(ndim)));
            }
            let shape_at = c.pos;
            let shape = (0..ndim).map(|_| c.u64()).collect::<Result<Vec<_>, _>>()?;
            if shape_byte_len(&shape, dtype) != Some(byte_len) {
                return Err(DecodeError {
                    offset: c.base + shape_at,
                    cause: DecodeCause::ShapeMismatch,
                });
            }
            let checksum = c.u32()?;
            ControlMessage::Announce(Announce {
                epoch,
                batch_index,
                segment_name,
                byte_len,
                dtype,
                shape,
                checksum,
            })
        }
        4 => ControlMessage::Ack {
            consumer_id: c.u64()?,
            epoch: c.u32()?,
            batch_index: c.u64()?,
        },
        5 => ControlMessage::Heartbeat {
            consumer_id: c.u64()?,
            monotonic_millis: c.u64()?,
        },
        6 => {
            let epoch = c.u32()?;
            let at = c.pos;
            let epoch_len = c.u64()?;
            if epoch_len == 0 {
                c.pos = at;
                return Err(c.err(DecodeCause::ZeroEpochLen));
            }
            ControlMessage::EpochStart { epoch, epoch_len }
        }
        7 => ControlMessage::EpochEnd { epoch: c.u32()? },
        8 => ControlMessage::Bye {
            consumer_id: c.u64()?,
        },
        9 => ControlMessage::Shutdown,
        other => {
            return Err(DecodeError {
                offset: LEN_PREFIX,
                cause: DecodeCause::UnknownKind(other),
            })
        }
    };
    if c.pos != body.len() {
        return Err(c.err(DecodeCause::LengthMismatch {
            declared: (body.len() + 1) as u32,
            actual: c.pos + 1,
        }));
    }
    Ok(msg)
}

/// Decodes a frame body (kind byte onwards) whose length prefix was already consumed.
pub fn decode_body_bytes(body: &[u8]) -> Result<ControlMessage, DecodeError> {
    let (&kind, rest) = body.split_first().ok_or(DecodeError {
        offset: LEN_PREFIX,
        cause: DecodeCause::MissingKind,
    })?;
    decode_body(kind, rest)
}

/// Decodes the first frame in `buf`, returning the message and the number of
/// bytes it occupied. Never reads past the declared length.
pub fn decode_frame(buf: &[u8]) -> Result<(ControlMessage, usize), DecodeError> {
    if buf.len() < LEN_PREFIX {
        return Err(DecodeError {
            offset: 0,
            cause: DecodeCause::TruncatedLength,
        });
    }
    let declared = u32::from_le_bytes(buf[..LEN_PREFIX].try_into().unwrap());
    if declared > MAX_FRAME_LEN {
        return Err(DecodeError {
            offset: 0,
            cause: DecodeCause::FrameTooLarge(declared),
        });
    }
    let end = LEN_PREFIX + declared as usize;
    if buf.len() < end {
        return Err(DecodeError {
            offset: buf.len(),
            cause: DecodeCause::LengthMismatch {
                declared,
                actual: buf.len() - LEN_PREFIX,
            },
        });
    }
    let msg = decode_body_bytes(&buf[LEN_PREFIX..end])?;
    Ok((msg, end))
}

/// Decodes exactly one frame; trailing bytes are a length mismatch.
pub fn decode_message(frame: &[u8]) -> Result<ControlMessage, DecodeError> {
    let (msg, used) = decode_frame(frame)?;
    if used != frame.len() {
        return Err(DecodeError {
            offset: used,
            cause: DecodeCause::LengthMismatch {
                declared: (used - LEN_PREFIX) as u32,
                actual: frame.len() - LEN_PREFIX,
            },
        });
    }
    Ok(msg)
}

/// Incremental decoder for a byte stream that arrives in arbitrary chunks.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Returns the next complete message, or `None` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<ControlMessage>, DecodeError> {
        if self.buf.len() < LEN_PREFIX {
            return Ok(None);
        }
        let declared = u32::from_le_bytes(self.buf[..LEN_PREFIX].try_into().unwrap());
        if declared > MAX_FRAME_LEN {
            return Err(DecodeError {
                offset: 0,
                cause: DecodeCause::FrameTooLarge(declared),
            });
        }
        if self.buf.len() < LEN_PREFIX + declared as usize {
            return Ok(None);
        }
        let (msg, used) = decode_frame(&self.buf)?;
        self.buf.drain(..used);
        Ok(Some(msg))
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Reads one frame from a blocking stream. `Ok(None)` signals a clean EOF at a
/// frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<ControlMessage>, FrameIoError> {
    let mut len = [0u8; LEN_PREFIX];
    let mut got = 0;
    while got < LEN_PREFIX {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let declared = u32::from_le_bytes(len);
    if declared > MAX_FRAME_LEN {
        return Err(DecodeError {
            offset: 0,
            cause: DecodeCause::FrameTooLarge(declared),
        }
        .into());
    }
    let mut body = vec![0u8; declared as usize];
    r.read_exact(&mut body)?;
    Ok(Some(decode_body_bytes(&body)?))
}

pub fn write_frame<W: Write>(w: &mut W, msg: &ControlMessage) -> Result<(), FrameIoError> {
    let frame = encode_message(msg)?;
    w.write_all(&frame)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn announce(shape: Vec<u64>, dtype: DType) -> Announce {
        let byte_len = shape_byte_len(&shape, dtype).unwrap();
        Announce {
            epoch: 3,
            batch_index: 9,
            segment_name: "tsk-1-3-9".into(),
            byte_len,
            dtype,
            shape,
            checksum: 0xdead_beef,
        }
    }

    #[test]
    fn shutdown_frame_bytes() {
        assert_eq!(encode_message(&ControlMessage::Shutdown).unwrap(), [1, 0, 0, 0, 9]);
    }

    #[test]
    fn ack_frame_bytes() {
        let frame = encode_message(&ControlMessage::Ack {
            consumer_id: 7,
            epoch: 0,
            batch_index: 42,
        })
        .unwrap();
        let mut expected = vec![21, 0, 0, 0, 4];
        expected.extend_from_slice(&[7, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&[0, 0, 0, 0]);
        expected.extend_from_slice(&[0x2a, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(frame, expected);
    }

    #[test]
    fn zero_length_body_is_missing_kind() {
        let err = decode_message(&[0, 0, 0, 0]).unwrap_err();
        assert_eq!(err.cause, DecodeCause::MissingKind);
    }

    #[test]
    fn unknown_kind() {
        let err = decode_message(&[1, 0, 0, 0, 250]).unwrap_err();
        assert_eq!(err.cause, DecodeCause::UnknownKind(250));
        assert_eq!(err.offset, 4);
    }

    #[test]
    fn imagenet_sized_announce_round_trips() {
        let a = announce(vec![512, 3, 224, 224], DType::F32);
        assert_eq!(a.byte_len, 512 * 3 * 224 * 224 * 4);
        let msg = ControlMessage::Announce(a);
        assert_eq!(decode_message(&encode_message(&msg).unwrap()).unwrap(), msg);
    }

    #[test]
    fn announce_invariants_enforced_on_encode() {
        let mut a = announce(vec![4, 2], DType::F32);
        a.byte_len += 1;
        assert!(matches!(
            encode_message(&ControlMessage::Announce(a)),
            Err(EncodeError::ShapeMismatch { .. })
        ));
        let mut a = announce(vec![4], DType::U8);
        a.segment_name = "x".repeat(256);
        assert_eq!(
            encode_message(&ControlMessage::Announce(a)),
            Err(EncodeError::SegmentNameTooLong(256))
        );
        let mut a = announce(vec![1; 9], DType::U8);
        a.byte_len = 1;
        assert_eq!(encode_message(&ControlMessage::Announce(a)), Err(EncodeError::TooManyDims(9)));
        let mut a = announce(vec![4], DType::U8);
        a.segment_name.clear();
        assert_eq!(encode_message(&ControlMessage::Announce(a)), Err(EncodeError::EmptySegmentName));
        assert_eq!(
            encode_message(&ControlMessage::EpochStart { epoch: 0, epoch_len: 0 }),
            Err(EncodeError::ZeroEpochLen)
        );
    }

    #[test]
    fn decode_rejects_bad_fields() {
        let mut frame = encode_message(&ControlMessage::Announce(announce(vec![2, 2], DType::I32))).unwrap();
        // dtype byte sits after len(4) kind(1) epoch(4) index(8) name_len(2) name(9) byte_len(8)
        let dtype_at = 4 + 1 + 4 + 8 + 2 + 9 + 8;
        frame[dtype_at] = 17;
        let err = decode_message(&frame).unwrap_err();
        assert_eq!(err.cause, DecodeCause::UnknownDType(17));
        assert_eq!(err.offset, dtype_at);

        frame[dtype_at] = DType::I64.code();
        assert_eq!(decode_message(&frame).unwrap_err().cause, DecodeCause::ShapeMismatch);

        let mut welcome = encode_message(&ControlMessage::Welcome {
            consumer_id: 1,
            epoch: 0,
            epoch_len: 5,
            next_batch_index: 0,
            buffer_depth: 2,
            admitted: Admission::Immediate,
        })
        .unwrap();
        let last = welcome.len() - 1;
        welcome[last] = 3;
        assert_eq!(decode_message(&welcome).unwrap_err().cause, DecodeCause::UnknownAdmission(3));
    }

    #[test]
    fn truncated_and_trailing_frames() {
        let frame = encode_message(&ControlMessage::Bye { consumer_id: 5 }).unwrap();
        assert!(matches!(
            decode_message(&frame[..frame.len() - 1]).unwrap_err().cause,
            DecodeCause::LengthMismatch { .. }
        ));
        let mut long = frame.clone();
        long.push(0);
        assert!(matches!(
            decode_message(&long).unwrap_err().cause,
            DecodeCause::LengthMismatch { .. }
        ));
        // Declared length shorter than the body the kind requires.
        let mut short = frame.clone();
        short[0] = 5;
        short.truncate(9);
        assert_eq!(decode_message(&short).unwrap_err().cause, DecodeCause::Truncated);
        assert_eq!(decode_message(&[1, 0]).unwrap_err().cause, DecodeCause::TruncatedLength);
    }

    #[test]
    fn oversize_declared_length_is_rejected_before_allocation() {
        let err = decode_frame(&[0xff, 0xff, 0xff, 0x7f, 1]).unwrap_err();
        assert_eq!(err.cause, DecodeCause::FrameTooLarge(0x7fff_ffff));
    }

    #[test]
    fn crc_check_values() {
        assert_eq!(checksum(b""), 0);
        assert_eq!(checksum(b"123456789"), 0xCBF4_3926);
        let mut data = b"hello world".to_vec();
        let a = checksum(&data);
        assert_eq!(a, checksum(&data));
        data[3] ^= 0x10;
        assert_ne!(a, checksum(&data));
    }

    #[test]
    fn read_frame_reports_clean_eof() {
        let mut bytes = encode_message(&ControlMessage::EpochEnd { epoch: 2 }).unwrap();
        bytes.extend(encode_message(&ControlMessage::Shutdown).unwrap());
        let mut r = io::Cursor::new(bytes);
        assert_eq!(read_frame(&mut r).unwrap(), Some(ControlMessage::EpochEnd { epoch: 2 }));
        assert_eq!(read_frame(&mut r).unwrap(), Some(ControlMessage::Shutdown));
        assert!(read_frame(&mut r).unwrap().is_none());
    }
}
