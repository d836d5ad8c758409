//! Framed binary protocol shared by clients, the training server and the launcher.
//!
//! Every frame is `header ‖ body ‖ crc32(body)`:
//!
//! | offset | size | field      | encoding                          |
//! |--------|------|------------|-----------------------------------|
//! | 0      | 4    | magic      | ASCII `MLSA` (0x4D 0x4C 0x53 0x41) |
//! | 4      | 2    | version    | u16 LE, currently 1               |
//! | 6      | 2    | msg_type   | u16 LE                            |
//! | 8      | 4    | body_len   | u32 LE                            |
//! | 12     | n    | body       | message specific, see [`MsgType`] |
//! | 12+n   | 4    | crc32      | u32 LE, CRC-32/IEEE of body only  |
//!
//! All integers are little-endian and all reals are IEEE-754 binary64
//! little-endian. There is no resynchronization: once a [`FrameReader`]
//! reports an error it refuses any further reads.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MLSA";
pub const MAGIC_U32: u32 = 0x4D4C_5341;
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;
pub const CRC_LEN: usize = 4;

/// Largest `value_count` / `param_count` the encoder accepts.
pub const MAX_VALUE_COUNT: u64 = 1 << 31;

/// Frames larger than this are rejected before buffering the body.
pub const MAX_BODY_LEN: u32 = 1 << 30;

/// Bye.last_t value used when a session finalizes without sending a step.
pub const EMPTY_TRAJECTORY: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum MsgType {
    Hello = 1,
    Timestep = 2,
    Bye = 3,
    Heartbeat = 4,
    ParamRequest = 5,
    ParamAssign = 6,
    Ack = 7,
    /// Launcher → server: drain buffers, checkpoint and stop.
    Shutdown = 8,
}

impl MsgType {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => Self::Hello,
            2 => Self::Timestep,
            3 => Self::Bye,
            4 => Self::Heartbeat,
            5 => Self::ParamRequest,
            6 => Self::ParamAssign,
            7 => Self::Ack,
            8 => Self::Shutdown,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello {
        client_id: u64,
        sim_id: u64,
        params: Vec<f64>,
        field_shape: Vec<u32>,
    },
    Timestep {
        sim_id: u64,
        t_index: u32,
        values: Vec<f64>,
    },
    Bye {
        sim_id: u64,
        last_t: u32,
    },
    Heartbeat {
        sender_id: u64,
        wallclock_ms: u64,
    },
    ParamRequest {
        count: u32,
    },
    ParamAssign {
        sim_id: u64,
        params: Vec<f64>,
    },
    Ack {
        ref_msg_type: u16,
    },
    Shutdown,
}

impl WireMessage {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Self::Hello { .. } => MsgType::Hello,
            Self::Timestep { .. } => MsgType::Timestep,
            Self::Bye { .. } => MsgType::Bye,
            Self::Heartbeat { .. } => MsgType::Heartbeat,
            Self::ParamRequest { .. } => MsgType::ParamRequest,
            Self::ParamAssign { .. } => MsgType::ParamAssign,
            Self::Ack { .. } => MsgType::Ack,
            Self::Shutdown => MsgType::Shutdown,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic 0x{0:08X}")]
    BadMagic(u32),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u16),
    #[error("crc mismatch: frame says 0x{expected:08X}, body hashes to 0x{actual:08X}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown message type {0}")]
    UnknownMsgType(u16),
    #[error("malformed {msg:?} body: {reason}")]
    Malformed { msg: MsgType, reason: &'static str },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("count {0} exceeds encoding limit")]
    EncodingLimit(u64),
    #[error("frame body of {0} bytes exceeds limit")]
    FrameTooLarge(u32),
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

struct BodyWriter(Vec<u8>);

impl BodyWriter {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn count(&mut self, n: usize) -> Result<(), WireError> {
        let n = n as u64;
        if n > MAX_VALUE_COUNT {
            return Err(WireError::EncodingLimit(n));
        }
        self.u32(n as u32);
        Ok(())
    }
}

/// Encodes one message into a complete frame.
pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(HEADER_LEN + 64);
    encode_into(msg, &mut out)?;
    Ok(out)
}

/// Appends the frame for `msg` to `out`. On error `out` is left unchanged.
pub fn encode_into(msg: &WireMessage, out: &mut Vec<u8>) -> Result<(), WireError> {
    let mut body = BodyWriter(Vec::new());
    match msg {
        WireMessage::Hello {
            client_id,
            sim_id,
            params,
            field_shape,
        } => {
            body.u64(*client_id);
            body.u64(*sim_id);
            body.count(params.len())?;
            body.f64s(params);
            body.count(field_shape.len())?;
            for d in field_shape {
                body.u32(*d);
            }
        }
        WireMessage::Timestep {
            sim_id,
            t_index,
            values,
        } => {
            body.u64(*sim_id);
            body.u32(*t_index);
            body.count(values.len())?;
            body.f64s(values);
        }
        WireMessage::Bye { sim_id, last_t } => {
            body.u64(*sim_id);
            body.u32(*last_t);
        }
        WireMessage::Heartbeat {
            sender_id,
            wallclock_ms,
        } => {
            body.u64(*sender_id);
            body.u64(*wallclock_ms);
        }
        WireMessage::ParamRequest { count } => body.u32(*count),
        WireMessage::ParamAssign { sim_id, params } => {
            body.u64(*sim_id);
            body.count(params.len())?;
            body.f64s(params);
        }
        WireMessage::Ack { ref_msg_type } => body.u16(*ref_msg_type),
        WireMessage::Shutdown => {}
    }
    frame(msg.msg_type(), &body.0, out)
}

/// Timestep frame straight from a field slice, without building a
/// [`WireMessage`] first. Byte-identical to encoding the message.
pub fn encode_timestep_into(
    sim_id: u64,
    t_index: u32,
    values: &[f64],
    out: &mut Vec<u8>,
) -> Result<(), WireError> {
    let mut body = BodyWriter(Vec::with_capacity(16 + 8 * values.len()));
    body.u64(sim_id);
    body.u32(t_index);
    body.count(values.len())?;
    body.f64s(values);
    frame(MsgType::Timestep, &body.0, out)
}

fn frame(msg_type: MsgType, body: &[u8], out: &mut Vec<u8>) -> Result<(), WireError> {
    if body.len() > MAX_BODY_LEN as usize {
        return Err(WireError::FrameTooLarge(body.len().min(u32::MAX as usize) as u32));
    }
    out.reserve(HEADER_LEN + body.len() + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(msg_type as u16).to_le_bytes());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(&crc32(body).to_le_bytes());
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Header {
    msg_type: u16,
    body_len: u32,
}

fn parse_header(bytes: &[u8]) -> Result<Header, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(WireError::BadMagic(u32::from_be_bytes(
            bytes[0..4].try_into().unwrap(),
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let msg_type = u16::from_le_bytes([bytes[6], bytes[7]]);
    let body_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if body_len > MAX_BODY_LEN {
        return Err(WireError::FrameTooLarge(body_len));
    }
    Ok(Header { msg_type, body_len })
}

fn frame_len(h: Header) -> usize {
    HEADER_LEN + h.body_len as usize + CRC_LEN
}

/// Decodes exactly one frame; the input must contain nothing else.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, WireError> {
    let (msg, used) = decode_frame(bytes)?;
    if used != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - used));
    }
    Ok(msg)
}

/// Decodes the frame at the start of `bytes`, returning it and the number of
/// bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(WireMessage, usize), WireError> {
    let header = parse_header(bytes)?;
    let total = frame_len(header);
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    let body = &bytes[HEADER_LEN..HEADER_LEN + header.body_len as usize];
    let expected = u32::from_le_bytes(bytes[total - CRC_LEN..total].try_into().unwrap());
    let actual = crc32(body);
    if expected != actual {
        return Err(WireError::CrcMismatch { expected, actual });
    }
    let msg_type =
        MsgType::from_u16(header.msg_type).ok_or(WireError::UnknownMsgType(header.msg_type))?;
    Ok((decode_body(msg_type, body)?, total))
}

struct BodyReader<'a> {
    msg: MsgType,
    rest: &'a [u8],
}

impl<'a> BodyReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.rest.len() < n {
            return Err(WireError::Malformed {
                msg: self.msg,
                reason: "body shorter than its declared fields",
            });
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: u32) -> Result<Vec<f64>, WireError> {
        let bytes = self.take(n as usize * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn finish(self) -> Result<(), WireError> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(WireError::Malformed {
                msg: self.msg,
                reason: "body longer than its declared fields",
            })
        }
    }
}

fn decode_body(msg: MsgType, body: &[u8]) -> Result<WireMessage, WireError> {
    let mut r = BodyReader { msg, rest: body };
    let out = match msg {
        MsgType::Hello => {
            let client_id = r.u64()?;
            let sim_id = r.u64()?;
            let n = r.u32()?;
            let params = r.f64s(n)?;
            let rank = r.u32()?;
            let mut field_shape = Vec::with_capacity(rank.min(64) as usize);
            for _ in 0..rank {
                field_shape.push(r.u32()?);
            }
            WireMessage::Hello {
                client_id,
                sim_id,
                params,
                field_shape,
            }
        }
        MsgType::Timestep => {
            let sim_id = r.u64()?;
            let t_index = r.u32()?;
            let n = r.u32()?;
            WireMessage::Timestep {
                sim_id,
                t_index,
                values: r.f64s(n)?,
            }
        }
        MsgType::Bye => WireMessage::Bye {
            sim_id: r.u64()?,
            last_t: r.u32()?,
        },
        MsgType::Heartbeat => WireMessage::Heartbeat {
            sender_id: r.u64()?,
            wallclock_ms: r.u64()?,
        },
        MsgType::ParamRequest => WireMessage::ParamRequest { count: r.u32()? },
        MsgType::ParamAssign => {
            let sim_id = r.u64()?;
            let n = r.u32()?;
            WireMessage::ParamAssign {
                sim_id,
                params: r.f64s(n)?,
            }
        }
        MsgType::Ack => WireMessage::Ack {
            ref_msg_type: r.u16()?,
        },
        MsgType::Shutdown => WireMessage::Shutdown,
    };
    r.finish()?;
    Ok(out)
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed mid-frame ({0} bytes pending)")]
    UnexpectedEof(usize),
    #[error("reader poisoned by an earlier error")]
    Poisoned,
}

#[derive(Debug)]
pub enum ReadOutcome {
    Message(WireMessage),
    /// Clean end of stream on a frame boundary.
    Eof,
    /// The underlying reader timed out; partial data is kept.
    Idle,
}

/// Incremental frame reader over a byte stream.
///
/// Tolerates read timeouts (partial frames are retained) so the owner can poll
/// a shutdown flag between reads.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
    poisoned: bool,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: Vec::with_capacity(4096),
            poisoned: false,
        }
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }

    pub fn poll(&mut self) -> Result<ReadOutcome, ReadError> {
        if self.poisoned {
            return Err(ReadError::Poisoned);
        }
        let res = self.poll_inner();
        if res.is_err() {
            self.poisoned = true;
        }
        res
    }

    /// Blocks (through `Idle` outcomes) until a message or end of stream.
    pub fn next_message(&mut self) -> Result<Option<WireMessage>, ReadError> {
        loop {
            match self.poll()? {
                ReadOutcome::Message(m) => return Ok(Some(m)),
                ReadOutcome::Eof => return Ok(None),
                ReadOutcome::Idle => continue,
            }
        }
    }

    fn poll_inner(&mut self) -> Result<ReadOutcome, ReadError> {
        loop {
            if let Some(total) = self.complete_frame_len()? {
                let (msg, used) = decode_frame(&self.buf[..total])?;
                debug_assert_eq!(used, total);
                self.buf.drain(..total);
                return Ok(ReadOutcome::Message(msg));
            }
            let mut chunk = [0u8; 16 * 1024];
            match self.inner.read(&mut chunk) {
                Ok(0) => {
                    return if self.buf.is_empty() {
                        Ok(ReadOutcome::Eof)
                    } else {
                        Err(ReadError::UnexpectedEof(self.buf.len()))
                    };
                }
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    return Ok(ReadOutcome::Idle);
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn complete_frame_len(&self) -> Result<Option<usize>, WireError> {
        if self.buf.len() < HEADER_LEN {
            // Reject garbage as soon as the magic is visible.
            let n = self.buf.len().min(4);
            if self.buf[..n] != MAGIC[..n] {
                let mut m = [0u8; 4];
                m[..n].copy_from_slice(&self.buf[..n]);
                return Err(WireError::BadMagic(u32::from_be_bytes(m)));
            }
            return Ok(None);
        }
        let total = frame_len(parse_header(&self.buf)?);
        Ok((self.buf.len() >= total).then_some(total))
    }
}

/// Encodes and writes one frame in a single `write_all`.
pub fn write_message<W: Write>(w: &mut W, msg: &WireMessage) -> io::Result<()> {
    let frame = encode(msg).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    w.write_all(&frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_count_above_limit_is_refused() {
        let mut body = BodyWriter(Vec::new());
        assert!(body.count(1 << 31).is_ok());
        assert!(matches!(
            body.count((1usize << 31) + 1),
            Err(WireError::EncodingLimit(_))
        ));
    }

    #[test]
    fn timestep_fast_path_matches_encode() {
        let values = vec![1.5, -2.0, f64::MAX];
        let mut fast = Vec::new();
        encode_timestep_into(9, 4, &values, &mut fast).unwrap();
        let msg = WireMessage::Timestep {
            sim_id: 9,
            t_index: 4,
            values,
        };
        assert_eq!(fast, encode(&msg).unwrap());
    }

    #[test]
    fn heartbeat_zero_frame() {
        let bytes = encode(&WireMessage::Heartbeat {
            sender_id: 0,
            wallclock_ms: 0,
        })
        .unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 16 + CRC_LEN);
        assert_eq!(&bytes[..4], b"MLSA");
        assert_eq!(&bytes[4..8], &[1, 0, 4, 0]);
        assert_eq!(&bytes[8..12], &[16, 0, 0, 0]);
        assert!(bytes[12..28].iter().all(|&b| b == 0));
        assert_eq!(&bytes[28..], &0xECBB_4B55u32.to_le_bytes());
    }

    #[test]
    fn timestep_body_layout() {
        let bytes = encode(&WireMessage::Timestep {
            sim_id: 1,
            t_index: 0,
            values: vec![1.0],
        })
        .unwrap();
        let body = &bytes[HEADER_LEN..bytes.len() - CRC_LEN];
        let expected: Vec<u8> = [
            &[1u8, 0, 0, 0, 0, 0, 0, 0][..],
            &[0, 0, 0, 0],
            &[1, 0, 0, 0],
            &[0, 0, 0, 0, 0, 0, 0xF0, 0x3F],
        ]
        .concat();
        assert_eq!(body, &expected[..]);
    }

    #[test]
    fn magic_constant_matches_ascii() {
        assert_eq!(u32::from_be_bytes(MAGIC), MAGIC_U32);
    }

    #[test]
    fn empty_input_is_truncated() {
        assert!(matches!(decode(&[]), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode(&WireMessage::Shutdown).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(WireError::BadMagic(_))));

        let mut bytes = encode(&WireMessage::Shutdown).unwrap();
        bytes[4] = 2;
        assert_eq!(decode(&bytes), Err(WireError::UnsupportedVersion(2)));

        let mut bytes = encode(&WireMessage::Shutdown).unwrap();
        bytes[6] = 99;
        assert_eq!(decode(&bytes), Err(WireError::UnknownMsgType(99)));

        let bytes = encode(&WireMessage::Bye {
            sim_id: 3,
            last_t: 9,
        })
        .unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(WireError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(decode(&long), Err(WireError::TrailingBytes(1)));
    }

    #[test]
    fn flipped_payload_bit_is_crc_mismatch() {
        let mut bytes = encode(&WireMessage::Timestep {
            sim_id: 5,
            t_index: 2,
            values: vec![0.5, -3.0],
        })
        .unwrap();
        bytes[HEADER_LEN + 14] ^= 0x10;
        assert!(matches!(decode(&bytes), Err(WireError::CrcMismatch { .. })));
    }

    #[test]
    fn body_length_disagreeing_with_counts_is_malformed() {
        // A Timestep claiming 2 values but carrying 1, with a valid crc.
        let mut body = Vec::new();
        body.extend_from_slice(&1u64.to_le_bytes());
        body.extend_from_slice(&0u32.to_le_bytes());
        body.extend_from_slice(&2u32.to_le_bytes());
        body.extend_from_slice(&1.0f64.to_le_bytes());
        let mut frame = Vec::new();
        frame.extend_from_slice(&MAGIC);
        frame.extend_from_slice(&1u16.to_le_bytes());
        frame.extend_from_slice(&2u16.to_le_bytes());
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);
        frame.extend_from_slice(&crc32(&body).to_le_bytes());
        assert!(matches!(decode(&frame), Err(WireError::Malformed { .. })));
    }

    #[test]
    fn reader_handles_split_frames_and_poisons() {
        struct Trickle(Vec<u8>, usize, bool);
        impl Read for Trickle {
            fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
                self.2 = !self.2;
                if self.2 {
                    return Err(io::ErrorKind::WouldBlock.into());
                }
                if self.1 >= self.0.len() {
                    return Ok(0);
                }
                let n = 3.min(out.len()).min(self.0.len() - self.1);
                out[..n].copy_from_slice(&self.0[self.1..self.1 + n]);
                self.1 += n;
                Ok(n)
            }
        }
        let msgs = vec![
            WireMessage::ParamRequest { count: 2 },
            WireMessage::Ack { ref_msg_type: 8 },
        ];
        let mut stream = Vec::new();
        for m in &msgs {
            encode_into(m, &mut stream).unwrap();
        }
        stream.extend_from_slice(b"junkjunkjunkjunk");
        let mut r = FrameReader::new(Trickle(stream, 0, false));
        assert_eq!(r.next_message().unwrap(), Some(msgs[0].clone()));
        assert_eq!(r.next_message().unwrap(), Some(msgs[1].clone()));
        assert!(matches!(
            r.next_message(),
            Err(ReadError::Wire(WireError::BadMagic(_)))
        ));
        assert!(r.is_poisoned());
        assert!(matches!(r.poll(), Err(ReadError::Poisoned)));
    }

    #[test]
    fn reader_reports_clean_eof() {
        let mut r = FrameReader::new(io::Cursor::new(encode(&WireMessage::Shutdown).unwrap()));
        assert_eq!(r.next_message().unwrap(), Some(WireMessage::Shutdown));
        assert_eq!(r.next_message().unwrap(), None);
    }
}
