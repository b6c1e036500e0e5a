//! Binary framing and message encodings.
//!
//! Every frame is `"PSIF" | version u8 | msg_type u8 | payload_len u32 |
//! payload`, integers big-endian, payload capped at 64 MiB. Lists encode
//! as a u32 count followed by fixed-width items; strings as a u16 length
//! followed by UTF-8 bytes.

use std::io::{Read, Write};

use thiserror::Error;

use crate::bloom::{BloomError, BloomFilter};
use crate::commgroup::{GroupElement, GroupError};
use crate::geotoken::{Resolution, TimeMode};
use crate::psi::{
    ResolutionSelection, Round1Entry, Round1Msg, Round2Msg, Round3Msg, SessionId,
};

pub const MAGIC: [u8; 4] = *b"PSIF";
pub const VERSION: u8 = 1;
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;
/// Frame header: magic, version, msg_type, payload length.
pub const HEADER_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("payload of {0} bytes exceeds the 64 MiB cap")]
    PayloadTooLarge(u32),
    #[error("payload truncated: needed {need} more bytes")]
    Truncated { need: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid {0} field")]
    BadField(&'static str),
    #[error("element encoding: {0}")]
    Group(#[from] GroupError),
    #[error("bloom encoding: {0}")]
    Bloom(#[from] BloomError),
}

/// Error report sent in place of a protocol reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    BadFrame = 1,
    UnknownSession = 2,
    ResolutionMismatch = 3,
    TamperedTranscript = 4,
    SessionExpired = 5,
    Internal = 6,
}

impl ErrorCode {
    fn from_u16(code: u16) -> Result<Self, FrameError> {
        Ok(match code {
            1 => ErrorCode::BadFrame,
            2 => ErrorCode::UnknownSession,
            3 => ErrorCode::ResolutionMismatch,
            4 => ErrorCode::TamperedTranscript,
            5 => ErrorCode::SessionExpired,
            6 => ErrorCode::Internal,
            _ => return Err(FrameError::BadField("error code")),
        })
    }
}

/// Client request to abandon its session and restart at a coarser
/// resolution with a fresh key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescentNext {
    pub session_id: SessionId,
    pub requested_r: Resolution,
}

/// Any message that can cross the wire.
#[derive(Debug, Clone)]
pub enum WireMsg {
    Round1(Round1Msg),
    Round2(Round2Msg),
    Round3(Round3Msg),
    Error(ErrorPayload),
    DescentNext(DescentNext),
}

impl WireMsg {
    pub fn msg_type(&self) -> u8 {
        match self {
            WireMsg::Round1(_) => 1,
            WireMsg::Round2(_) => 2,
            WireMsg::Round3(_) => 3,
            WireMsg::Error(_) => 4,
            WireMsg::DescentNext(_) => 5,
        }
    }
}

/// Serializes a message into one complete frame.
pub fn encode_frame(msg: &WireMsg) -> Vec<u8> {
    let payload = encode_payload(msg);
    debug_assert!(payload.len() <= MAX_PAYLOAD);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parses one complete frame, rejecting trailing bytes.
pub fn decode_frame(bytes: &[u8]) -> Result<WireMsg, FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            need: HEADER_LEN - bytes.len(),
        });
    }
    let (header, rest) = bytes.split_at(HEADER_LEN);
    let (msg_type, payload_len) = parse_header(header.try_into().expect("split size"))?;
    if rest.len() < payload_len {
        return Err(FrameError::Truncated {
            need: payload_len - rest.len(),
        });
    }
    if rest.len() > payload_len {
        return Err(FrameError::TrailingBytes(rest.len() - payload_len));
    }
    decode_payload(msg_type, rest)
}

/// Writes one frame to a stream.
pub fn write_frame<W: Write>(w: &mut W, msg: &WireMsg) -> Result<(), FrameError> {
    w.write_all(&encode_frame(msg))?;
    w.flush()?;
    Ok(())
}

/// Reads exactly one frame from a stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<WireMsg, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let (msg_type, payload_len) = parse_header(&header)?;
    let mut payload = vec![0u8; payload_len];
    r.read_exact(&mut payload)?;
    decode_payload(msg_type, &payload)
}

fn parse_header(header: &[u8; HEADER_LEN]) -> Result<(u8, usize), FrameError> {
    if header[0..4] != MAGIC {
        return Err(FrameError::BadMagic(
            header[0..4].try_into().expect("4-byte slice"),
        ));
    }
    if header[4] != VERSION {
        return Err(FrameError::UnsupportedVersion(header[4]));
    }
    let msg_type = header[5];
    if !(1..=5).contains(&msg_type) {
        return Err(FrameError::UnknownMsgType(msg_type));
    }
    let payload_len = u32::from_be_bytes(header[6..10].try_into().expect("4-byte slice"));
    if payload_len as usize > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(payload_len));
    }
    Ok((msg_type, payload_len as usize))
}

fn encode_payload(msg: &WireMsg) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        WireMsg::Round1(m) => {
            out.extend_from_slice(&m.session_id);
            out.push(time_mode_byte(m.time_mode));
            out.extend_from_slice(&(m.entries.len() as u32).to_be_bytes());
            for entry in &m.entries {
                out.push(entry.resolution.get());
                out.extend_from_slice(&entry.set_size.to_be_bytes());
                encode_bloom(&mut out, &entry.bloom);
            }
        }
        WireMsg::Round2(m) => {
            out.extend_from_slice(&m.session_id);
            out.push(match m.selection {
                ResolutionSelection::All => 0,
                ResolutionSelection::At(r) => r.get(),
            });
            encode_elements(&mut out, &m.elements);
        }
        WireMsg::Round3(m) => {
            out.extend_from_slice(&m.session_id);
            encode_elements(&mut out, &m.elements);
        }
        WireMsg::Error(m) => {
            out.extend_from_slice(&(m.code as u16).to_be_bytes());
            let bytes = m.message.as_bytes();
            let len = bytes.len().min(u16::MAX as usize);
            out.extend_from_slice(&(len as u16).to_be_bytes());
            out.extend_from_slice(&bytes[..len]);
        }
        WireMsg::DescentNext(m) => {
            out.extend_from_slice(&m.session_id);
            out.push(m.requested_r.get());
        }
    }
    out
}

fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<WireMsg, FrameError> {
    let mut r = Reader { buf: payload };
    let msg = match msg_type {
        1 => {
            let session_id = r.session_id()?;
            let time_mode = parse_time_mode(r.u8()?)?;
            let count = r.u32()? as usize;
            let mut entries = Vec::new();
            for _ in 0..count {
                let resolution = parse_resolution(r.u8()?)?;
                let set_size = r.u64()?;
                let bloom = decode_bloom(&mut r)?;
                entries.push(Round1Entry {
                    resolution,
                    set_size,
                    bloom,
                });
            }
            WireMsg::Round1(Round1Msg {
                session_id,
                time_mode,
                entries,
            })
        }
        2 => {
            let session_id = r.session_id()?;
            let selection = match r.u8()? {
                0 => ResolutionSelection::All,
                b => ResolutionSelection::At(parse_resolution(b)?),
            };
            let elements = decode_elements(&mut r)?;
            WireMsg::Round2(Round2Msg {
                session_id,
                selection,
                elements,
            })
        }
        3 => {
            let session_id = r.session_id()?;
            let elements = decode_elements(&mut r)?;
            WireMsg::Round3(Round3Msg {
                session_id,
                elements,
            })
        }
        4 => {
            let code = ErrorCode::from_u16(r.u16()?)?;
            let len = r.u16()? as usize;
            let bytes = r.take(len)?;
            let message = std::str::from_utf8(bytes)
                .map_err(|_| FrameError::BadField("error message"))?
                .to_string();
            WireMsg::Error(ErrorPayload { code, message })
        }
        5 => {
            let session_id = r.session_id()?;
            let requested_r = parse_resolution(r.u8()?)?;
            WireMsg::DescentNext(DescentNext {
                session_id,
                requested_r,
            })
        }
        other => return Err(FrameError::UnknownMsgType(other)),
    };
    if !r.buf.is_empty() {
        return Err(FrameError::TrailingBytes(r.buf.len()));
    }
    Ok(msg)
}

fn encode_bloom(out: &mut Vec<u8>, bloom: &BloomFilter) {
    out.extend_from_slice(&bloom.m().to_be_bytes());
    out.push(bloom.k_hashes());
    out.extend_from_slice(&bloom.fp_rate().to_be_bytes());
    out.extend_from_slice(bloom.raw_bits());
}

fn decode_bloom(r: &mut Reader<'_>) -> Result<BloomFilter, FrameError> {
    let m = r.u32()?;
    let k_hashes = r.u8()?;
    let fp_rate = f64::from_be_bytes(r.take(8)?.try_into().expect("8-byte slice"));
    let bits = r.take(m.div_ceil(8) as usize)?.to_vec();
    Ok(BloomFilter::from_raw_parts(m, k_hashes, fp_rate, bits)?)
}

fn encode_elements(out: &mut Vec<u8>, elements: &[GroupElement]) {
    out.extend_from_slice(&(elements.len() as u32).to_be_bytes());
    for e in elements {
        out.extend_from_slice(&e.to_bytes());
    }
}

fn decode_elements(r: &mut Reader<'_>) -> Result<Vec<GroupElement>, FrameError> {
    let count = r.u32()? as usize;
    let mut elements = Vec::with_capacity(count.min(r.buf.len() / 32 + 1));
    for _ in 0..count {
        let bytes: [u8; 32] = r.take(32)?.try_into().expect("32-byte slice");
        elements.push(GroupElement::from_bytes(&bytes)?);
    }
    Ok(elements)
}

fn time_mode_byte(mode: TimeMode) -> u8 {
    match mode {
        TimeMode::None => 0,
        TimeMode::HourOfDay => 1,
        TimeMode::AbsoluteHour => 2,
    }
}

fn parse_time_mode(b: u8) -> Result<TimeMode, FrameError> {
    Ok(match b {
        0 => TimeMode::None,
        1 => TimeMode::HourOfDay,
        2 => TimeMode::AbsoluteHour,
        _ => return Err(FrameError::BadField("time_mode")),
    })
}

fn parse_resolution(b: u8) -> Result<Resolution, FrameError> {
    Resolution::new(b).map_err(|_| FrameError::BadField("resolution"))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.buf.len() < n {
            return Err(FrameError::Truncated {
                need: n - self.buf.len(),
            });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FrameError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2-byte slice")))
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4-byte slice")))
    }

    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8-byte slice")))
    }

    fn session_id(&mut self) -> Result<SessionId, FrameError> {
        Ok(self.take(16)?.try_into().expect("16-byte slice"))
    }
}
