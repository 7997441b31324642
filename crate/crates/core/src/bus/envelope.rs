use std::io::{self, Read};

use thiserror::Error;

/// Largest frame body accepted on the wire (16 MiB).
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

const LEN_PREFIX: usize = 4;
const TOPIC_LEN: usize = 2;
const SEQ_LEN: usize = 8;
const STAMP_LEN: usize = 8;
const HEADER_MIN: usize = TOPIC_LEN + SEQ_LEN + STAMP_LEN;

/// One published message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub topic: String,
    pub seq: u64,
    pub timestamp_ns: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated frame: missing {field}")]
    Truncated { field: &'static str },
    #[error("frame length {len} exceeds the {max} byte maximum")]
    OverLength { len: usize, max: usize },
    #[error("frame length field declares {declared} bytes but {actual} follow")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("invalid topic: {reason}")]
    InvalidTopic { reason: &'static str },
}

/// Checks the topic rules shared by the codec and both transports.
pub fn validate_topic(topic: &str) -> Result<(), CodecError> {
    if topic.is_empty() {
        return Err(CodecError::InvalidTopic { reason: "empty" });
    }
    if topic.len() > u16::MAX as usize {
        return Err(CodecError::InvalidTopic {
            reason: "longer than 65535 bytes",
        });
    }
    if topic.chars().any(char::is_control) {
        return Err(CodecError::InvalidTopic {
            reason: "contains control characters",
        });
    }
    Ok(())
}

impl Envelope {
    pub fn new(topic: impl Into<String>, seq: u64, timestamp_ns: u64, payload: Vec<u8>) -> Self {
        Self {
            topic: topic.into(),
            seq,
            timestamp_ns,
            payload,
        }
    }
}

/// Encodes `e` as a length-prefixed frame:
/// `u32 len | u16 topic_len | topic | u64 seq | u64 timestamp_ns | payload`,
/// all integers big-endian.
pub fn encode_envelope(e: &Envelope) -> Result<Vec<u8>, CodecError> {
    validate_topic(&e.topic)?;
    let body_len = HEADER_MIN + e.topic.len() + e.payload.len();
    if body_len > MAX_FRAME_LEN {
        return Err(CodecError::OverLength {
            len: body_len,
            max: MAX_FRAME_LEN,
        });
    }
    let mut out = Vec::with_capacity(LEN_PREFIX + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.extend_from_slice(&(e.topic.len() as u16).to_be_bytes());
    out.extend_from_slice(e.topic.as_bytes());
    out.extend_from_slice(&e.seq.to_be_bytes());
    out.extend_from_slice(&e.timestamp_ns.to_be_bytes());
    out.extend_from_slice(&e.payload);
    Ok(out)
}

/// Decodes one complete frame (length prefix included). Trailing bytes are
/// rejected.
pub fn decode_envelope(bytes: &[u8]) -> Result<Envelope, CodecError> {
    let prefix = bytes
        .get(..LEN_PREFIX)
        .ok_or(CodecError::Truncated { field: "frame length" })?;
    let declared = u32::from_be_bytes(prefix.try_into().unwrap()) as usize;
    if declared > MAX_FRAME_LEN {
        return Err(CodecError::OverLength {
            len: declared,
            max: MAX_FRAME_LEN,
        });
    }
    let body = &bytes[LEN_PREFIX..];
    if body.len() != declared {
        return Err(CodecError::LengthMismatch {
            declared,
            actual: body.len(),
        });
    }
    decode_body(body)
}

/// Decodes a frame body (everything after the length prefix).
pub fn decode_body(body: &[u8]) -> Result<Envelope, CodecError> {
    let mut cur = Cursor { buf: body, pos: 0 };
    let topic_len = u16::from_be_bytes(cur.take::<2>("topic length")?) as usize;
    let topic_bytes = cur.take_slice(topic_len, "topic")?;
    let topic = std::str::from_utf8(topic_bytes)
        .map_err(|_| CodecError::InvalidTopic {
            reason: "not valid UTF-8",
        })?
        .to_owned();
    validate_topic(&topic)?;
    let seq = u64::from_be_bytes(cur.take::<8>("seq")?);
    let timestamp_ns = u64::from_be_bytes(cur.take::<8>("timestamp_ns")?);
    let payload = body[cur.pos..].to_vec();
    Ok(Envelope {
        topic,
        seq,
        timestamp_ns,
        payload,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take_slice(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated { field })?;
        let s = self.buf.get(self.pos..end).ok_or(CodecError::Truncated { field })?;
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N], CodecError> {
        Ok(self.take_slice(N, field)?.try_into().unwrap())
    }
}

/// Error reading a frame from a byte stream.
#[derive(Debug, Error)]
pub enum FrameReadError {
    #[error("connection closed")]
    Eof,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Reads one frame from a stream. A clean EOF before the first byte of the
/// length prefix yields [`FrameReadError::Eof`].
pub fn read_frame<R: Read>(r: &mut R) -> Result<Envelope, FrameReadError> {
    let mut prefix = [0u8; LEN_PREFIX];
    let mut got = 0;
    while got < LEN_PREFIX {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Err(FrameReadError::Eof),
            Ok(0) => {
                return Err(CodecError::Truncated {
                    field: "frame length",
                }
                .into())
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(CodecError::OverLength {
            len,
            max: MAX_FRAME_LEN,
        }
        .into());
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FrameReadError::Codec(CodecError::Truncated { field: "frame body" })
        } else {
            FrameReadError::Io(e)
        }
    })?;
    Ok(decode_body(&body)?)
}
