//! Binary PGM (P5) encoding for lane masks (8-bit) and depth maps (16-bit,
//! big-endian). Headers are written as `P5\n<w> <h>\n<maxval>\n`; the reader
//! also accepts arbitrary whitespace and `#` comments.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PgmError {
    #[error("not a binary PGM (missing P5 magic)")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    BadHeader(&'static str),
    #[error("expected maxval {expected}, found {found}")]
    WrongDepth { expected: &'static str, found: u32 },
    #[error("pixel data holds {actual} bytes, {expected} expected")]
    WrongLength { expected: usize, actual: usize },
}

/// Raw decoded raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

fn header(width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

pub fn encode_u8(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    debug_assert_eq!(data.len(), width * height);
    let mut out = header(width, height, 255);
    out.extend_from_slice(data);
    out
}

pub fn encode_u16(width: usize, height: usize, data: &[u16]) -> Vec<u8> {
    debug_assert_eq!(data.len(), width * height);
    let mut out = header(width, height, 65535);
    out.reserve(data.len() * 2);
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn decode_u8(bytes: &[u8]) -> Result<Raster<u8>, PgmError> {
    let (w, h, maxval, body) = parse_header(bytes)?;
    if maxval > 255 {
        return Err(PgmError::WrongDepth {
            expected: "<= 255",
            found: maxval,
        });
    }
    let n = w * h;
    if body.len() != n {
        return Err(PgmError::WrongLength {
            expected: n,
            actual: body.len(),
        });
    }
    Ok(Raster {
        width: w,
        height: h,
        data: body.to_vec(),
    })
}

pub fn decode_u16(bytes: &[u8]) -> Result<Raster<u16>, PgmError> {
    let (w, h, maxval, body) = parse_header(bytes)?;
    if maxval < 256 {
        return Err(PgmError::WrongDepth {
            expected: "> 255",
            found: maxval,
        });
    }
    let n = w * h;
    if body.len() != n * 2 {
        return Err(PgmError::WrongLength {
            expected: n * 2,
            actual: body.len(),
        });
    }
    let data = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(Raster {
        width: w,
        height: h,
        data,
    })
}

fn parse_header(bytes: &[u8]) -> Result<(usize, usize, u32, &[u8]), PgmError> {
    if !bytes.starts_with(b"P5") {
        return Err(PgmError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for f in &mut fields {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(PgmError::BadHeader("truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PgmError::BadHeader("expected a number"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| PgmError::BadHeader("number out of range"))?;
    }
    // Exactly one whitespace byte separates maxval from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::BadHeader("missing separator after maxval")),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(PgmError::BadHeader("zero dimension"));
    }
    if w > 1 << 16 || h > 1 << 16 {
        return Err(PgmError::BadHeader("dimension too large"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(PgmError::BadHeader("maxval out of range"));
    }
    Ok((w as usize, h as usize, maxval as u32, &bytes[pos..]))
}
