//! `SYMV` binary frame: one scene encoding per frame, little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SYMV"
//! 4       1     version (1)
//! 5       1     tier (0 not-private, 1 at-risk, 2 private)
//! 6       2     flags (bit 0: caption section present)
//! 8       4     scene_id byte length L
//! 12      L     scene_id, UTF-8
//! 12+L    4     num_objects N
//! 16+L    4     dim (2048)
//! 20+L    4*N*dim  payload, f32, row-major
//! ...           if flags & 1: u32 count, then per caption u32 length + UTF-8
//! ```

use thiserror::Error;

use crate::codec::{PrivacyTier, SceneEncoding, ENCODING_DIM};

pub const MAGIC: [u8; 4] = *b"SYMV";
pub const VERSION: u8 = 1;
pub const FLAG_CAPTIONS: u16 = 0x0001;
/// Size of a frame with an empty scene id, no objects and no captions.
pub const MIN_FRAME_LEN: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    Version(u8),
    #[error("unknown privacy tier code {0}")]
    Tier(u8),
    #[error("unknown flag bits {0:#06x}")]
    Flags(u16),
    #[error("frame truncated reading {field} at offset {offset}: need {expected} bytes, have {actual}")]
    Truncated {
        field: &'static str,
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("frame dimension {0}, expected {ENCODING_DIM}")]
    Dimension(u32),
    #[error("invalid UTF-8 in {field} at offset {offset}")]
    Utf8 { field: &'static str, offset: usize },
    #[error("non-finite payload value at offset {0}")]
    NonFinite(usize),
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("{0} does not fit in a 32-bit length field")]
    TooLong(&'static str),
    #[error("object row {row} has length {len}, expected {ENCODING_DIM}")]
    RowLength { row: usize, len: usize },
}

fn u32_len(n: usize, what: &'static str) -> Result<u32, FrameError> {
    u32::try_from(n).map_err(|_| FrameError::TooLong(what))
}

/// Serialize a scene encoding. Payload values are narrowed to `f32`
/// (round to nearest, ties to even).
pub fn encode_frame(enc: &SceneEncoding) -> Result<Vec<u8>, FrameError> {
    let id = enc.scene_id.as_bytes();
    let id_len = u32_len(id.len(), "scene_id")?;
    let n = u32_len(enc.objects.len(), "object count")?;
    if let Some((row, r)) = enc.objects.iter().enumerate().find(|(_, r)| r.len() != ENCODING_DIM) {
        return Err(FrameError::RowLength { row, len: r.len() });
    }

    let mut out = Vec::with_capacity(MIN_FRAME_LEN + id.len() + enc.objects.len() * ENCODING_DIM * 4);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(enc.tier.as_u8());
    let flags = if enc.captions.is_some() { FLAG_CAPTIONS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&(ENCODING_DIM as u32).to_le_bytes());
    for row in &enc.objects {
        for &v in row {
            let narrowed = v as f32;
            if !narrowed.is_finite() {
                return Err(FrameError::NonFinite(out.len()));
            }
            out.extend_from_slice(&narrowed.to_le_bytes());
        }
    }
    if let Some(captions) = &enc.captions {
        out.extend_from_slice(&u32_len(captions.len(), "caption count")?.to_le_bytes());
        for c in captions {
            out.extend_from_slice(&u32_len(c.len(), "caption")?.to_le_bytes());
            out.extend_from_slice(c.as_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], FrameError> {
        let truncated = || FrameError::Truncated {
            field,
            offset: self.pos,
            expected: self.pos.saturating_add(n),
            actual: self.buf.len(),
        };
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        let s = self.buf.get(self.pos..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, FrameError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, FrameError> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, FrameError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, field: &'static str) -> Result<String, FrameError> {
        let len = self.u32(field)? as usize;
        let offset = self.pos;
        let bytes = self.take(len, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| FrameError::Utf8 { field, offset })
    }
}

/// Decode one frame from the front of `bytes`, returning it with the number
/// of bytes consumed. Nothing is allocated for the payload until its full
/// length is known to be present.
pub fn decode_frame_prefix(bytes: &[u8]) -> Result<(SceneEncoding, usize), FrameError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FrameError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = c.u8("version")?;
    if version != VERSION {
        return Err(FrameError::Version(version));
    }
    let tier_code = c.u8("tier")?;
    let tier = PrivacyTier::from_u8(tier_code).ok_or(FrameError::Tier(tier_code))?;
    let flags = c.u16("flags")?;
    if flags & !FLAG_CAPTIONS != 0 {
        return Err(FrameError::Flags(flags));
    }
    let scene_id = c.string("scene_id")?;
    let num_objects = c.u32("num_objects")? as usize;
    let dim = c.u32("dim")?;
    if dim as usize != ENCODING_DIM {
        return Err(FrameError::Dimension(dim));
    }

    let payload_len = num_objects.saturating_mul(ENCODING_DIM * 4);
    let payload_start = c.pos;
    let payload = c.take(payload_len, "payload")?;
    let mut objects = Vec::with_capacity(num_objects);
    for (r, row_bytes) in payload.chunks_exact(ENCODING_DIM * 4).enumerate() {
        let row = row_bytes
            .chunks_exact(4)
            .enumerate()
            .map(|(i, b)| {
                let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                if v.is_finite() {
                    Ok(f64::from(v))
                } else {
                    Err(FrameError::NonFinite(payload_start + (r * ENCODING_DIM + i) * 4))
                }
            })
            .collect::<Result<Vec<f64>, _>>()?;
        objects.push(row);
    }

    let captions = if flags & FLAG_CAPTIONS != 0 {
        let count = c.u32("caption count")? as usize;
        // each caption needs at least its 4-byte length
        let remaining = bytes.len() - c.pos;
        if count > remaining / 4 {
            return Err(FrameError::Truncated {
                field: "captions",
                offset: c.pos,
                expected: c.pos.saturating_add(count.saturating_mul(4)),
                actual: bytes.len(),
            });
        }
        let mut list = Vec::with_capacity(count);
        for _ in 0..count {
            list.push(c.string("caption")?);
        }
        Some(list)
    } else {
        None
    };

    Ok((
        SceneEncoding {
            scene_id,
            tier,
            objects,
            captions,
        },
        c.pos,
    ))
}

/// Decode exactly one frame; trailing bytes are an error.
pub fn decode_frame(bytes: &[u8]) -> Result<SceneEncoding, FrameError> {
    let (enc, used) = decode_frame_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FrameError::Trailing(bytes.len() - used));
    }
    Ok(enc)
}

/// Split a buffer of back-to-back frames (the `.symv` file layout) into
/// decoded encodings and their exact byte ranges.
pub fn split_frames(bytes: &[u8]) -> Result<Vec<(SceneEncoding, &[u8])>, FrameError> {
    let mut out = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let (enc, used) = decode_frame_prefix(rest)?;
        out.push((enc, &rest[..used]));
        rest = &rest[used..];
    }
    Ok(out)
}
