//! Container format.
//!
//! All integers are little-endian.
//!
//! ```text
//! header   "CTXC" | version u8 | width u16 | height u16 | frame_count u16 | rate f32
//! chunk    type u8 (0 = I, 1 = P) | payload_len u32 | payload
//! I        width·height·3 bytes of planar RGB8
//! P        4 × (len u32 | bytes): hyper-motion, motion, hyper-context, context
//! ```

use crate::error::{format_err, Result};

pub const MAGIC: [u8; 4] = *b"CTXC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub width: u16,
    pub height: u16,
    pub frame_count: u16,
    /// Continuous rate index in `[0, 3]` selecting the quantization steps.
    pub rate: f32,
}

/// Entropy coded segments of one inter frame.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct InterPayload {
    pub hyper_motion: Vec<u8>,
    pub motion: Vec<u8>,
    pub hyper_context: Vec<u8>,
    pub context: Vec<u8>,
}

impl InterPayload {
    fn segments(&self) -> [&Vec<u8>; 4] {
        [&self.hyper_motion, &self.motion, &self.hyper_context, &self.context]
    }

    pub fn byte_len(&self) -> usize {
        self.segments().iter().map(|s| 4 + s.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FrameChunk {
    Intra(Vec<u8>),
    Inter(InterPayload),
}

impl FrameChunk {
    pub fn payload_len(&self) -> usize {
        match self {
            FrameChunk::Intra(rgb) => rgb.len(),
            FrameChunk::Inter(p) => p.byte_len(),
        }
    }

    /// Bytes this chunk occupies in the container.
    pub fn byte_len(&self) -> usize {
        5 + self.payload_len()
    }

    pub fn is_intra(&self) -> bool {
        matches!(self, FrameChunk::Intra(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    pub frames: Vec<FrameChunk>,
}

impl Bitstream {
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.frames.iter().map(FrameChunk::byte_len).sum::<usize>()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.header.width.to_le_bytes());
        out.extend_from_slice(&self.header.height.to_le_bytes());
        out.extend_from_slice(&self.header.frame_count.to_le_bytes());
        out.extend_from_slice(&self.header.rate.to_le_bytes());
        for f in &self.frames {
            match f {
                FrameChunk::Intra(rgb) => {
                    out.push(0);
                    out.extend_from_slice(&(rgb.len() as u32).to_le_bytes());
                    out.extend_from_slice(rgb);
                }
                FrameChunk::Inter(p) => {
                    out.push(1);
                    out.extend_from_slice(&(p.byte_len() as u32).to_le_bytes());
                    for s in p.segments() {
                        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                        out.extend_from_slice(s);
                    }
                }
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return format_err("bad magic, not a CTXC stream");
        }
        let version = r.u8()?;
        if version != VERSION {
            return format_err(format!("unsupported version {version}"));
        }
        let width = r.u16()?;
        let height = r.u16()?;
        let frame_count = r.u16()?;
        let rate = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if width == 0 || height == 0 || width % 16 != 0 || height % 16 != 0 {
            return format_err(format!("frame size {width}×{height} is not a positive multiple of 16"));
        }
        if !(0.0..=3.0).contains(&rate) {
            return format_err(format!("rate index {rate} outside [0, 3]"));
        }
        let intra_len = 3 * width as usize * height as usize;
        let mut frames = Vec::with_capacity(frame_count as usize);
        for i in 0..frame_count {
            let kind = r.u8()?;
            let len = r.u32()? as usize;
            if len > r.remaining() {
                return format_err(format!(
                    "frame {i}: payload of {len} bytes but only {} remain",
                    r.remaining()
                ));
            }
            let payload = r.take(len)?;
            match kind {
                0 => {
                    if len != intra_len {
                        return format_err(format!(
                            "frame {i}: intra payload is {len} bytes, expected {intra_len}"
                        ));
                    }
                    frames.push(FrameChunk::Intra(payload.to_vec()));
                }
                1 => {
                    let mut pr = Reader { bytes: payload, pos: 0 };
                    let mut seg = || -> Result<Vec<u8>> {
                        let n = pr.u32()? as usize;
                        if n > pr.remaining() {
                            return format_err(format!(
                                "frame {i}: segment of {n} bytes overruns its chunk"
                            ));
                        }
                        Ok(pr.take(n)?.to_vec())
                    };
                    let p = InterPayload {
                        hyper_motion: seg()?,
                        motion: seg()?,
                        hyper_context: seg()?,
                        context: seg()?,
                    };
                    if pr.remaining() != 0 {
                        return format_err(format!(
                            "frame {i}: {} stray bytes after the last segment",
                            pr.remaining()
                        ));
                    }
                    frames.push(FrameChunk::Inter(p));
                }
                k => return format_err(format!("frame {i}: unknown chunk type {k}")),
            }
        }
        if r.remaining() != 0 {
            return format_err(format!("{} trailing bytes after the last frame", r.remaining()));
        }
        Ok(Bitstream {
            header: Header {
                width,
                height,
                frame_count,
                rate,
            },
            frames,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return format_err(format!(
                "unexpected end of data: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
