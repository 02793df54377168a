//! Netpbm PGM/PPM codec (P2, P3, P5, P6) restricted to maxval 255.

use super::RasterError;

/// Decoded netpbm payload: raw 8-bit samples, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize, RasterError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if start >= self.bytes.len() {
                RasterError::Truncated {
                    offset: start,
                    detail: format!("expected {what}"),
                }
            } else {
                RasterError::Format {
                    offset: start,
                    detail: format!("expected {what}, found byte 0x{:02x}", self.bytes[start]),
                }
            });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse::<usize>().map_err(|_| RasterError::Format {
            offset: start,
            detail: format!("{what} out of range"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm, RasterError> {
    if bytes.len() < 2 {
        return Err(RasterError::Truncated {
            offset: bytes.len(),
            detail: "missing magic number".into(),
        });
    }
    let (channels, binary) = match &bytes[..2] {
        b"P2" => (1, false),
        b"P5" => (1, true),
        b"P3" => (3, false),
        b"P6" => (3, true),
        _ => {
            return Err(RasterError::Format {
                offset: 0,
                detail: "unsupported magic number (expected P2, P3, P5 or P6)".into(),
            })
        }
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval_offset = {
        cur.skip_whitespace_and_comments();
        cur.pos
    };
    let maxval = cur.read_uint("maxval")?;
    if maxval != 255 {
        return Err(RasterError::Format {
            offset: maxval_offset,
            detail: format!("maxval {maxval} unsupported (must be 255)"),
        });
    }
    if width == 0 || height == 0 {
        return Err(RasterError::Format {
            offset: 2,
            detail: "zero-sized raster".into(),
        });
    }
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(RasterError::Format {
            offset: 2,
            detail: "dimensions overflow".into(),
        })?;

    let samples = if binary {
        // Exactly one whitespace byte separates the header from the payload.
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            Some(_) => {
                return Err(RasterError::Format {
                    offset: cur.pos,
                    detail: "expected whitespace after maxval".into(),
                })
            }
            None => {
                return Err(RasterError::Truncated {
                    offset: cur.pos,
                    detail: format!("payload missing, expected {count} bytes"),
                })
            }
        }
        let available = bytes.len() - cur.pos;
        if available < count {
            return Err(RasterError::Truncated {
                offset: bytes.len(),
                detail: format!("payload has {available} bytes, expected {count}"),
            });
        }
        bytes[cur.pos..cur.pos + count].to_vec()
    } else {
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let offset = {
                cur.skip_whitespace_and_comments();
                cur.pos
            };
            let v = cur.read_uint("sample")?;
            if v > 255 {
                return Err(RasterError::Format {
                    offset,
                    detail: format!("sample {v} exceeds maxval 255"),
                });
            }
            samples.push(v as u8);
        }
        samples
    };
    Ok(Pnm {
        width,
        height,
        channels,
        samples,
    })
}

/// Encodes as binary P5 (1 channel) or P6 (3 channels).
pub fn encode(width: usize, height: usize, channels: usize, samples: &[u8]) -> Vec<u8> {
    debug_assert_eq!(samples.len(), width * height * channels);
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}
