//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::path::Path;

use perco_nn::{Real, Tensor};

use crate::error::{Error, Result};

/// 8-bit image with interleaved samples (`H x W x C`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Image(msg.into())
}

/// Byte value to model range `[-1, 1]`.
pub fn byte_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Model range back to a byte, rounding half away from zero and clamping.
pub fn unit_to_byte(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(bad(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != channels * height * width {
            return Err(bad(format!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                channels * height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    /// Planar `[C,H,W]` tensor in `[-1, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (c, hw) = (self.channels, self.height * self.width);
        Tensor::from_fn(&[c, self.height, self.width], |i| {
            let (ch, p) = (i / hw, i % hw);
            T::from_f64(byte_to_unit(self.pixels[p * c + ch]))
        })
    }

    /// Inverse of [`Image::to_tensor`]; values outside `[-1, 1]` saturate.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let &[c, h, w] = t.shape() else {
            return Err(bad(format!("expected a [C,H,W] tensor, got {:?}", t.shape())));
        };
        let hw = h * w;
        let mut pixels = vec![0u8; c * hw];
        for (i, v) in t.data().iter().enumerate() {
            pixels[(i % hw) * c + i / hw] = unit_to_byte(v.as_f64());
        }
        Self::new(c, h, w, pixels)
    }

    /// Planar samples scaled to `[0, 1]`, as used by the metrics.
    pub fn to_unit_planar(&self) -> Vec<f64> {
        let (c, hw) = (self.channels, self.height * self.width);
        (0..c * hw)
            .map(|i| self.pixels[(i % hw) * c + i / hw] as f64 / 255.0)
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut p = Parser { bytes, pos: 0 };
        let channels = match p.token()? {
            b"P6" => 3,
            b"P5" => 1,
            other => return Err(bad(format!("unsupported magic {:?}", String::from_utf8_lossy(other)))),
        };
        let width = p.number("width")?;
        let height = p.number("height")?;
        let maxval = p.number("maxval")?;
        if maxval != 255 {
            return Err(bad(format!("maxval {maxval} unsupported (need 255)")));
        }
        if width == 0 || height == 0 {
            return Err(bad("zero image dimension"));
        }
        match p.bytes.get(p.pos) {
            Some(c) if c.is_ascii_whitespace() => p.pos += 1,
            _ => return Err(bad("missing whitespace after header")),
        }
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| bad("image dimensions overflow"))?;
        let data = &bytes[p.pos..];
        if data.len() < need {
            return Err(bad(format!("short payload: need {need} bytes, got {}", data.len())));
        }
        if data.len() > need {
            return Err(bad(format!("{} trailing bytes after payload", data.len() - need)));
        }
        Self::new(channels, height, width, data.to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::decode(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|c| !c.is_ascii_whitespace() && *c != b'#')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad("truncated header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("malformed {what} {:?}", String::from_utf8_lossy(tok))))
    }
}
