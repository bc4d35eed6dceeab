//! The `.pcsd` container: a fixed big-endian header, the index grid packed
//! at `log2 V` bits per index (MSB first), and the arithmetic-coded global
//! payload.

use thiserror::Error;

use crate::quantization::IndexGrid;

pub const MAGIC: &[u8; 4] = b"PCSD";
pub const VERSION: u8 = 1;
/// Serialized header size in bytes.
pub const HEADER_LEN: usize = 15;
/// `flags` bit 0: a global payload is present.
pub const FLAG_GLOBAL: u8 = 0b0000_0001;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BitstreamError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    BadVersion(u8),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid header field {field}: {value}")]
    BadField { field: &'static str, value: u32 },
    #[error("index {index} does not fit in {bits} bits")]
    IndexOverflow { index: u32, bits: u32 },
    #[error("payload of {0} bytes exceeds the format limit")]
    PayloadTooLong(usize),
    #[error("corrupt arithmetic-coded stream: {0}")]
    Corrupt(&'static str),
    #[error("header disagrees with expected geometry: {0}")]
    GeometryMismatch(String),
}

type Result<T> = std::result::Result<T, BitstreamError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u8,
    pub height: u16,
    pub width: u16,
    pub grid_h: u8,
    pub grid_w: u8,
    pub log2_v: u8,
    pub global_payload_len: u16,
    pub flags: u8,
}

impl BitstreamHeader {
    pub fn has_global(&self) -> bool {
        self.flags & FLAG_GLOBAL != 0
    }

    /// Bytes taken by the packed index grid.
    pub fn packed_len(&self) -> usize {
        packed_len(self.grid_h as usize, self.grid_w as usize, self.log2_v as u32)
    }

    /// Total container size implied by the header.
    pub fn file_len(&self) -> usize {
        HEADER_LEN + self.packed_len() + self.global_payload_len as usize
    }

    fn validate(&self) -> Result<()> {
        let field = |field, value: u32| Err(BitstreamError::BadField { field, value });
        if self.version != VERSION {
            return Err(BitstreamError::BadVersion(self.version));
        }
        if !(1..=16).contains(&self.log2_v) {
            return field("log2V", self.log2_v as u32);
        }
        if self.height == 0 {
            return field("H", 0);
        }
        if self.width == 0 {
            return field("W", 0);
        }
        if self.grid_h == 0 || self.grid_h as u16 > self.height {
            return field("h", self.grid_h as u32);
        }
        if self.grid_w == 0 || self.grid_w as u16 > self.width {
            return field("w", self.grid_w as u32);
        }
        if self.flags & !FLAG_GLOBAL != 0 {
            return field("flags", self.flags as u32);
        }
        if self.has_global() != (self.global_payload_len > 0) {
            return field("global_payload_len", self.global_payload_len as u32);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(MAGIC);
        b[4] = self.version;
        b[5..7].copy_from_slice(&self.height.to_be_bytes());
        b[7..9].copy_from_slice(&self.width.to_be_bytes());
        b[9] = self.grid_h;
        b[10] = self.grid_w;
        b[11] = self.log2_v;
        b[12..14].copy_from_slice(&self.global_payload_len.to_be_bytes());
        b[14] = self.flags;
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(BitstreamError::Truncated("header"));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(BitstreamError::BadMagic(magic));
        }
        let be16 = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let h = Self {
            version: bytes[4],
            height: be16(5),
            width: be16(7),
            grid_h: bytes[9],
            grid_w: bytes[10],
            log2_v: bytes[11],
            global_payload_len: be16(12),
            flags: bytes[14],
        };
        h.validate()?;
        Ok(h)
    }
}

pub fn packed_len(h: usize, w: usize, log2_v: u32) -> usize {
    (h * w * log2_v as usize).div_ceil(8)
}

/// Packs indices MSB first at `log2_v` bits each, zero-padding the last byte.
pub fn pack_indices(grid: &IndexGrid, log2_v: u32) -> Result<Vec<u8>> {
    if !(1..=16).contains(&log2_v) {
        return Err(BitstreamError::BadField {
            field: "log2V",
            value: log2_v,
        });
    }
    let mut out = vec![0u8; packed_len(grid.h, grid.w, log2_v)];
    let mut pos = 0usize;
    for &idx in &grid.indices {
        if idx >> log2_v != 0 {
            return Err(BitstreamError::IndexOverflow {
                index: idx,
                bits: log2_v,
            });
        }
        for b in (0..log2_v).rev() {
            if idx >> b & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_indices`]. Extra trailing bytes are rejected, as are
/// non-zero padding bits.
pub fn unpack_indices(bytes: &[u8], h: usize, w: usize, log2_v: u32) -> Result<IndexGrid> {
    if !(1..=16).contains(&log2_v) {
        return Err(BitstreamError::BadField {
            field: "log2V",
            value: log2_v,
        });
    }
    let need = packed_len(h, w, log2_v);
    if bytes.len() < need {
        return Err(BitstreamError::Truncated("index grid"));
    }
    if bytes.len() > need {
        return Err(BitstreamError::LengthMismatch {
            expected: need,
            found: bytes.len(),
        });
    }
    let mut pos = 0usize;
    let mut indices = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        let mut idx = 0u32;
        for _ in 0..log2_v {
            idx = (idx << 1) | (bytes[pos / 8] >> (7 - pos % 8) & 1) as u32;
            pos += 1;
        }
        indices.push(idx);
    }
    if pos % 8 != 0 && bytes[pos / 8] & (0xFF >> (pos % 8)) != 0 {
        return Err(BitstreamError::Corrupt("non-zero padding in index grid"));
    }
    Ok(IndexGrid { h, w, indices })
}

/// Decoded contents of a container.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedImage {
    pub header: BitstreamHeader,
    pub grid: IndexGrid,
    /// Arithmetic-coded global payload (empty when absent).
    pub global_payload: Vec<u8>,
}

impl CompressedImage {
    /// Builds a consistent header around a grid and an already coded payload.
    pub fn new(height: u16, width: u16, grid: IndexGrid, log2_v: u8, global_payload: Vec<u8>) -> Result<Self> {
        let too_big = |field, value: usize| BitstreamError::BadField {
            field,
            value: value as u32,
        };
        let grid_h = u8::try_from(grid.h).map_err(|_| too_big("h", grid.h))?;
        let grid_w = u8::try_from(grid.w).map_err(|_| too_big("w", grid.w))?;
        let len =
            u16::try_from(global_payload.len()).map_err(|_| BitstreamError::PayloadTooLong(global_payload.len()))?;
        let header = BitstreamHeader {
            version: VERSION,
            height,
            width,
            grid_h,
            grid_w,
            log2_v,
            global_payload_len: len,
            flags: if len > 0 { FLAG_GLOBAL } else { 0 },
        };
        header.validate()?;
        Ok(Self {
            header,
            grid,
            global_payload,
        })
    }

    /// Bits carried by indices and payload, excluding padding and header.
    pub fn payload_bits(&self) -> usize {
        self.grid.indices.len() * self.header.log2_v as usize + 8 * self.global_payload.len()
    }
}

pub fn write_container(ci: &CompressedImage) -> Result<Vec<u8>> {
    ci.header.validate()?;
    if (ci.grid.h, ci.grid.w) != (ci.header.grid_h as usize, ci.header.grid_w as usize) {
        return Err(BitstreamError::GeometryMismatch(format!(
            "grid {}x{} vs header {}x{}",
            ci.grid.h, ci.grid.w, ci.header.grid_h, ci.header.grid_w
        )));
    }
    if ci.global_payload.len() != ci.header.global_payload_len as usize {
        return Err(BitstreamError::LengthMismatch {
            expected: ci.header.global_payload_len as usize,
            found: ci.global_payload.len(),
        });
    }
    let mut out = Vec::with_capacity(ci.header.file_len());
    out.extend_from_slice(&ci.header.to_bytes());
    out.extend(pack_indices(&ci.grid, ci.header.log2_v as u32)?);
    out.extend_from_slice(&ci.global_payload);
    Ok(out)
}

pub fn read_container(bytes: &[u8]) -> Result<CompressedImage> {
    let header = BitstreamHeader::from_bytes(bytes)?;
    let expected = header.file_len();
    if bytes.len() != expected {
        return Err(BitstreamError::LengthMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let split = HEADER_LEN + header.packed_len();
    let grid = unpack_indices(
        &bytes[HEADER_LEN..split],
        header.grid_h as usize,
        header.grid_w as usize,
        header.log2_v as u32,
    )?;
    Ok(CompressedImage {
        header,
        grid,
        global_payload: bytes[split..].to_vec(),
    })
}

/// Geometry a decoder is configured for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub height: u16,
    pub width: u16,
    pub grid_h: u8,
    pub grid_w: u8,
    pub log2_v: u8,
}

impl Geometry {
    pub fn check(&self, h: &BitstreamHeader) -> Result<()> {
        let got = (h.height, h.width, h.grid_h, h.grid_w, h.log2_v);
        let want = (self.height, self.width, self.grid_h, self.grid_w, self.log2_v);
        if got != want {
            return Err(BitstreamError::GeometryMismatch(format!(
                "file has HxW={}x{} grid={}x{} log2V={}, model expects HxW={}x{} grid={}x{} log2V={}",
                got.0, got.1, got.2, got.3, got.4, want.0, want.1, want.2, want.3, want.4
            )));
        }
        Ok(())
    }
}

/// Reads a container and checks it against the decoder's geometry. Any
/// payload present must decode cleanly.
pub fn read_container_expecting(bytes: &[u8], geometry: &Geometry) -> Result<CompressedImage> {
    let header = BitstreamHeader::from_bytes(bytes)?;
    geometry.check(&header)?;
    let ci = read_container(bytes)?;
    if ci.header.has_global() {
        crate::arith::decode(&ci.global_payload)?;
    }
    Ok(ci)
}
