//! Adaptive order-0 arithmetic coding of byte strings.
//!
//! 32-bit integer coder with underflow (pending bit) handling over a
//! 257-symbol alphabet: the 256 byte values plus an end-of-stream marker.

use crate::bitstream::BitstreamError;

/// End-of-stream symbol.
pub const EOF_SYMBOL: usize = 256;
pub const ALPHABET: usize = 257;
/// Counts are halved once the total exceeds this.
pub const MAX_TOTAL: u32 = 1 << 16;
/// Count added to a symbol each time it is coded.
pub const INCREMENT: u32 = 4;
/// Longest payload accepted by [`encode`] and produced by [`decode`]. The
/// streaming [`Encoder`] and [`Decoder`] have no limit.
pub const MAX_PAYLOAD: usize = (1 << 16) - 1;

const BITS: u32 = 32;
const TOP: u64 = (1 << BITS) - 1;
const HALF: u64 = 1 << (BITS - 1);
const QUARTER: u64 = 1 << (BITS - 2);

/// Adaptive frequency table shared (by construction) between encoder and
/// decoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyModel {
    counts: [u32; ALPHABET],
    total: u32,
}

impl Default for FrequencyModel {
    fn default() -> Self {
        Self {
            counts: [1; ALPHABET],
            total: ALPHABET as u32,
        }
    }
}

impl FrequencyModel {
    pub fn counts(&self) -> &[u32; ALPHABET] {
        &self.counts
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    /// `(cum_low, cum_high)` of `symbol`.
    fn range(&self, symbol: usize) -> (u32, u32) {
        let low: u32 = self.counts[..symbol].iter().sum();
        (low, low + self.counts[symbol])
    }

    /// Symbol whose cumulative interval contains `target`.
    fn find(&self, target: u32) -> Option<(usize, u32, u32)> {
        let mut low = 0;
        for (s, &c) in self.counts.iter().enumerate() {
            if target < low + c {
                return Some((s, low, low + c));
            }
            low += c;
        }
        None
    }

    pub fn update(&mut self, symbol: usize) {
        self.counts[symbol] += INCREMENT;
        self.total += INCREMENT;
        if self.total > MAX_TOTAL {
            self.total = 0;
            for c in self.counts.iter_mut() {
                *c = c.div_ceil(2);
                self.total += *c;
            }
        }
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u8,
    used: u8,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            acc: 0,
            used: 0,
        }
    }

    fn push(&mut self, bit: bool) {
        self.acc = (self.acc << 1) | bit as u8;
        self.used += 1;
        if self.used == 8 {
            self.bytes.push(self.acc);
            self.acc = 0;
            self.used = 0;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.used > 0 {
            self.bytes.push(self.acc << (8 - self.used));
        }
        self.bytes
    }
}

/// Incremental encoder. Feed symbols, then [`Encoder::finish`].
pub struct Encoder {
    low: u64,
    high: u64,
    pending: u64,
    model: FrequencyModel,
    out: BitWriter,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            high: TOP,
            pending: 0,
            model: FrequencyModel::default(),
            out: BitWriter::new(),
        }
    }

    pub fn model(&self) -> &FrequencyModel {
        &self.model
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }

    fn code(&mut self, symbol: usize) {
        let (cl, ch) = self.model.range(symbol);
        let total = self.model.total() as u64;
        let range = self.high - self.low + 1;
        self.high = self.low + range * ch as u64 / total - 1;
        self.low += range * cl as u64 / total;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
        self.model.update(symbol);
    }

    pub fn push(&mut self, byte: u8) {
        self.code(byte as usize);
    }

    /// Codes the end-of-stream marker and flushes, padding with zero bits.
    pub fn finish(mut self) -> Vec<u8> {
        self.code(EOF_SYMBOL);
        self.pending += 1;
        let bit = self.low >= QUARTER;
        self.emit(bit);
        self.out.finish()
    }
}

/// Encodes `payload` followed by the end-of-stream marker.
pub fn encode(payload: &[u8]) -> Result<Vec<u8>, BitstreamError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(BitstreamError::PayloadTooLong(payload.len()));
    }
    let mut enc = Encoder::new();
    for &b in payload {
        enc.push(b);
    }
    Ok(enc.finish())
}

/// Incremental decoder over a complete coded stream.
pub struct Decoder<'a> {
    input: &'a [u8],
    bit_pos: usize,
    low: u64,
    high: u64,
    value: u64,
    shifts: usize,
    model: FrequencyModel,
    done: bool,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self {
            input,
            bit_pos: 0,
            low: 0,
            high: TOP,
            value: 0,
            shifts: 0,
            model: FrequencyModel::default(),
            done: false,
        };
        for _ in 0..BITS {
            d.value = (d.value << 1) | d.next_bit() as u64;
        }
        d
    }

    pub fn model(&self) -> &FrequencyModel {
        &self.model
    }

    /// Bits past the end of the input read as zero.
    fn next_bit(&mut self) -> bool {
        let bit = self
            .input
            .get(self.bit_pos / 8)
            .is_some_and(|b| b >> (7 - self.bit_pos % 8) & 1 == 1);
        self.bit_pos += 1;
        bit
    }

    /// Next byte, or `None` at end of stream.
    pub fn next_symbol(&mut self) -> Result<Option<u8>, BitstreamError> {
        if self.done {
            return Ok(None);
        }
        let total = self.model.total() as u64;
        let range = self.high - self.low + 1;
        let offset = self.value.wrapping_sub(self.low);
        if self.value < self.low || self.value > self.high {
            return Err(BitstreamError::Corrupt("decoder state left its interval"));
        }
        let target = ((offset + 1) * total - 1) / range;
        let (symbol, cl, ch) = self
            .model
            .find(target as u32)
            .ok_or(BitstreamError::Corrupt("cumulative frequency out of range"))?;
        self.high = self.low + range * ch as u64 / total - 1;
        self.low += range * cl as u64 / total;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.next_bit() as u64;
            self.shifts += 1;
            if self.bit_pos > self.input.len() * 8 + BITS as usize {
                return Err(BitstreamError::Truncated("arithmetic-coded payload"));
            }
        }
        self.model.update(symbol);
        if symbol == EOF_SYMBOL {
            self.done = true;
            self.check_tail()?;
            return Ok(None);
        }
        Ok(Some(symbol as u8))
    }

    /// The encoder writes exactly `shifts + 2` bits before zero padding.
    fn check_tail(&self) -> Result<(), BitstreamError> {
        let used = self.shifts + 2;
        if used.div_ceil(8) != self.input.len() {
            return Err(BitstreamError::Corrupt(
                "coded payload length does not match its content",
            ));
        }
        let pad = self.input.len() * 8 - used;
        let last = self.input.last().copied().unwrap_or(0);
        if pad > 0 && last & ((1u8 << pad) - 1) != 0 {
            return Err(BitstreamError::Corrupt("non-zero padding after end of stream"));
        }
        Ok(())
    }
}

/// Decodes a complete stream, rejecting anything that is not exactly the
/// output of [`encode`] for some payload.
pub fn decode(input: &[u8]) -> Result<Vec<u8>, BitstreamError> {
    let mut dec = Decoder::new(input);
    let mut out = Vec::new();
    while let Some(b) = dec.next_symbol()? {
        if out.len() >= MAX_PAYLOAD {
            return Err(BitstreamError::PayloadTooLong(out.len() + 1));
        }
        out.push(b);
    }
    Ok(out)
}
