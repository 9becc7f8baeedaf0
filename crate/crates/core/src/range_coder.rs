//! Integer range coder with 16-bit probability resolution.
//!
//! The coder keeps a 48-bit window of the low end of the interval plus one
//! carry bit. Bytes equal to 0xFF are held back until a carry can no longer
//! reach them. Streams end with the shortest byte string that still decodes;
//! the decoder reads zeros past the end.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::ChannelModel;

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const WINDOW_BITS: u32 = 48;
const WINDOW: u64 = 1 << WINDOW_BITS;
const TOP: u64 = 1 << (WINDOW_BITS - 8);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoderError {
    #[error("alphabet [{k_min}, {k_max}] is too large for 16-bit probabilities")]
    AlphabetTooLarge { k_min: i32, k_max: i32 },
    #[error("alphabet [{k_min}, {k_max}] must contain 0")]
    AlphabetMissingZero { k_min: i32, k_max: i32 },
    #[error("symbol {symbol} outside [{k_min}, {k_max}]")]
    SymbolOutOfRange { symbol: i32, k_min: i32, k_max: i32 },
    #[error("non-finite distribution parameters")]
    NonFinite,
    #[error("section checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("stream truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("frequency {0} outside [1, 65535]")]
    Frequency(u32),
}

/// Cumulative integer counts over symbols `k_min..=k_max`, summing to 2^16,
/// every symbol at least 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCdf {
    pub k_min: i32,
    /// `len = symbols + 1`, `cum[0] = 0`, `cum[last] = 2^16`.
    pub cum: Vec<u32>,
}

impl QuantizedCdf {
    /// Discretizes `model` on bins of width `q` centred at `k·q`.
    pub fn build(model: &ChannelModel, q: f64, k_min: i32, k_max: i32) -> Result<Self, CoderError> {
        check_alphabet(k_min, k_max)?;
        if !(q.is_finite() && q > 0.0)
            || !model.mu.iter().chain(&model.sigma).all(|v| v.is_finite())
            || !model.weight.is_finite()
        {
            return Err(CoderError::NonFinite);
        }
        let n = (k_max - k_min + 1) as usize;
        let mut edges = Vec::with_capacity(n + 1);
        let mut running = 0.0f64;
        for j in 0..=n {
            let x = (k_min as f64 - 0.5 + j as f64) * q;
            running = running.max(model.cdf(x));
            edges.push(running);
        }
        Ok(Self::from_edges(k_min, &edges))
    }

    /// Integer counts from monotone CDF samples at the `n + 1` bin edges.
    pub fn from_edges(k_min: i32, edges: &[f64]) -> Self {
        let n = edges.len() - 1;
        let span = edges[n] - edges[0];
        let free = (PROB_TOTAL as usize - n) as f64;
        let mut cum = Vec::with_capacity(n + 1);
        for (j, &e) in edges.iter().enumerate() {
            let f = if span > 0.0 {
                ((e - edges[0]) / span).clamp(0.0, 1.0)
            } else {
                j as f64 / n as f64
            };
            let scaled = if j == n {
                free
            } else {
                (free * f).floor().min(free)
            };
            cum.push(j as u32 + scaled as u32);
        }
        QuantizedCdf { k_min, cum }
    }

    pub fn k_max(&self) -> i32 {
        self.k_min + self.cum.len() as i32 - 2
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    fn index(&self, k: i32) -> Result<usize, CoderError> {
        if k < self.k_min || k > self.k_max() {
            return Err(CoderError::SymbolOutOfRange {
                symbol: k,
                k_min: self.k_min,
                k_max: self.k_max(),
            });
        }
        Ok((k - self.k_min) as usize)
    }

    pub fn count(&self, k: i32) -> u32 {
        let i = (k - self.k_min) as usize;
        self.cum[i + 1] - self.cum[i]
    }

    /// Code length of `k` in bits.
    pub fn bits(&self, k: i32) -> f64 {
        PROB_BITS as f64 - (self.count(k) as f64).log2()
    }
}

fn check_alphabet(k_min: i32, k_max: i32) -> Result<(), CoderError> {
    if k_min > 0 || k_max < 0 {
        return Err(CoderError::AlphabetMissingZero { k_min, k_max });
    }
    if (k_max as i64 - k_min as i64) >= PROB_TOTAL as i64 - 1 {
        return Err(CoderError::AlphabetTooLarge { k_min, k_max });
    }
    Ok(())
}

/// 16-bit frequency of the `1` symbol for a binary source with `P(1) = h`.
pub fn binary_frequency(h: f64) -> u32 {
    let f = (h * PROB_TOTAL as f64).round();
    if f.is_nan() {
        return PROB_TOTAL / 2;
    }
    (f as i64).clamp(1, PROB_TOTAL as i64 - 1) as u32
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: Option<u8>,
    pending: usize,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: WINDOW,
            cache: None,
            pending: 0,
            out: Vec::new(),
        }
    }

    /// Encodes the sub-interval `[cum, cum + freq)` of `[0, 2^16)`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low += r * cum as u64;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> WINDOW_BITS) as u8;
        let top = ((self.low >> (WINDOW_BITS - 8)) & 0xFF) as u8;
        if top != 0xFF || carry != 0 {
            if let Some(c) = self.cache {
                self.out.push(c.wrapping_add(carry));
            }
            for _ in 0..self.pending {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = Some(top);
        } else {
            self.pending += 1;
        }
        self.low = (self.low << 8) & (WINDOW - 1);
    }

    pub fn encode_symbol(&mut self, cdf: &QuantizedCdf, k: i32) -> Result<(), CoderError> {
        let i = cdf.index(k)?;
        self.encode(cdf.cum[i], cdf.cum[i + 1] - cdf.cum[i]);
        Ok(())
    }

    /// Codes one bit; `freq_one` is the 16-bit frequency of `true`.
    pub fn encode_bit(&mut self, bit: bool, freq_one: u32) {
        let f0 = PROB_TOTAL - freq_one;
        if bit {
            self.encode(f0, freq_one);
        } else {
            self.encode(0, f0);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let hi = self.low + self.range;
        let mut v = self.low;
        for s in (0..=WINDOW_BITS).rev() {
            let mask = (1u64 << s) - 1;
            let cand = (self.low + mask) & !mask;
            if cand < hi {
                v = cand;
                break;
            }
        }
        self.low = v;
        for _ in 0..(WINDOW_BITS / 8 + 1) {
            self.shift_low();
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: WINDOW,
        };
        for _ in 0..WINDOW_BITS / 8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Target in `[0, 2^16)`; must be followed by [`RangeDecoder::consume`].
    fn target(&mut self) -> (u64, u32) {
        let r = self.range >> PROB_BITS;
        let t = (self.code / r).min(PROB_TOTAL as u64 - 1) as u32;
        (r, t)
    }

    fn consume(&mut self, r: u64, cum: u32, freq: u32) {
        self.code -= r * cum as u64;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.code = ((self.code << 8) | self.next_byte() as u64) & (WINDOW - 1);
        }
    }

    pub fn decode_symbol(&mut self, cdf: &QuantizedCdf) -> i32 {
        let (r, t) = self.target();
        // Largest i with cum[i] <= t.
        let i = cdf.cum.partition_point(|&c| c <= t) - 1;
        let i = i.min(cdf.symbols() - 1);
        self.consume(r, cdf.cum[i], cdf.cum[i + 1] - cdf.cum[i]);
        cdf.k_min + i as i32
    }

    pub fn decode_bit(&mut self, freq_one: u32) -> bool {
        let f0 = PROB_TOTAL - freq_one;
        let (r, t) = self.target();
        if t >= f0 {
            self.consume(r, f0, freq_one);
            true
        } else {
            self.consume(r, 0, f0);
            false
        }
    }
}

pub fn encode_symbols(
    symbols: &[i32],
    cdfs: &[QuantizedCdf],
    enc: &mut RangeEncoder,
) -> Result<(), CoderError> {
    for (&k, cdf) in symbols.iter().zip(cdfs) {
        enc.encode_symbol(cdf, k)?;
    }
    Ok(())
}

pub fn decode_symbols(dec: &mut RangeDecoder<'_>, cdfs: &[QuantizedCdf]) -> Vec<i32> {
    cdfs.iter().map(|c| dec.decode_symbol(c)).collect()
}

pub fn encode_binary(bits: &[bool], freq_one: u32) -> Result<Vec<u8>, CoderError> {
    if !(1..PROB_TOTAL).contains(&freq_one) {
        return Err(CoderError::Frequency(freq_one));
    }
    let mut enc = RangeEncoder::new();
    for &b in bits {
        enc.encode_bit(b, freq_one);
    }
    Ok(enc.finish())
}

pub fn decode_binary(data: &[u8], freq_one: u32, n: usize) -> Result<Vec<bool>, CoderError> {
    if !(1..PROB_TOTAL).contains(&freq_one) {
        return Err(CoderError::Frequency(freq_one));
    }
    let mut dec = RangeDecoder::new(data);
    Ok((0..n).map(|_| dec.decode_bit(freq_one)).collect())
}

/// Location of a framed section inside a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub offset: u32,
    pub length: u32,
    pub checksum: u32,
}

/// Appends `[len u32][crc32 u32][bytes]` and returns where it landed.
pub fn write_section(out: &mut Vec<u8>, bytes: &[u8]) -> SectionInfo {
    let checksum = crc32fast::hash(bytes);
    let offset = out.len() as u32;
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&checksum.to_le_bytes());
    out.extend_from_slice(bytes);
    SectionInfo {
        offset,
        length: bytes.len() as u32,
        checksum,
    }
}

/// Reads a framed section at `offset`, verifying its checksum; returns the
/// payload and the offset just past it.
pub fn read_section(data: &[u8], offset: usize) -> Result<(&[u8], usize), CoderError> {
    let head = data
        .get(offset..offset + 8)
        .ok_or(CoderError::Truncated { offset, needed: 8 })?;
    let len = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
    let stored = u32::from_le_bytes(head[4..8].try_into().unwrap());
    let body = data
        .get(offset + 8..offset + 8 + len)
        .ok_or(CoderError::Truncated {
            offset: offset + 8,
            needed: len,
        })?;
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(CoderError::Checksum { stored, computed });
    }
    Ok((body, offset + 8 + len))
}
