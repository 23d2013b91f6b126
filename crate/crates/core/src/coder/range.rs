//! Byte-renormalizing range coder with a 48-bit window.
//!
//! `range` stays in `[2^40, 2^48]` between symbols, so with totals up to
//! `2^24` the integer division `range / total` loses at most `2^-16` of the
//! interval per symbol. Carries are resolved with the usual cache byte plus
//! a run of pending `0xFF` bytes.

use super::QuantizedCdf;
use crate::{Error, Result};

const WINDOW_BITS: u32 = 48;
const WINDOW: u64 = 1 << WINDOW_BITS;
const MASK: u64 = WINDOW - 1;
const BOTTOM: u64 = 1 << (WINDOW_BITS - 8);
/// Largest frequency total accepted by the coder.
pub const MAX_TOTAL: u32 = 1 << 24;

/// Ideal versus actual code length of one finished stream.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CodeAudit {
    pub symbols: u64,
    /// `Σ -log2(freq/total)` over the coded symbols.
    pub ideal_bits: f64,
    pub actual_bits: u64,
}

impl CodeAudit {
    /// `actual ≤ ideal + 64 + 0.01·n`
    pub fn within_bound(&self) -> bool {
        (self.actual_bits as f64) <= self.ideal_bits + 64.0 + 0.01 * self.symbols as f64
    }

    pub fn merge(&mut self, other: &CodeAudit) {
        self.symbols += other.symbols;
        self.ideal_bits += other.ideal_bits;
        self.actual_bits += other.actual_bits;
    }
}

#[derive(Clone, Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: Option<u8>,
    pending: u64,
    out: Vec<u8>,
    audit: CodeAudit,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: WINDOW, cache: None, pending: 0, out: Vec::new(), audit: CodeAudit::default() }
    }

    /// Narrows the interval to `[start, start+freq)` out of `total`.
    pub fn encode(&mut self, start: u32, freq: u32, total: u32) -> Result<()> {
        if freq == 0 || total > MAX_TOTAL || start as u64 + freq as u64 > total as u64 {
            return Err(Error::Domain(format!("cannot code interval [{start}, +{freq}) of {total}")));
        }
        let r = self.range / total as u64;
        self.low += r * start as u64;
        self.range = r * freq as u64;
        while self.range < BOTTOM {
            self.range <<= 8;
            self.shift_low();
        }
        self.audit.symbols += 1;
        self.audit.ideal_bits += (total as f64).log2() - (freq as f64).log2();
        Ok(())
    }

    pub fn encode_symbol(&mut self, cdf: &QuantizedCdf, sym: usize) -> Result<()> {
        if sym >= cdf.symbols() {
            return Err(Error::Input(format!("symbol {sym} outside a {}-symbol table", cdf.symbols())));
        }
        self.encode(cdf.low(sym), cdf.freq(sym), cdf.total())
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> WINDOW_BITS) as u8;
        let top = ((self.low >> (WINDOW_BITS - 8)) & 0xff) as u8;
        if carry != 0 || top != 0xff {
            if let Some(c) = self.cache {
                self.out.push(c.wrapping_add(carry));
            }
            for _ in 0..self.pending {
                self.out.push(0xffu8.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = Some(top);
        } else {
            self.pending += 1;
        }
        self.low = (self.low << 8) & MASK;
    }

    /// Flushes the shortest tail that still pins the final interval, then
    /// drops trailing zero bytes (the decoder reads zeros past the end).
    pub fn finish(mut self) -> (Vec<u8>, CodeAudit) {
        let hi = self.low + self.range;
        for bits in (0..=WINDOW_BITS).rev() {
            let m = (1u64 << bits) - 1;
            let v = (self.low + m) & !m;
            if v >= self.low && v < hi {
                self.low = v;
                break;
            }
        }
        for _ in 0..=(WINDOW_BITS / 8) {
            self.shift_low();
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.audit.actual_bits = self.out.len() as u64 * 8;
        (self.out, self.audit)
    }
}

#[derive(Clone, Debug)]
pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self { code: 0, range: WINDOW, input, pos: 0 };
        for _ in 0..WINDOW_BITS / 8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Decodes one symbol given the frequency lookup of the current table.
    /// Corrupt input yields some symbol rather than an error or a panic.
    pub fn decode_with<F>(&mut self, total: u32, find: F) -> Result<(u32, u32, usize)>
    where
        F: FnOnce(u32) -> (u32, u32, usize),
    {
        if total == 0 || total > MAX_TOTAL {
            return Err(Error::Domain(format!("invalid frequency total {total}")));
        }
        let r = self.range / total as u64;
        let target = (self.code / r).min(total as u64 - 1) as u32;
        let (start, freq, sym) = find(target);
        self.code = self.code.saturating_sub(r * start as u64);
        self.range = r * freq.max(1) as u64;
        if self.code >= self.range {
            self.code = self.range - 1;
        }
        while self.range < BOTTOM {
            self.range <<= 8;
            self.code = ((self.code << 8) | self.next_byte() as u64) & MASK;
        }
        Ok((start, freq, sym))
    }

    pub fn decode_symbol(&mut self, cdf: &QuantizedCdf) -> Result<usize> {
        let (_, _, sym) = self.decode_with(cdf.total(), |t| {
            let s = cdf.find(t);
            (cdf.low(s), cdf.freq(s), s)
        })?;
        Ok(sym)
    }

    /// Bytes consumed so far, including virtual zero padding.
    pub fn position(&self) -> usize {
        self.pos
    }
}
