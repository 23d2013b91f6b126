//! Adaptive order-0 byte coder used as the reference baseline.

use super::range::{RangeDecoder, RangeEncoder};
use crate::Result;

const LIMIT: u32 = 1 << 16;

/// Running byte counts, all starting at 1, halved when the total passes
/// `2^16`.
#[derive(Clone, Debug)]
pub struct AdaptiveByteModel {
    freqs: [u32; 256],
    total: u32,
}

impl Default for AdaptiveByteModel {
    fn default() -> Self {
        Self { freqs: [1; 256], total: 256 }
    }
}

impl AdaptiveByteModel {
    fn interval(&self, b: u8) -> (u32, u32) {
        let start = self.freqs[..b as usize].iter().sum();
        (start, self.freqs[b as usize])
    }

    fn locate(&self, target: u32) -> (u32, u32, usize) {
        let mut start = 0;
        for (s, &f) in self.freqs.iter().enumerate() {
            if target < start + f {
                return (start, f, s);
            }
            start += f;
        }
        (start - self.freqs[255], self.freqs[255], 255)
    }

    fn update(&mut self, b: u8) {
        self.freqs[b as usize] += 1;
        self.total += 1;
        if self.total > LIMIT {
            self.total = 0;
            for f in &mut self.freqs {
                *f = (*f).div_ceil(2);
                self.total += *f;
            }
        }
    }
}

pub fn order0_compress(data: &[u8]) -> Result<Vec<u8>> {
    let mut model = AdaptiveByteModel::default();
    let mut enc = RangeEncoder::new();
    for &b in data {
        let (start, freq) = model.interval(b);
        enc.encode(start, freq, model.total)?;
        model.update(b);
    }
    Ok(enc.finish().0)
}

pub fn order0_decompress(payload: &[u8], len: usize) -> Result<Vec<u8>> {
    let mut model = AdaptiveByteModel::default();
    let mut dec = RangeDecoder::new(payload);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let (_, _, s) = dec.decode_with(model.total, |t| model.locate(t))?;
        out.push(s as u8);
        model.update(s as u8);
    }
    Ok(out)
}

/// Baseline bits per byte; 0 for empty input.
pub fn order0_bits_per_byte(data: &[u8]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    Ok(8.0 * order0_compress(data)?.len() as f64 / data.len() as f64)
}
