//! Entropy coding: probability quantization, the range coder and an adaptive
//! order-0 baseline.

mod cdf;
mod order0;
mod range;

pub use cdf::{quantize_cdf, quantize_into, MaskedCdf, QuantizedCdf, PRECISION};
pub use order0::{order0_bits_per_byte, order0_compress, order0_decompress, AdaptiveByteModel};
pub use range::{CodeAudit, RangeDecoder, RangeEncoder, MAX_TOTAL};
