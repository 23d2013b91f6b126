//! Compression measurements over a set of files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use super::codec::Codec;
use crate::coder::order0_bits_per_byte;
use crate::corpus::Sample;
use crate::routing::UsageTable;
use crate::tokenizer::Modality;
use crate::{Error, Result};

pub const CSV_HEADER: &str =
    "file,modality,orig_bytes,comp_bytes,bits_per_byte,adj_bits_per_byte,enc_kbs,dec_kbs,baseline_bpb";

/// Published gzip bits/Byte on the standard benchmark for each modality.
/// Shown for context only, never recomputed here.
pub const GZIP_REFERENCE: [(Modality, &str, f64); 7] = [
    (Modality::Image, "Kodak", 4.349),
    (Modality::Tactile, "TouchandGo", 2.298),
    (Modality::Medical, "Coronal", 4.563),
    (Modality::Text, "enwik9", 2.590),
    (Modality::Database, "Spider", 2.289),
    (Modality::Gene, "GenoSeq", 2.390),
    (Modality::Speech, "LibriSpeech", 6.511),
];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub file: String,
    pub modality: Modality,
    pub orig_bytes: u64,
    pub comp_bytes: u64,
    pub bits_per_byte: f64,
    /// Bits/Byte with the checkpoint size charged to this file.
    pub adj_bits_per_byte: f64,
    pub enc_kbs: f64,
    pub dec_kbs: f64,
    /// Adaptive order-0 arithmetic coding of the same bytes.
    pub baseline_bpb: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub checkpoint_bytes: u64,
    pub usage: Option<UsageTable>,
}

/// Size-weighted totals for one modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalitySummary {
    pub files: usize,
    pub orig_bytes: u64,
    pub bits_per_byte: f64,
    pub baseline_bpb: f64,
}

impl ModalitySummary {
    /// Relative saving over the order-0 baseline.
    pub fn gain(&self) -> f64 {
        1.0 - self.bits_per_byte / self.baseline_bpb
    }
}

impl BenchReport {
    pub fn summary(&self) -> BTreeMap<Modality, ModalitySummary> {
        let mut acc: BTreeMap<Modality, (usize, u64, u64, f64)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry(r.modality).or_default();
            e.0 += 1;
            e.1 += r.orig_bytes;
            e.2 += r.comp_bytes;
            e.3 += r.baseline_bpb * r.orig_bytes as f64;
        }
        acc.into_iter()
            .map(|(m, (files, orig, comp, base))| {
                let o = orig as f64;
                (m, ModalitySummary { files, orig_bytes: orig, bits_per_byte: 8.0 * comp as f64 / o, baseline_bpb: base / o })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.4},{:.4},{:.2},{:.2},{:.4}",
                r.file,
                r.modality,
                r.orig_bytes,
                r.comp_bytes,
                r.bits_per_byte,
                r.adj_bits_per_byte,
                r.enc_kbs,
                r.dec_kbs,
                r.baseline_bpb
            );
        }
        s
    }

    /// Human-readable per-modality table with the gzip reference column.
    pub fn summary_table(&self) -> String {
        let mut s = String::from("modality   files  bytes      bpB     order0  gain    gzip(ref)\n");
        let summary = self.summary();
        for (m, name, gz) in GZIP_REFERENCE {
            if let Some(v) = summary.get(&m) {
                let _ = writeln!(
                    s,
                    "{:<10} {:>5}  {:>9}  {:.3}  {:.3}   {:>5.1}%  {gz:.3} ({name})",
                    m.name(),
                    v.files,
                    v.orig_bytes,
                    v.bits_per_byte,
                    v.baseline_bpb,
                    100.0 * v.gain()
                );
            }
        }
        let _ = write!(s, "checkpoint {} bytes, charged per file in adj_bits_per_byte", self.checkpoint_bytes);
        s
    }
}

fn kbs(bytes: usize, secs: f64) -> f64 {
    bytes as f64 / 1024.0 / secs.max(1e-9)
}

/// Compresses, decompresses and verifies each sample. Empty samples are
/// skipped since bits/Byte is undefined for them.
pub fn bench(codec: &Codec, samples: &[Sample], track_usage: bool) -> Result<BenchReport> {
    let mut rows = Vec::new();
    let mut usage: Option<UsageTable> = None;
    let ckpt = codec.checkpoint_len() as u64;
    for s in samples.iter().filter(|s| !s.is_empty()) {
        let t = Instant::now();
        let out = codec.compress(&s.bytes, s.modality, track_usage)?;
        let packed = out.container.to_bytes()?;
        let enc = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let back = codec.decompress(&packed)?;
        let dec = t.elapsed().as_secs_f64();
        if back != s.bytes {
            return Err(Error::Verification(format!("{} did not roundtrip", s.path.display())));
        }
        if let Some(u) = out.usage {
            match &mut usage {
                Some(t) => t.merge(&u),
                None => usage = Some(u),
            }
        }
        let n = s.len() as f64;
        let comp = packed.len() as u64;
        rows.push(BenchRow {
            file: s.path.display().to_string(),
            modality: s.modality,
            orig_bytes: s.len() as u64,
            comp_bytes: comp,
            bits_per_byte: 8.0 * comp as f64 / n,
            adj_bits_per_byte: 8.0 * (comp + ckpt) as f64 / n,
            enc_kbs: kbs(s.len(), enc),
            dec_kbs: kbs(s.len(), dec),
            baseline_bpb: order0_bits_per_byte(&s.bytes)?,
        });
    }
    Ok(BenchReport { rows, checkpoint_bytes: ckpt, usage })
}
