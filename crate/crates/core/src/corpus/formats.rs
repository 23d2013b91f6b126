//! Loss-free parsers and writers for the ingestion formats.
//!
//! Every parser reports where the structured payload sits inside the file so
//! the remaining bytes can be stored verbatim.

use crate::tokenizer::PixelGrid;
use crate::{Error, Result};

/// A parsed file: `bytes[..header]` and `bytes[end..]` are stored verbatim,
/// the payload in between is modelled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub header: usize,
    pub end: usize,
}

/// Binary PPM (`P6`) or PGM (`P5`) with 8-bit samples.
pub fn parse_pnm(bytes: &[u8]) -> Result<(PixelGrid, Split)> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::Unsupported("not a binary PPM/PGM file".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Input("truncated PNM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(Error::Input("bad number in PNM header".into()));
        }
        *f = std::str::from_utf8(&bytes[start..pos]).unwrap().parse().unwrap();
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Input("PNM header must end in one whitespace byte".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Unsupported(format!("PNM maxval {maxval}; only 8-bit (255) is supported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Input("PNM image has a zero dimension".into()));
    }
    let n = width * height * channels;
    let end = pos + n;
    if end > bytes.len() {
        return Err(Error::Input(format!("PNM payload truncated: {} of {n} bytes", bytes.len() - pos)));
    }
    let grid = PixelGrid::new(width, height, channels, bytes[pos..end].to_vec())?;
    Ok((grid, Split { header: pos, end }))
}

pub fn write_pnm(grid: &PixelGrid) -> Vec<u8> {
    let magic = if grid.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend_from_slice(&grid.data);
    out
}

pub fn load_image_ppm(path: &std::path::Path) -> Result<PixelGrid> {
    let (g, _) = parse_pnm(&std::fs::read(path)?)?;
    if g.channels != 3 {
        return Err(Error::Unsupported(format!("{} is not an RGB PPM", path.display())));
    }
    Ok(g)
}

pub fn load_image_pgm(path: &std::path::Path) -> Result<PixelGrid> {
    let (g, _) = parse_pnm(&std::fs::read(path)?)?;
    if g.channels != 1 {
        return Err(Error::Unsupported(format!("{} is not a grayscale PGM", path.display())));
    }
    Ok(g)
}

/// RIFF/WAVE with an uncompressed PCM `data` chunk.
pub fn parse_wav(bytes: &[u8]) -> Result<Split> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Unsupported("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut pcm = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                let tag = bytes.get(body..body + 2).ok_or_else(|| Error::Input("truncated fmt chunk".into()))?;
                let tag = u16::from_le_bytes([tag[0], tag[1]]);
                if tag != 1 {
                    return Err(Error::Unsupported(format!("WAV format tag {tag} is not PCM")));
                }
                pcm = true;
            }
            b"data" => {
                if !pcm {
                    return Err(Error::Input("WAV data chunk before fmt chunk".into()));
                }
                let end = body.checked_add(size).filter(|&e| e <= bytes.len());
                let end = end.ok_or_else(|| Error::Input("WAV data chunk is truncated".into()))?;
                return Ok(Split { header: body, end });
            }
            _ => {}
        }
        pos = body.saturating_add(size).saturating_add(size & 1);
    }
    Err(Error::Input("WAV file has no data chunk".into()))
}

/// Canonical 44-byte PCM header followed by `samples`.
pub fn write_wav(sample_rate: u32, channels: u16, samples: &[i16]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * channels as u32 * 2).to_le_bytes());
    out.extend_from_slice(&(channels * 2).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Header bytes and PCM payload of a WAV file.
pub fn load_wav_pcm(path: &std::path::Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let s = parse_wav(&bytes)?;
    Ok((bytes[..s.header].to_vec(), bytes[s.header..s.end].to_vec()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FastaRecord {
    pub description: String,
    pub bases: Vec<u8>,
}

/// Records of a FASTA file. Anything before the first `>` line is ignored,
/// as are line breaks; other bytes are kept as bases.
pub fn parse_fasta(bytes: &[u8]) -> Vec<FastaRecord> {
    let mut out: Vec<FastaRecord> = Vec::new();
    for line in bytes.split(|&b| b == b'\n') {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if let Some(desc) = line.strip_prefix(b">") {
            out.push(FastaRecord { description: String::from_utf8_lossy(desc).into_owned(), bases: Vec::new() });
        } else if let Some(r) = out.last_mut() {
            r.bases.extend_from_slice(line);
        }
    }
    out
}

pub fn load_fasta(path: &std::path::Path) -> Result<Vec<FastaRecord>> {
    Ok(parse_fasta(&std::fs::read(path)?))
}

/// Longest sequence line, the width the records were wrapped at.
pub fn fasta_line_width(bytes: &[u8]) -> usize {
    bytes.split(|&b| b == b'\n').filter(|l| !l.starts_with(b">")).map(<[u8]>::len).max().unwrap_or(0)
}

pub fn write_fasta(records: &[FastaRecord], width: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.push(b'>');
        out.extend_from_slice(r.description.as_bytes());
        out.push(b'\n');
        for line in r.bases.chunks(width.max(1)) {
            out.extend_from_slice(line);
            out.push(b'\n');
        }
    }
    out
}

pub const TFG_MAGIC: &[u8; 4] = b"TFG1";
const TFG_HEADER: usize = 4 + 4 + 4 + 6 * 4;

/// Tactile force grid: per-cell (x, y, z) forces quantized to bytes, with a
/// per-axis offset and scale so `force = offset + scale * q / 255`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceGrid {
    pub offset: [f32; 3],
    pub scale: [f32; 3],
    pub grid: PixelGrid,
}

impl ForceGrid {
    /// Min-max quantization of raw forces (`width * height * 3`, xyz
    /// interleaved).
    pub fn quantize(width: usize, height: usize, forces: &[f32]) -> Result<Self> {
        if forces.len() != width * height * 3 {
            return Err(Error::Dimension(format!("{} forces for a {width}x{height} grid", forces.len())));
        }
        let mut offset = [0f32; 3];
        let mut scale = [0f32; 3];
        for c in 0..3 {
            let axis = forces.iter().skip(c).step_by(3);
            let lo = axis.clone().copied().fold(f32::INFINITY, f32::min);
            let hi = axis.copied().fold(f32::NEG_INFINITY, f32::max);
            offset[c] = lo;
            scale[c] = hi - lo;
        }
        let data = forces
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let c = i % 3;
                if scale[c] > 0.0 {
                    ((f - offset[c]) / scale[c] * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        Ok(Self { offset, scale, grid: PixelGrid::new(width, height, 3, data)? })
    }

    pub fn force(&self, x: usize, y: usize, axis: usize) -> f32 {
        let q = self.grid.data[(y * self.grid.width + x) * 3 + axis] as f32;
        self.offset[axis] + self.scale[axis] * q / 255.0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TFG_HEADER + self.grid.data.len());
        out.extend_from_slice(TFG_MAGIC);
        out.extend_from_slice(&(self.grid.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid.height as u32).to_le_bytes());
        for c in 0..3 {
            out.extend_from_slice(&self.offset[c].to_le_bytes());
            out.extend_from_slice(&self.scale[c].to_le_bytes());
        }
        out.extend_from_slice(&self.grid.data);
        out
    }
}

pub fn parse_tfg(bytes: &[u8]) -> Result<(ForceGrid, Split)> {
    if bytes.len() < TFG_HEADER || &bytes[..4] != TFG_MAGIC {
        return Err(Error::Unsupported("not a TFG1 force grid".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (width, height) = (word(4) as usize, word(8) as usize);
    let mut offset = [0f32; 3];
    let mut scale = [0f32; 3];
    for c in 0..3 {
        offset[c] = f32::from_bits(word(12 + 8 * c));
        scale[c] = f32::from_bits(word(16 + 8 * c));
    }
    let n = width.checked_mul(height).and_then(|p| p.checked_mul(3));
    let end = n.and_then(|n| n.checked_add(TFG_HEADER)).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| Error::Input("TFG1 payload truncated".into()))?;
    if width == 0 || height == 0 {
        return Err(Error::Input("TFG1 grid has a zero dimension".into()));
    }
    let grid = PixelGrid::new(width, height, 3, bytes[TFG_HEADER..end].to_vec())?;
    Ok((ForceGrid { offset, scale, grid }, Split { header: TFG_HEADER, end }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tiny_ppm() {
        let file = b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06";
        let (g, s) = parse_pnm(file).unwrap();
        assert_eq!((g.width, g.height, g.channels), (2, 1, 3));
        assert_eq!(g.data, [1, 2, 3, 4, 5, 6]);
        assert_eq!(s, Split { header: 11, end: 17 });
    }

    #[test]
    fn pnm_comments_and_errors() {
        let (g, _) = parse_pnm(b"P5 # note\n1 # w\n2\n255 \x07\x08trail").unwrap();
        assert_eq!(g.data, [7, 8]);
        assert!(matches!(parse_pnm(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::Unsupported(_))));
        assert!(matches!(parse_pnm(b"P6\n2 2\n255\n\x00"), Err(Error::Input(_))));
        assert!(matches!(parse_pnm(b"P3\n1 1\n255\n0 0 0"), Err(Error::Unsupported(_))));
        assert!(parse_pnm(b"P6\n").is_err());
    }

    #[test]
    fn minimal_wav() {
        let w = write_wav(8000, 1, &[1, -1, 300, -300]);
        assert_eq!(w.len(), 52);
        let s = parse_wav(&w).unwrap();
        assert_eq!((s.header, s.end - s.header), (44, 8));
        assert_eq!([&w[..s.header], &w[s.header..]].concat(), w);
    }

    #[test]
    fn non_pcm_wav_is_unsupported() {
        let mut w = write_wav(8000, 1, &[0; 4]);
        w[20] = 3;
        assert!(matches!(parse_wav(&w), Err(Error::Unsupported(_))));
    }

    #[test]
    fn truncated_wav_is_clean_error() {
        let w = write_wav(8000, 1, &[5; 100]);
        for cut in 0..w.len() {
            let r = parse_wav(&w[..cut]);
            assert!(r.is_err(), "cut {cut}");
        }
    }

    #[test]
    fn fasta_records() {
        let r = parse_fasta(b">x\nACGT\n");
        assert_eq!(r, vec![FastaRecord { description: "x".into(), bases: b"ACGT".to_vec() }]);
    }

    #[test]
    fn force_grid_roundtrip() {
        let forces: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 * 0.5 - 2.0).collect();
        let fg = ForceGrid::quantize(3, 2, &forces).unwrap();
        let (back, s) = parse_tfg(&fg.to_bytes()).unwrap();
        assert_eq!(back, fg);
        assert_eq!(s.end, fg.to_bytes().len());
        assert!((fg.force(2, 1, 2) - forces[17]).abs() < 1e-5);
        assert!(parse_tfg(&fg.to_bytes()[..30]).is_err());
    }

    proptest! {
        #[test]
        fn pnm_roundtrip(w in 1usize..40, h in 1usize..40, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let data: Vec<u8> = (0..w * h * c).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let g = PixelGrid::new(w, h, c, data).unwrap();
            let (back, _) = parse_pnm(&write_pnm(&g)).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn wav_parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..80), cut in 0usize..60) {
            let mut w = write_wav(16000, 1, &[7; 8]);
            w.truncate(cut.min(w.len()));
            w.extend(bytes);
            let _ = parse_wav(&w);
        }

        #[test]
        fn fasta_counts_bases(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut f = Vec::new();
            while f.len() < 10 * 1024 {
                if rng.gen_bool(0.05) {
                    f.extend_from_slice(b">rec\n");
                } else {
                    let n = rng.gen_range(1..80);
                    f.extend((0..n).map(|_| b"ACGTN"[rng.gen_range(0..5)]));
                    f.push(b'\n');
                }
            }
            let want = f.split(|&b| b == b'\n').filter(|l| !l.starts_with(b">")).map(<[u8]>::len).sum::<usize>();
            let lead = f.split(|&b| b == b'\n').take_while(|l| !l.starts_with(b">")).map(<[u8]>::len).sum::<usize>();
            let got: usize = parse_fasta(&f).iter().map(|r| r.bases.len()).sum();
            prop_assert_eq!(got, want - lead);
        }

        #[test]
        fn fasta_rewrites_at_recorded_width(n in 1usize..6, width in 10usize..80, seed in any::<u64>()) {
            let recs: Vec<FastaRecord> = (0..n)
                .map(|i| FastaRecord {
                    description: format!("r{i}"),
                    bases: (0..(seed as usize % 500) + i * 37 + 1).map(|j| b"ACGT"[(j * 7 + i) % 4]).collect(),
                })
                .collect();
            let file = write_fasta(&recs, width);
            let w = fasta_line_width(&file);
            prop_assert_eq!(write_fasta(&parse_fasta(&file), w), file);
        }
    }
}
