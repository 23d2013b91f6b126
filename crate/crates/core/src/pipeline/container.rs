//! The compressed file format.
//!
//! ```text
//! "OZIP" | version u16 | modality u8 | flags u8 | original_len u64
//! model_hash [32] | vocab_hash [32]
//! geometry: height u32 | width u32 | channels u8 | pad_bottom u8 | pad_right u8
//!           (image-like modalities only, absent for raw fallback)
//! prelude_len u32 | prelude
//! chunk_count u32 | chunk_count x payload_len u32
//! payloads
//! crc32 u32 over everything above
//! ```
//!
//! All integers are little-endian.

use std::fmt;

use crate::numerics::checkpoint::Reader;
use crate::tokenizer::{Modality, PatchGeometry};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OZIP";
pub const VERSION: u16 = 1;
/// The input did not parse as its modality's format and was coded as
/// plain bytes.
pub const FLAG_RAW: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub modality: Modality,
    pub flags: u8,
    pub original_len: u64,
    pub model_hash: [u8; 32],
    pub vocab_hash: [u8; 32],
    pub geometry: Option<PatchGeometry>,
    pub prelude: Vec<u8>,
}

impl ContainerHeader {
    pub fn is_raw(&self) -> bool {
        self.flags & FLAG_RAW != 0
    }

    fn has_geometry(modality: Modality, flags: u8) -> bool {
        modality.is_image_like() && flags & FLAG_RAW == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub chunks: Vec<Vec<u8>>,
}

impl Container {
    /// Bytes before the first payload.
    pub fn header_len(&self) -> usize {
        let geom = if self.header.geometry.is_some() { 11 } else { 0 };
        4 + 2 + 1 + 1 + 8 + 32 + 32 + geom + 4 + self.header.prelude.len() + 4 + 4 * self.chunks.len()
    }

    pub fn payload_len(&self) -> usize {
        self.chunks.iter().map(Vec::len).sum()
    }

    /// Total serialized size: header, payloads and the CRC trailer.
    pub fn encoded_len(&self) -> usize {
        self.header_len() + self.payload_len() + 4
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        if h.geometry.is_some() != ContainerHeader::has_geometry(h.modality, h.flags) {
            return Err(Error::Input("geometry must be present exactly for parsed image-like data".into()));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(h.modality.tag());
        out.push(h.flags);
        out.extend_from_slice(&h.original_len.to_le_bytes());
        out.extend_from_slice(&h.model_hash);
        out.extend_from_slice(&h.vocab_hash);
        if let Some(g) = &h.geometry {
            out.extend_from_slice(&(g.height as u32).to_le_bytes());
            out.extend_from_slice(&(g.width as u32).to_le_bytes());
            out.extend_from_slice(&[g.channels as u8, g.pad_bottom as u8, g.pad_right as u8]);
        }
        let len32 = |n: usize, what: &str| {
            u32::try_from(n).map_err(|_| Error::Input(format!("{what} of {n} bytes does not fit the container")))
        };
        out.extend_from_slice(&len32(h.prelude.len(), "prelude")?.to_le_bytes());
        out.extend_from_slice(&h.prelude);
        out.extend_from_slice(&len32(self.chunks.len(), "chunk table")?.to_le_bytes());
        for c in &self.chunks {
            out.extend_from_slice(&len32(c.len(), "chunk")?.to_le_bytes());
        }
        for c in &self.chunks {
            out.extend_from_slice(c);
        }
        out.extend_from_slice(&crc32fast::hash(&out).to_le_bytes());
        Ok(out)
    }

    /// Parses and checks a container. The CRC is verified before any field
    /// is trusted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 || &bytes[..4] != MAGIC {
            return Err(Error::Header("not an OZIP container".into()));
        }
        if bytes.len() < 8 {
            return Err(Error::Header("container is truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader::new(body);
        r.take(4)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Header(format!("unsupported container version {version}")));
        }
        let modality = Modality::from_tag(r.u8()?)?;
        let flags = r.u8()?;
        if flags & !FLAG_RAW != 0 {
            return Err(Error::Header(format!("unknown flags {flags:#04x}")));
        }
        let original_len = r.u64()?;
        let model_hash = r.take(32)?.try_into().unwrap();
        let vocab_hash = r.take(32)?.try_into().unwrap();
        let geometry = if ContainerHeader::has_geometry(modality, flags) {
            let height = r.u32()? as usize;
            let width = r.u32()? as usize;
            let g = r.take(3)?;
            let geom = PatchGeometry {
                height,
                width,
                channels: g[0] as usize,
                pad_bottom: g[1] as usize,
                pad_right: g[2] as usize,
            };
            geom.validate().map_err(|e| Error::Header(e.to_string()))?;
            Some(geom)
        } else {
            None
        };
        let prelude_len = r.u32()? as usize;
        let prelude = r.take(prelude_len)?.to_vec();
        let count = r.u32()? as usize;
        if count > r.remaining() / 4 {
            return Err(Error::Header(format!("chunk table of {count} entries does not fit")));
        }
        let lens: Vec<usize> = (0..count).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let mut chunks = Vec::with_capacity(count);
        for &n in &lens {
            chunks.push(r.take(n)?.to_vec());
        }
        if r.remaining() != 0 {
            return Err(Error::Header(format!("{} unexpected bytes after the payloads", r.remaining())));
        }
        let header = ContainerHeader { modality, flags, original_len, model_hash, vocab_hash, geometry, prelude };
        Ok(Self { header, chunks })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `key=value` lines describing the header.
impl fmt::Display for Container {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = &self.header;
        writeln!(f, "version={VERSION}")?;
        writeln!(f, "modality={}", h.modality)?;
        writeln!(f, "raw_fallback={}", h.is_raw())?;
        writeln!(f, "original_len={}", h.original_len)?;
        writeln!(f, "model_hash={}", hex(&h.model_hash))?;
        writeln!(f, "vocab_hash={}", hex(&h.vocab_hash))?;
        if let Some(g) = &h.geometry {
            writeln!(
                f,
                "geometry={}x{}x{} pad_bottom={} pad_right={}",
                g.width, g.height, g.channels, g.pad_bottom, g.pad_right
            )?;
        }
        writeln!(f, "prelude_len={}", h.prelude.len())?;
        writeln!(f, "chunks={}", self.chunks.len())?;
        writeln!(f, "header_bytes={}", self.header_len())?;
        writeln!(f, "payload_bytes={}", self.payload_len())?;
        write!(f, "total_bytes={}", self.encoded_len())
    }
}
