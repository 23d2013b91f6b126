//! Unified token space shared by all seven modalities.
//!
//! Ids `0..256` are raw bytes / sub-pixels, `256..263` are the modality
//! prefixes and `263..` are BPE pieces (the BPE model's own byte-fallback
//! pieces included).

mod bpe;
mod patch;

use std::ops::Range;

use sha2::{Digest, Sha256};

pub use bpe::{default_reserved, train_bpe, BpeModel};
pub use patch::{depatchify, patchify, PatchGeometry, PixelGrid, PATCH};

use crate::{Error, Result};

pub type TokenId = u32;

pub const BYTE_TOKENS: usize = 256;
pub const PREFIX_BASE: usize = 256;
pub const BPE_BASE: usize = PREFIX_BASE + Modality::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Medical,
    Tactile,
    Text,
    Gene,
    Database,
    Speech,
}

impl Modality {
    pub const ALL: [Modality; 7] = [
        Modality::Image,
        Modality::Medical,
        Modality::Tactile,
        Modality::Text,
        Modality::Gene,
        Modality::Database,
        Modality::Speech,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL.get(tag as usize).copied().ok_or_else(|| Error::Header(format!("unknown modality tag {tag}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Medical => "medical",
            Modality::Tactile => "tactile",
            Modality::Text => "text",
            Modality::Gene => "gene",
            Modality::Database => "database",
            Modality::Speech => "speech",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Input(format!("unknown modality `{name}`")))
    }

    pub fn prefix(self) -> TokenId {
        (PREFIX_BASE + self as usize) as TokenId
    }

    /// Byte-alphabet modalities: the three image-like ones and speech.
    pub fn is_byte(self) -> bool {
        matches!(self, Modality::Image | Modality::Medical | Modality::Tactile | Modality::Speech)
    }

    pub fn is_image_like(self) -> bool {
        matches!(self, Modality::Image | Modality::Medical | Modality::Tactile)
    }

    /// Tokens per independently coded chunk: one RGB patch for image-like
    /// data, 1024 otherwise.
    pub fn chunk_len(self) -> usize {
        if self.is_image_like() {
            PATCH * PATCH * 3
        } else {
            1024
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Merged vocabulary with one mask per modality.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    bpe: BpeModel,
    byte_mask: Vec<bool>,
    bpe_mask: Vec<bool>,
    hash: [u8; 32],
}

impl Vocabulary {
    pub fn new(bpe: BpeModel) -> Self {
        let size = BPE_BASE + bpe.len();
        let byte_mask = (0..size).map(|i| i < BYTE_TOKENS).collect();
        let bpe_mask = (0..size).map(|i| i >= BPE_BASE).collect();
        let hash = Sha256::digest(bpe.to_bytes()).into();
        Self { bpe, byte_mask, bpe_mask, hash }
    }

    pub fn size(&self) -> usize {
        BPE_BASE + self.bpe.len()
    }

    pub fn bpe(&self) -> &BpeModel {
        &self.bpe
    }

    /// SHA-256 of the serialized BPE model.
    pub fn hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn mask_for(&self, m: Modality) -> &[bool] {
        if m.is_byte() {
            &self.byte_mask
        } else {
            &self.bpe_mask
        }
    }

    /// The contiguous id range selected by the modality's mask.
    pub fn range_for(&self, m: Modality) -> Range<usize> {
        mask_range(m, self.size())
    }
}

/// Id range of a modality's mask in a vocabulary of `vocab_size` ids.
pub fn mask_range(m: Modality, vocab_size: usize) -> Range<usize> {
    if m.is_byte() {
        0..BYTE_TOKENS
    } else {
        BPE_BASE..vocab_size
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub modality: Modality,
    /// Prefix token first.
    pub tokens: Vec<TokenId>,
    pub geometry: Option<PatchGeometry>,
    pub original_len: u64,
}

impl TokenSequence {
    pub fn body(&self) -> &[TokenId] {
        &self.tokens[1.min(self.tokens.len())..]
    }
}

/// Input to [`encode`]. Image-like modalities given plain bytes fall back to
/// byte tokens without geometry.
#[derive(Clone, Copy, Debug)]
pub enum RawData<'a> {
    Bytes(&'a [u8]),
    Image(&'a PixelGrid),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decoded {
    Bytes(Vec<u8>),
    Image(PixelGrid),
}

pub fn encode(data: RawData<'_>, modality: Modality, vocab: &Vocabulary) -> Result<TokenSequence> {
    let mut tokens = vec![modality.prefix()];
    match data {
        RawData::Image(img) => {
            if !modality.is_image_like() {
                return Err(Error::Input(format!("{modality} data cannot be an image")));
            }
            let want = match modality {
                Modality::Medical => Some(1),
                Modality::Tactile => Some(3),
                _ => None,
            };
            if want.is_some_and(|c| c != img.channels) {
                return Err(Error::Input(format!("{modality} images need {} channels", want.unwrap())));
            }
            if img.channels != 1 && img.channels != 3 {
                return Err(Error::Input(format!("images need 1 or 3 channels, got {}", img.channels)));
            }
            let (subpixels, geom) = patchify(img);
            tokens.extend(subpixels.iter().map(|&b| b as TokenId));
            Ok(TokenSequence { modality, tokens, geometry: Some(geom), original_len: img.data.len() as u64 })
        }
        RawData::Bytes(bytes) => {
            if modality.is_byte() {
                tokens.extend(bytes.iter().map(|&b| b as TokenId));
            } else {
                tokens.extend(vocab.bpe().encode(bytes).into_iter().map(|id| id + BPE_BASE as TokenId));
            }
            Ok(TokenSequence { modality, tokens, geometry: None, original_len: bytes.len() as u64 })
        }
    }
}

pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Result<Decoded> {
    if seq.tokens.first() != Some(&seq.modality.prefix()) {
        return Err(Error::Corruption("sequence does not start with its modality prefix".into()));
    }
    let range = vocab.range_for(seq.modality);
    if let Some(t) = seq.body().iter().find(|&&t| !range.contains(&(t as usize))) {
        return Err(Error::Corruption(format!("token {t} is outside the {} mask", seq.modality)));
    }
    let out = if seq.modality.is_byte() {
        let bytes: Vec<u8> = seq.body().iter().map(|&t| t as u8).collect();
        match &seq.geometry {
            Some(g) => Decoded::Image(depatchify(&bytes, g)?),
            None => Decoded::Bytes(bytes),
        }
    } else {
        let ids: Vec<u32> = seq.body().iter().map(|&t| t - BPE_BASE as TokenId).collect();
        Decoded::Bytes(vocab.bpe().decode(&ids)?)
    };
    let len = match &out {
        Decoded::Bytes(b) => b.len(),
        Decoded::Image(img) => img.data.len(),
    };
    if len as u64 != seq.original_len {
        return Err(Error::Corruption(format!("decoded {len} bytes, expected {}", seq.original_len)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let corpus: &[&[u8]] = &[b"hello hello world, SELECT a FROM t WHERE b", b"ACGTACGT"];
        Vocabulary::new(train_bpe(corpus, 320, &default_reserved()).unwrap())
    }

    #[test]
    fn id_layout() {
        let v = vocab();
        assert_eq!(v.size(), 263 + 320);
        assert_eq!(Modality::Image.prefix(), 256);
        assert_eq!(Modality::Speech.prefix(), 262);
    }

    #[test]
    fn speech_bytes_are_identity_tokens() {
        let v = vocab();
        let s = encode(RawData::Bytes(&[0x00, 0xff]), Modality::Speech, &v).unwrap();
        assert_eq!(s.tokens, vec![Modality::Speech.prefix(), 0, 255]);
    }

    #[test]
    fn masks_partition_vocabulary() {
        let v = vocab();
        let speech = v.mask_for(Modality::Speech);
        assert_eq!(speech.iter().filter(|&&b| b).count(), 256);
        assert!(speech[..256].iter().all(|&b| b));
        let text = v.mask_for(Modality::Text);
        assert_eq!(text.iter().filter(|&&b| b).count(), 320);
        assert!(text.iter().zip(v.mask_for(Modality::Image)).all(|(a, b)| !(a & b)));
        for id in 0..v.size() {
            let covered = Modality::ALL.iter().any(|&m| v.mask_for(m)[id]) || (PREFIX_BASE..BPE_BASE).contains(&id);
            assert!(covered, "id {id} uncovered");
        }
        for m in Modality::ALL {
            assert!(!v.mask_for(m)[m.prefix() as usize]);
        }
    }

    #[test]
    fn text_decodes_through_bpe_pieces() {
        let v = vocab();
        let (he, llo) = (v.bpe().id_of(b"he"), v.bpe().id_of(b"llo"));
        let s = encode(RawData::Bytes(b"hello"), Modality::Text, &v).unwrap();
        assert_eq!(decode(&s, &v).unwrap(), Decoded::Bytes(b"hello".to_vec()));
        if let (Some(he), Some(llo)) = (he, llo) {
            let base = BPE_BASE as TokenId;
            let seq = TokenSequence {
                modality: Modality::Text,
                tokens: vec![Modality::Text.prefix(), he + base, llo + base],
                geometry: None,
                original_len: 5,
            };
            assert_eq!(decode(&seq, &v).unwrap(), Decoded::Bytes(b"hello".to_vec()));
        }
    }

    #[test]
    fn out_of_mask_token_is_corruption() {
        let v = vocab();
        let seq = TokenSequence {
            modality: Modality::Speech,
            tokens: vec![Modality::Speech.prefix(), 300],
            geometry: None,
            original_len: 1,
        };
        assert!(matches!(decode(&seq, &v), Err(Error::Corruption(_))));
    }

    #[test]
    fn truncated_patch_is_corruption() {
        let v = vocab();
        let img = PixelGrid::new(16, 16, 3, vec![1; 768]).unwrap();
        let mut s = encode(RawData::Image(&img), Modality::Image, &v).unwrap();
        assert_eq!(s.body().len(), 768);
        s.tokens.pop();
        assert!(matches!(decode(&s, &v), Err(Error::Corruption(_))));
    }

    #[test]
    fn medical_requires_grayscale() {
        let v = vocab();
        let img = PixelGrid::new(1, 1, 3, vec![1, 2, 3]).unwrap();
        assert!(encode(RawData::Image(&img), Modality::Medical, &v).is_err());
        assert!(encode(RawData::Image(&img), Modality::Text, &v).is_err());
    }
}
