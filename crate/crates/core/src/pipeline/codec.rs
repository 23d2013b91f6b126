//! File to container and back.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::container::{Container, ContainerHeader, FLAG_RAW};
use crate::coder::{quantize_into, CodeAudit, QuantizedCdf, RangeDecoder, RangeEncoder, PRECISION};
use crate::corpus::{ingest, reassemble, Body, Ingested};
use crate::model::{InferModel, ModelParams};
use crate::numerics::checkpoint::Checkpoint;
use crate::routing::UsageTable;
use crate::tokenizer::{decode, encode, BpeModel, Decoded, Modality, TokenId, TokenSequence, Vocabulary};
use crate::{Error, Result};

/// Checkpoint blob holding the serialized BPE model.
pub const VOCAB_BLOB: &str = "vocab";

/// Packs merged inference weights and the vocabulary into checkpoint bytes.
pub fn export_checkpoint(params: &ModelParams, vocab: &Vocabulary) -> Result<Vec<u8>> {
    if params.config.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model predicts {} ids but the vocabulary has {}",
            params.config.vocab_size,
            vocab.size()
        )));
    }
    let mut ckpt = crate::model::merge_reparam(params)?.to_checkpoint();
    ckpt.blobs.push((VOCAB_BLOB.into(), vocab.bpe().to_bytes()));
    Ok(ckpt.to_bytes())
}

/// Everything compression needs, loaded from one checkpoint file.
pub struct Codec {
    model: InferModel,
    vocab: Vocabulary,
    model_hash: [u8; 32],
    checkpoint_len: usize,
}

/// Result of compressing one input.
pub struct Compressed {
    pub container: Container,
    pub audit: CodeAudit,
    pub usage: Option<UsageTable>,
}

impl Codec {
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt = Checkpoint::from_bytes(bytes)?;
        let blob = ckpt.blob(VOCAB_BLOB).ok_or_else(|| Error::Config("checkpoint has no vocabulary".into()))?;
        let vocab = Vocabulary::new(BpeModel::from_bytes(blob)?);
        let model = InferModel::from_checkpoint(&ckpt)?;
        let cfg = model.config();
        if cfg.vocab_size != vocab.size() {
            return Err(Error::Config(format!("model has {} outputs, vocabulary {} ids", cfg.vocab_size, vocab.size())));
        }
        let longest = Modality::ALL.iter().map(|m| m.chunk_len()).max().unwrap();
        if cfg.context_len < longest {
            return Err(Error::Config(format!("context length {} is below the {longest}-token chunk", cfg.context_len)));
        }
        Ok(Self { model, vocab, model_hash: Sha256::digest(bytes).into(), checkpoint_len: bytes.len() })
    }

    pub fn model(&self) -> &InferModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn model_hash(&self) -> [u8; 32] {
        self.model_hash
    }

    pub fn checkpoint_len(&self) -> usize {
        self.checkpoint_len
    }

    /// Codes `bytes` as `modality`, one independently decodable chunk per
    /// [`Modality::chunk_len`] tokens.
    pub fn compress(&self, bytes: &[u8], modality: Modality, track_usage: bool) -> Result<Compressed> {
        let ing = ingest(bytes, modality);
        let seq = encode(ing.body.as_raw(), modality, &self.vocab)?;
        let body = seq.body();
        let mut prelude = ing.prelude;
        if !modality.is_byte() {
            prelude = (body.len() as u64).to_le_bytes().to_vec();
        }
        let coded: Vec<(Vec<u8>, CodeAudit, Option<UsageTable>)> = body
            .par_chunks(modality.chunk_len())
            .map(|c| self.encode_chunk(modality, c, track_usage))
            .collect::<Result<_>>()?;
        let mut audit = CodeAudit::default();
        let mut usage: Option<UsageTable> = None;
        let mut chunks = Vec::with_capacity(coded.len());
        for (payload, a, u) in coded {
            audit.merge(&a);
            if let Some(u) = u {
                match &mut usage {
                    Some(t) => t.merge(&u),
                    None => usage = Some(u),
                }
            }
            chunks.push(payload);
        }
        let header = ContainerHeader {
            modality,
            flags: if ing.raw { FLAG_RAW } else { 0 },
            original_len: bytes.len() as u64,
            model_hash: self.model_hash,
            vocab_hash: self.vocab.hash(),
            geometry: seq.geometry,
            prelude,
        };
        Ok(Compressed { container: Container { header, chunks }, audit, usage })
    }

    fn encode_chunk(
        &self,
        modality: Modality,
        tokens: &[TokenId],
        track_usage: bool,
    ) -> Result<(Vec<u8>, CodeAudit, Option<UsageTable>)> {
        let mut ctx = self.model.context(modality);
        if track_usage {
            ctx.track_usage();
        }
        let range = ctx.range();
        let mut enc = RangeEncoder::new();
        let mut freqs = Vec::with_capacity(range.len());
        let mut prev = modality.prefix();
        for &t in tokens {
            if !range.contains(&(t as usize)) {
                return Err(Error::Input(format!("token {t} is outside the {modality} mask")));
            }
            quantize_into(ctx.predict_next(prev)?, PRECISION, &mut freqs)?;
            let cdf = QuantizedCdf::from_freqs(&freqs)?;
            enc.encode_symbol(&cdf, t as usize - range.start)?;
            prev = t;
        }
        let (bytes, audit) = enc.finish();
        Ok((bytes, audit, ctx.take_usage()))
    }

    fn decode_chunk(&self, modality: Modality, payload: &[u8], count: usize) -> Result<Vec<TokenId>> {
        let mut ctx = self.model.context(modality);
        let start = ctx.range().start;
        let mut dec = RangeDecoder::new(payload);
        let mut freqs = Vec::new();
        let mut out = Vec::with_capacity(count);
        let mut prev = modality.prefix();
        for _ in 0..count {
            quantize_into(ctx.predict_next(prev)?, PRECISION, &mut freqs)?;
            let cdf = QuantizedCdf::from_freqs(&freqs)?;
            let t = (dec.decode_symbol(&cdf)? + start) as TokenId;
            out.push(t);
            prev = t;
        }
        Ok(out)
    }

    /// Number of body tokens the header promises.
    fn token_count(&self, h: &ContainerHeader) -> Result<usize> {
        if let Some(g) = &h.geometry {
            return Ok(g.total_tokens());
        }
        if !h.modality.is_byte() {
            let b: [u8; 8] = h.prelude.as_slice().try_into().map_err(|_| Error::Header("bad token count".into()))?;
            return usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Header("token count overflows".into()));
        }
        if h.modality == Modality::Speech && !h.is_raw() {
            let fixed = h.prelude.len().checked_sub(4).ok_or_else(|| Error::Header("speech prelude too short".into()))?;
            return (h.original_len as usize)
                .checked_sub(fixed)
                .ok_or_else(|| Error::Header("speech prelude longer than the file".into()));
        }
        usize::try_from(h.original_len).map_err(|_| Error::Header("length overflows".into()))
    }

    pub fn decompress_container(&self, c: &Container) -> Result<Vec<u8>> {
        let h = &c.header;
        if h.model_hash != self.model_hash {
            return Err(Error::HashMismatch { what: "model" });
        }
        if h.vocab_hash != self.vocab.hash() {
            return Err(Error::HashMismatch { what: "vocabulary" });
        }
        let total = self.token_count(h)?;
        let chunk = h.modality.chunk_len();
        if c.chunks.len() != total.div_ceil(chunk) {
            return Err(Error::Header(format!("{} chunks for {total} tokens", c.chunks.len())));
        }
        let decoded: Vec<Vec<TokenId>> = c
            .chunks
            .par_iter()
            .enumerate()
            .map(|(i, p)| self.decode_chunk(h.modality, p, chunk.min(total - i * chunk)))
            .collect::<Result<_>>()?;
        let mut tokens = Vec::with_capacity(total + 1);
        tokens.push(h.modality.prefix());
        tokens.extend(decoded.into_iter().flatten());
        let payload_len = match (&h.geometry, h.modality, h.is_raw()) {
            (Some(g), _, _) => (g.height * g.width * g.channels) as u64,
            (None, Modality::Speech, false) => total as u64,
            _ => h.original_len,
        };
        let seq = TokenSequence { modality: h.modality, tokens, geometry: h.geometry, original_len: payload_len };
        let body = match decode(&seq, &self.vocab)? {
            Decoded::Bytes(b) => Body::Bytes(b),
            Decoded::Image(g) => Body::Image(g),
        };
        let out = reassemble(h.modality, &Ingested { body, prelude: h.prelude.clone(), raw: h.is_raw() })?;
        if out.len() as u64 != h.original_len {
            return Err(Error::Corruption(format!("rebuilt {} bytes, header says {}", out.len(), h.original_len)));
        }
        Ok(out)
    }

    pub fn decompress(&self, bytes: &[u8]) -> Result<Vec<u8>> {
        self.decompress_container(&Container::from_bytes(bytes)?)
    }
}
