use std::collections::BTreeMap;

use crate::{Error, Result};

/// Shape of the predictor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Hidden width of each feedforward expert as a multiple of `embed_dim`.
    pub ffn_factor: usize,
    /// Inner width of the training-time `A·B` branches.
    pub reparam_rank: usize,
    pub vocab_size: usize,
    /// Tokens per chunk for streams (image patches use their own length).
    pub context_len: usize,
}

impl ModelConfig {
    /// Small default: d=64, two blocks, four heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self::with_dims(64, 2, 4, vocab_size)
    }

    pub fn with_dims(embed_dim: usize, blocks: usize, heads: usize, vocab_size: usize) -> Self {
        Self {
            embed_dim,
            blocks,
            heads,
            experts: 4,
            top_k: 2,
            ffn_factor: 2,
            reparam_rank: 4 * embed_dim,
            vocab_size,
            context_len: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if d < 2 || self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("embed dim {d} must split evenly into {} heads", self.heads)));
        }
        if self.top_k == 0 || self.experts < self.top_k || self.experts < 2 {
            return Err(Error::Config(format!("need 1 <= top_k <= experts and experts >= 2, got {}/{}", self.top_k, self.experts)));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context length must be at least 2".into()));
        }
        if self.ffn_factor == 0 || self.reparam_rank == 0 || self.blocks == 0 || self.vocab_size == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("embed_dim", self.embed_dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("ffn_factor", self.ffn_factor),
            ("reparam_rank", self.reparam_rank),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            map.get(k)
                .ok_or_else(|| Error::Config(format!("missing model setting `{k}`")))?
                .parse()
                .map_err(|_| Error::Config(format!("model setting `{k}` is not a count")))
        };
        let c = Self {
            embed_dim: get("embed_dim")?,
            blocks: get("blocks")?,
            heads: get("heads")?,
            experts: get("experts")?,
            top_k: get("top_k")?,
            ffn_factor: get("ffn_factor")?,
            reparam_rank: get("reparam_rank")?,
            vocab_size: get("vocab_size")?,
            context_len: get("context_len")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Per-block weights touched by one token in the routed model:
    /// shared R, K and output projections, `k` value experts, both routers and
    /// `k` feedforward experts.
    pub fn activated_block_params(&self) -> usize {
        let d = self.embed_dim;
        let h = self.ffn_factor * d;
        3 * d * d + self.top_k * d * d + 2 * d * self.experts + self.top_k * 2 * d * h
    }

    /// Per-block weights of the dense counterpart: one V layer and one MLP
    /// with a `4d` hidden layer.
    pub fn dense_block_params(&self) -> usize {
        let d = self.embed_dim;
        4 * d * d + 2 * d * 4 * d
    }

    /// Activated weights per token for the whole network (embedding row,
    /// blocks, output projection).
    pub fn activated_params(&self) -> usize {
        self.embed_dim + self.blocks * self.activated_block_params() + self.embed_dim * self.vocab_size
    }

    pub fn dense_params(&self) -> usize {
        self.embed_dim + self.blocks * self.dense_block_params() + self.embed_dim * self.vocab_size
    }
}
