//! From fixture files to a trained checkpoint.

use std::collections::BTreeMap;

use crate::corpus::{ingest, Sample};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::numerics::checkpoint::parse_config;
use crate::tokenizer::{default_reserved, encode, train_bpe, TokenSequence, Vocabulary, BPE_BASE};
use crate::trainer::{run_stages, TrainConfig, TrainData, TrainObserver, TrainReport};
use crate::{Error, Result};

/// Everything that shapes a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// BPE model size including the byte pieces.
    pub bpe_size: usize,
    /// Share of every training file's chunks held out for validation.
    pub holdout: f64,
    /// Text-like bytes per file fed to BPE training.
    pub bpe_sample: usize,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl TrainPlan {
    /// d=64, N=2, H=4, 1024 BPE pieces and the single-core schedule.
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            blocks: 2,
            heads: 4,
            bpe_size: 1024,
            holdout: 0.1,
            bpe_sample: 1 << 20,
            init_seed: 1,
            train: TrainConfig::desk(),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let c = ModelConfig::with_dims(self.embed_dim, self.blocks, self.heads, vocab_size);
        c.validate()?;
        Ok(c)
    }

    /// Reads `key = value` lines over the desk defaults.
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut plan = Self::desk();
        let mut rest = BTreeMap::new();
        for (k, v) in parse_config(text)? {
            let num = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad value `{v}` for `{k}`")));
            match k.as_str() {
                "embed_dim" => plan.embed_dim = num(&v)?,
                "blocks" => plan.blocks = num(&v)?,
                "heads" => plan.heads = num(&v)?,
                "bpe_size" => plan.bpe_size = num(&v)?,
                "bpe_sample" => plan.bpe_sample = num(&v)?,
                "init_seed" => plan.init_seed = num(&v)? as u64,
                "holdout" => {
                    plan.holdout = v.trim().parse().map_err(|_| Error::Config(format!("bad holdout `{v}`")))?;
                }
                _ => {
                    rest.insert(k, v);
                }
            }
        }
        if !(0.0..1.0).contains(&plan.holdout) {
            return Err(Error::Config("holdout must lie in [0, 1)".into()));
        }
        plan.train.apply_map(&rest)?;
        plan.model_config(BPE_BASE + plan.bpe_size)?;
        Ok(plan)
    }
}

/// BPE over the text-like samples (at most `sample` bytes of each).
pub fn build_vocab(samples: &[Sample], bpe_size: usize, sample: usize) -> Result<Vocabulary> {
    let corpus: Vec<&[u8]> =
        samples.iter().filter(|s| !s.modality.is_byte()).map(|s| &s.bytes[..sample.min(s.bytes.len())]).collect();
    Ok(Vocabulary::new(train_bpe(&corpus, bpe_size, &default_reserved())?))
}

pub fn tokenize(samples: &[Sample], vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    samples
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| encode(ingest(&s.bytes, s.modality).body.as_raw(), s.modality, vocab))
        .collect()
}

pub struct Trained {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub report: TrainReport,
}

/// Vocabulary, tokenization, held-out split and the three training stages.
pub fn train_on_samples(samples: &[Sample], plan: &TrainPlan, observer: &mut dyn TrainObserver) -> Result<Trained> {
    let vocab = build_vocab(samples, plan.bpe_size, plan.bpe_sample)?;
    let seqs = tokenize(samples, &vocab)?;
    let data = TrainData::from_sequences(&seqs, &vocab, plan.holdout, plan.train.valid_chunks);
    let mut params = init_params(&plan.model_config(vocab.size())?, plan.init_seed)?;
    let report = run_stages(&mut params, &data, &plan.train, observer)?;
    Ok(Trained { params, vocab, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_overrides_defaults() {
        let p = TrainPlan::from_config_text("embed_dim = 32\nheads=2\nstage3_epochs=3\nlr_max=0.01\n").unwrap();
        assert_eq!((p.embed_dim, p.heads, p.blocks), (32, 2, 2));
        assert_eq!(p.train.stage_epochs, [1, 1, 3]);
        assert_eq!(p.train.lr_max, 0.01);
        assert!(TrainPlan::from_config_text("bogus=1\n").is_err());
        assert!(TrainPlan::from_config_text("heads=3\n").is_err());
    }
}
