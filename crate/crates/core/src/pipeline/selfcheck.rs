//! A quick built-in invariant suite: gradients, branch merging, coding
//! bounds and lossless roundtrips on small in-memory inputs.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codec::{export_checkpoint, Codec};
use crate::coder::{CodeAudit, QuantizedCdf, RangeEncoder};
use crate::corpus::synth;
use crate::model::{forward_infer, init_params, merge_reparam, InferModel, ModelConfig, ModelParams, TrainBatch};
use crate::numerics::{grad_check, Tensor2};
use crate::tokenizer::{default_reserved, train_bpe, Modality, TokenId, Vocabulary, BPE_BASE};
use crate::trainer::{loss_and_grads, TrainConfig};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub failures: Vec<String>,
}

impl SuiteResult {
    fn new(name: &'static str) -> Self {
        Self { name, passed: 0, total: 0, failures: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else {
            self.failures.push(what());
        }
    }

    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10} {}/{} {}", self.name, self.passed, self.total, if self.ok() { "ok" } else { "FAILED" })?;
        for m in &self.failures {
            write!(f, "\n  {m}")?;
        }
        Ok(())
    }
}

fn perturbed(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut p = init_params(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for (name, t) in p.names().into_iter().zip(p.leaves_mut()) {
        let s = if name.ends_with("router") { 0.5 } else { 0.1 };
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-s..s));
    }
    Ok(p)
}

fn grad_suite() -> Result<SuiteResult> {
    let mut r = SuiteResult::new("grad");
    let vocab = BPE_BASE + 24;
    let cfg = TrainConfig::default();
    for seed in 0..3 {
        let params = perturbed(&ModelConfig::with_dims(16, 1, 2, vocab), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut bytes = vec![Modality::Image.prefix()];
        bytes.extend((0..8).map(|_| rng.gen_range(0..256u32)));
        let mut text = vec![Modality::Database.prefix()];
        text.extend((0..8).map(|_| rng.gen_range(BPE_BASE as u32..vocab as u32)));
        let batch = TrainBatch::new(&[(Modality::Image, &bytes), (Modality::Database, &text)], vocab)?;
        let names = params.names();
        let flat: Vec<Tensor2> = params.leaves().into_iter().map(|(_, t)| t.clone()).collect();
        let report = grad_check(
            &names,
            &flat,
            |p| {
                let mut q = params.clone();
                for (dst, src) in q.leaves_mut().into_iter().zip(p) {
                    *dst = src.clone();
                }
                let (bd, grads) = loss_and_grads(&q, &batch, &cfg)?;
                let grads =
                    grads.into_iter().zip(p).map(|(g, t)| g.unwrap_or_else(|| Tensor2::zeros(t.rows(), t.cols())));
                Ok((bd.total, grads.collect()))
            },
            seed,
        )?;
        r.check(report.max_rel_err <= 1e-4, || format!("seed {seed}: {report:?}"));
    }
    Ok(r)
}

fn merge_suite() -> Result<SuiteResult> {
    let mut r = SuiteResult::new("merge");
    let p = perturbed(&ModelConfig::with_dims(16, 2, 2, BPE_BASE + 8), 7)?;
    let branched = InferModel::new(&p)?;
    let merged = InferModel::new(&merge_reparam(&p)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..20 {
        let toks: Vec<TokenId> = (0..24).map(|_| rng.gen_range(0..256)).collect();
        let a = forward_infer(&branched, Modality::Speech, &toks)?;
        let b = forward_infer(&merged, Modality::Speech, &toks)?;
        let diff = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        r.check(diff <= 1e-5, || format!("case {case}: max abs diff {diff:e}"));
    }
    Ok(r)
}

fn coder_suite() -> Result<SuiteResult> {
    let mut r = SuiteResult::new("coder");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..10 {
        let k = rng.gen_range(2..300);
        let freqs: Vec<u32> = (0..k).map(|_| rng.gen_range(1..500)).collect();
        let cdf = QuantizedCdf::from_freqs(&freqs)?;
        let n = rng.gen_range(1..4000);
        let mut enc = RangeEncoder::new();
        for _ in 0..n {
            enc.encode_symbol(&cdf, rng.gen_range(0..k))?;
        }
        let (_, audit): (_, CodeAudit) = enc.finish();
        r.check(audit.within_bound(), || format!("case {case}: {audit:?}"));
    }
    Ok(r)
}

fn roundtrip_suite() -> Result<SuiteResult> {
    let mut r = SuiteResult::new("roundtrip");
    let styles = synth::Styles::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let text = styles.text(&mut rng, 3000);
    let gene = styles.fasta(&mut rng, 2000);
    let sql = styles.sql_log(&mut rng, 2000);
    let bpe = train_bpe(&[&text[..], &gene[..], &sql[..]], 300, &default_reserved())?;
    let vocab = Vocabulary::new(bpe);
    let params = perturbed(&ModelConfig::with_dims(16, 1, 2, vocab.size()), 5)?;
    let codec = Codec::from_checkpoint_bytes(&export_checkpoint(&params, &vocab)?)?;
    let inputs: Vec<(Modality, Vec<u8>)> = vec![
        (Modality::Image, synth::ppm_file(&mut rng, 19, 7)),
        (Modality::Medical, synth::pgm_file(&mut rng, 17, 17)),
        (Modality::Tactile, synth::tfg_file(&mut rng, 5, 9)),
        (Modality::Text, text[..1500].to_vec()),
        (Modality::Gene, gene[..900].to_vec()),
        (Modality::Database, sql[..900].to_vec()),
        (Modality::Speech, synth::wav_file(&mut rng, 700)),
        (Modality::Text, Vec::new()),
        (Modality::Image, vec![0x50]),
    ];
    for (m, bytes) in inputs {
        let got = codec
            .compress(&bytes, m, false)
            .and_then(|c| c.container.to_bytes())
            .and_then(|packed| codec.decompress(&packed));
        match got {
            Ok(back) => r.check(back == bytes, || format!("{m}: {} bytes came back different", bytes.len())),
            Err(e) => r.check(false, || format!("{m}: {e}")),
        }
    }
    Ok(r)
}

/// Runs every suite; errors inside a suite abort only that suite.
pub fn selfcheck() -> Vec<SuiteResult> {
    let suites: [(&'static str, fn() -> Result<SuiteResult>); 4] =
        [("grad", grad_suite), ("merge", merge_suite), ("coder", coder_suite), ("roundtrip", roundtrip_suite)];
    suites
        .into_iter()
        .map(|(name, f)| {
            f().unwrap_or_else(|e| SuiteResult { name, passed: 0, total: 1, failures: vec![e.to_string()] })
        })
        .collect()
}
