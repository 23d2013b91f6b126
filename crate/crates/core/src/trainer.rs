//! Loss assembly, Adam, the cosine schedule, the modality-balanced sampler
//! and the three-stage training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{forward_terms, param_vars, LossTerms, ModelParams, TrainBatch};
use crate::numerics::{Tape, Tensor2, Var};
use crate::tokenizer::{Modality, TokenId, TokenSequence, Vocabulary, BPE_BASE};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Z-loss weight.
    pub lambda: f64,
    /// Balance weight.
    pub mu: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Epochs of the three stages.
    pub stage_epochs: [usize; 3],
    /// Optimizer steps per epoch.
    pub epoch_batches: usize,
    pub batch_size: usize,
    /// Tokens per training window, prefix excluded.
    pub seq_len: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    /// Held-out chunks per modality scored after each stage.
    pub valid_chunks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            mu: 0.01,
            lr_max: 1e-4,
            lr_min: 1e-5,
            stage_epochs: [2, 2, 20],
            epoch_batches: 100,
            batch_size: 14,
            seq_len: 1024,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            clip: None,
            valid_chunks: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            lr_max: 3e-3,
            lr_min: 3e-4,
            stage_epochs: [1, 1, 8],
            epoch_batches: 60,
            seq_len: 256,
            clip: Some(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad("learning rates must satisfy 0 <= lr_min <= lr_max, lr_max > 0");
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return bad("batch_size must be positive and seq_len at least 2");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.clip.is_some_and(|c| c <= 0.0) {
            return bad("clip must be positive");
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("lambda", self.lambda.to_string());
        put("mu", self.mu.to_string());
        put("lr_max", self.lr_max.to_string());
        put("lr_min", self.lr_min.to_string());
        put("stage1_epochs", self.stage_epochs[0].to_string());
        put("stage2_epochs", self.stage_epochs[1].to_string());
        put("stage3_epochs", self.stage_epochs[2].to_string());
        put("epoch_batches", self.epoch_batches.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seq_len", self.seq_len.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("eps", self.eps.to_string());
        put("clip", self.clip.map_or("none".into(), |c| c.to_string()));
        put("valid_chunks", self.valid_chunks.to_string());
        put("seed", self.seed.to_string());
        m
    }

    /// Overrides fields present in `map`; unknown keys are errors.
    pub fn apply_map(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{k}`")))
        }
        for (k, v) in map {
            match k.as_str() {
                "lambda" => self.lambda = num(k, v)?,
                "mu" => self.mu = num(k, v)?,
                "lr_max" => self.lr_max = num(k, v)?,
                "lr_min" => self.lr_min = num(k, v)?,
                "stage1_epochs" => self.stage_epochs[0] = num(k, v)?,
                "stage2_epochs" => self.stage_epochs[1] = num(k, v)?,
                "stage3_epochs" => self.stage_epochs[2] = num(k, v)?,
                "epoch_batches" => self.epoch_batches = num(k, v)?,
                "batch_size" => self.batch_size = num(k, v)?,
                "seq_len" => self.seq_len = num(k, v)?,
                "beta1" => self.beta1 = num(k, v)?,
                "beta2" => self.beta2 = num(k, v)?,
                "eps" => self.eps = num(k, v)?,
                "clip" => self.clip = if v.trim() == "none" { None } else { Some(num(k, v)?) },
                "valid_chunks" => self.valid_chunks = num(k, v)?,
                "seed" => self.seed = num(k, v)?,
                _ => return Err(Error::Config(format!("unknown training key `{k}`"))),
            }
        }
        self.validate()
    }
}

/// Loss parts of one batch. Cross-entropy is in bits per predicted token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub z_loss: f64,
    pub balance: f64,
    pub total: f64,
    /// Mean bits per token for each modality present in the batch.
    pub per_modality: BTreeMap<Modality, f64>,
}

impl LossBreakdown {
    pub fn compose(cross_entropy: f64, z_loss: f64, balance: f64, cfg: &TrainConfig) -> Self {
        Self {
            cross_entropy,
            z_loss,
            balance,
            total: cross_entropy + cfg.lambda * z_loss + cfg.mu * balance,
            per_modality: BTreeMap::new(),
        }
    }
}

/// Builds `CE + λ·z + μ·balance` on the tape.
///
/// CE is averaged over predicted positions, z over every routed token of
/// both modules in every block, and the balance term sums importance and
/// load CV² over all routed modules. Load comes from hard selections, so it
/// enters as a constant.
pub fn total_loss(
    tape: &mut Tape<'_>,
    terms: &LossTerms,
    modalities: &[Modality],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    if terms.rows == 0 || terms.routed_tokens == 0 {
        return Err(Error::Input("loss over an empty batch".into()));
    }
    let ce = tape.scale(terms.ce_sum, 1.0 / terms.rows as f64);
    let z = tape.scale(terms.z_sum, 1.0 / terms.routed_tokens as f64);
    let load = tape.constant(Tensor2::row_vector(vec![terms.load_cv2]));
    let balance = tape.add(terms.importance_cv2, load)?;
    let wz = tape.scale(z, cfg.lambda);
    let wb = tape.scale(balance, cfg.mu);
    let aux = tape.add(wz, wb)?;
    let total = tape.add(ce, aux)?;

    let mut bd = LossBreakdown::compose(tape.scalar(ce), tape.scalar(z), tape.scalar(balance), cfg);
    let mut sums: BTreeMap<Modality, (f64, usize)> = BTreeMap::new();
    for (&m, &bits) in modalities.iter().zip(&terms.row_bits) {
        let e = sums.entry(m).or_default();
        e.0 += bits;
        e.1 += 1;
    }
    bd.per_modality = sums.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect();
    Ok((total, bd))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Feedforward routers frozen.
    One,
    /// Contextual (value-projection) routers frozen.
    Two,
    /// Everything trains under the cosine schedule.
    Three,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::One, Stage::Two, Stage::Three];

    pub fn number(self) -> usize {
        self as usize + 1
    }
}

/// Which parameters a stage may update, aligned with
/// [`ModelParams::names`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn for_stage(names: &[String], stage: Stage) -> Self {
        let frozen = |n: &str| match stage {
            Stage::One => n.ends_with(".ffn.router"),
            Stage::Two => n.ends_with(".time.router"),
            Stage::Three => false,
        };
        Self { trainable: names.iter().map(|n| !frozen(n)).collect() }
    }

    pub fn all(n: usize) -> Self {
        Self { trainable: vec![true; n] }
    }

    pub fn frozen_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.trainable.iter().enumerate().filter(|(_, &t)| !t).map(|(i, _)| i)
    }
}

/// Adam moments with a step counter per tensor.
///
/// A tensor that receives no gradient in a step (an expert no token was
/// routed to) is skipped entirely, moments and counter included.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    steps: Vec<u64>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
            steps: vec![0; shapes.len()],
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let shapes: Vec<_> = params.leaves().iter().map(|(_, t)| t.shape()).collect();
        Self::new(&shapes)
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }
}

/// One bias-corrected Adam update of every trainable tensor.
pub fn adam_step(
    params: &mut [&mut Tensor2],
    names: &[String],
    grads: &[Option<Tensor2>],
    state: &mut AdamState,
    lr: f64,
    freeze: &FreezeMask,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if names.len() != n || grads.len() != n || state.m.len() != n || freeze.trainable.len() != n {
        return Err(Error::Dimension("optimizer inputs are not aligned".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.same_shape(params[i]) {
                return Err(Error::Dimension(format!("gradient of `{}` has shape {:?}", names[i], g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", names[i])));
            }
        }
    }
    let scale = match cfg.clip {
        Some(c) => {
            let norm = grads
                .iter()
                .zip(&freeze.trainable)
                .filter(|(_, &t)| t)
                .filter_map(|(g, _)| g.as_ref())
                .flat_map(|g| g.data())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for i in 0..n {
        let Some(g) = &grads[i] else { continue };
        if !freeze.trainable[i] {
            continue;
        }
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (p, &gj)) in params[i].data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj * scale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *p -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}

/// Training documents of one modality (bodies, no prefix).
#[derive(Clone, Debug)]
pub struct ModalityPool {
    pub modality: Modality,
    pub docs: Vec<Vec<TokenId>>,
}

struct PoolCursor {
    modality: Modality,
    /// (document, start) of every window-sized unit.
    units: Vec<(usize, usize)>,
    order: Vec<usize>,
    next: usize,
}

/// Round-robin sampler: every batch holds `batch_size / m` windows from each
/// of the `m` modalities.
///
/// Each modality cycles through a shuffled order of its window-sized units;
/// a window starts at a random offset inside its unit where the document
/// leaves room for it.
pub struct BalancedSampler {
    pools: Vec<ModalityPool>,
    cursors: Vec<PoolCursor>,
    per_modality: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(pools: Vec<ModalityPool>, batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if pools.is_empty() {
            return Err(Error::Config("no modality pools to sample from".into()));
        }
        if !batch_size.is_multiple_of(pools.len()) || batch_size == 0 {
            return Err(Error::Config(format!(
                "batch size {batch_size} is not a positive multiple of {} modalities",
                pools.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cursors = Vec::new();
        for p in &pools {
            let units: Vec<(usize, usize)> = p
                .docs
                .iter()
                .enumerate()
                .filter(|(_, d)| !d.is_empty())
                .flat_map(|(i, d)| (0..d.len()).step_by(seq_len).map(move |s| (i, s)))
                .collect();
            if units.is_empty() {
                return Err(Error::Config(format!("the {} pool is empty", p.modality)));
            }
            let mut order: Vec<usize> = (0..units.len()).collect();
            order.shuffle(&mut rng);
            cursors.push(PoolCursor { modality: p.modality, units, order, next: 0 });
        }
        Ok(Self { per_modality: batch_size / pools.len(), pools, cursors, seq_len, rng })
    }

    /// Units in one full cycle of each modality.
    pub fn cycle_lengths(&self) -> Vec<(Modality, usize)> {
        self.cursors.iter().map(|c| (c.modality, c.units.len())).collect()
    }

    /// Next batch of prefixed windows, grouped by modality in pool order.
    pub fn next_batch(&mut self) -> Vec<(Modality, Vec<TokenId>)> {
        let mut out = Vec::with_capacity(self.per_modality * self.pools.len());
        for (pool, cur) in self.pools.iter().zip(&mut self.cursors) {
            for _ in 0..self.per_modality {
                if cur.next == cur.order.len() {
                    cur.order.shuffle(&mut self.rng);
                    cur.next = 0;
                }
                let (d, unit) = cur.units[cur.order[cur.next]];
                cur.next += 1;
                let doc = &pool.docs[d];
                let room = doc.len().saturating_sub(self.seq_len);
                let start = if room > unit {
                    unit + self.rng.gen_range(0..self.seq_len.min(room - unit + 1))
                } else {
                    room
                };
                let end = (start + self.seq_len).min(doc.len());
                let mut w = Vec::with_capacity(end - start + 1);
                w.push(pool.modality.prefix());
                w.extend_from_slice(&doc[start..end]);
                out.push((pool.modality, w));
            }
        }
        out
    }
}

/// A held-out chunk scored exactly as it would be coded.
#[derive(Clone, Debug)]
pub struct ValidChunk {
    pub modality: Modality,
    /// Prefix first.
    pub tokens: Vec<TokenId>,
    /// Original bytes the chunk's tokens stand for.
    pub bytes: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub pools: Vec<ModalityPool>,
    pub valid: Vec<ValidChunk>,
}

impl TrainData {
    /// Splits every sequence into a training head and a held-out tail of
    /// about `holdout` of its chunks. Sequences with fewer than two chunks
    /// train in full. At most `valid_chunks` held-out chunks per modality
    /// are kept, spread evenly.
    pub fn from_sequences(seqs: &[TokenSequence], vocab: &Vocabulary, holdout: f64, valid_chunks: usize) -> Self {
        let mut pools: BTreeMap<Modality, Vec<Vec<TokenId>>> = BTreeMap::new();
        let mut valid: BTreeMap<Modality, Vec<ValidChunk>> = BTreeMap::new();
        for s in seqs {
            let m = s.modality;
            let body = s.body();
            let chunk = m.chunk_len();
            let chunks = body.len().div_ceil(chunk);
            let held = if chunks >= 2 { ((chunks as f64 * holdout).round() as usize).clamp(1, chunks - 1) } else { 0 };
            let split = (chunks - held) * chunk;
            let split = split.min(body.len());
            if split > 0 {
                pools.entry(m).or_default().push(body[..split].to_vec());
            }
            for c in body[split..].chunks(chunk) {
                let mut tokens = vec![m.prefix()];
                tokens.extend_from_slice(c);
                let bytes = token_bytes(m, c, vocab);
                valid.entry(m).or_default().push(ValidChunk { modality: m, tokens, bytes });
            }
        }
        let valid = valid
            .into_values()
            .flat_map(|v| {
                let n = v.len();
                let keep = valid_chunks.min(n);
                (0..keep).map(move |i| v[i * n / keep].clone()).collect::<Vec<_>>()
            })
            .collect();
        let pools = pools.into_iter().map(|(modality, docs)| ModalityPool { modality, docs }).collect();
        Self { pools, valid }
    }
}

fn token_bytes(m: Modality, tokens: &[TokenId], vocab: &Vocabulary) -> u64 {
    if m.is_byte() {
        tokens.len() as u64
    } else {
        tokens.iter().map(|&t| vocab.bpe().piece(t - BPE_BASE as TokenId).map_or(0, |p| p.len()) as u64).sum()
    }
}

/// Held-out totals per modality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Validation {
    /// (bits, tokens, bytes)
    pub totals: BTreeMap<Modality, (f64, u64, u64)>,
}

impl Validation {
    pub fn bits_per_byte(&self, m: Modality) -> Option<f64> {
        self.totals.get(&m).filter(|t| t.2 > 0).map(|t| t.0 / t.2 as f64)
    }

    pub fn bits_per_token(&self, m: Modality) -> Option<f64> {
        self.totals.get(&m).filter(|t| t.1 > 0).map(|t| t.0 / t.1 as f64)
    }

    /// Cross-entropy over every held-out token, bits per token.
    pub fn mean_bits_per_token(&self) -> f64 {
        let (b, t) = self.totals.values().fold((0.0, 0), |a, v| (a.0 + v.0, a.1 + v.1));
        if t == 0 {
            0.0
        } else {
            b / t as f64
        }
    }
}

/// Scores held-out chunks on the training graph, `batch` chunks per pass.
pub fn evaluate(params: &ModelParams, chunks: &[ValidChunk], batch: usize) -> Result<Validation> {
    let mut v = Validation::default();
    for group in chunks.chunks(batch.max(1)) {
        let seqs: Vec<(Modality, &[TokenId])> =
            group.iter().filter(|c| c.tokens.len() >= 2).map(|c| (c.modality, c.tokens.as_slice())).collect();
        if seqs.is_empty() {
            continue;
        }
        let tb = TrainBatch::new(&seqs, params.config.vocab_size)?;
        let mut tape = Tape::new();
        let vars = param_vars(&mut tape, params);
        let terms = forward_terms(&mut tape, &vars, &tb)?;
        for (&m, &bits) in tb.modalities().iter().zip(&terms.row_bits) {
            let e = v.totals.entry(m).or_default();
            e.0 += bits;
            e.1 += 1;
        }
        for c in group.iter().filter(|c| c.tokens.len() >= 2) {
            v.totals.entry(c.modality).or_default().2 += c.bytes;
        }
    }
    Ok(v)
}

/// Loss, gradients and breakdown of one batch without updating anything.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &TrainBatch,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Option<Tensor2>>)> {
    let mut tape = Tape::new();
    let vars = param_vars(&mut tape, params);
    let terms = forward_terms(&mut tape, &vars, batch)?;
    let (total, bd) = total_loss(&mut tape, &terms, batch.modalities(), cfg)?;
    if !bd.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut g = tape.backward(&[(total, Tensor2::row_vector(vec![1.0]))])?;
    let grads = vars.leaves().into_iter().map(|(_, &v)| g.take(v)).collect();
    Ok((bd, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    /// One metrics-log line.
    pub fn log_line(&self) -> String {
        format!(
            "step={} stage={} lr={:.3e} ce_bits={:.5} z={:.5} balance={:.5} total={:.5}",
            self.step,
            self.stage.number(),
            self.lr,
            self.loss.cross_entropy,
            self.loss.z_loss,
            self.loss.balance,
            self.loss.total
        )
    }
}

/// Hooks called by [`run_stages`]. Both default to doing nothing.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_stage_end(&mut self, _stage: Stage, _params: &ModelParams, _validation: &Validation) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Validation before training, then after each stage.
    pub validation: Vec<Validation>,
}

/// Three-stage training of `params` in place.
pub fn run_stages(
    params: &mut ModelParams,
    data: &TrainData,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    cfg.validate()?;
    let names = params.names();
    let mut report = TrainReport::default();
    let eval_batch = cfg.batch_size;
    report.validation.push(evaluate(params, &data.valid, eval_batch)?);
    if cfg.stage_epochs.iter().all(|&e| e == 0) {
        return Ok(report);
    }
    let mut sampler = BalancedSampler::new(data.pools.clone(), cfg.batch_size, cfg.seq_len, cfg.seed)?;
    let mut adam = AdamState::for_params(params);
    let mut step = 0;
    for (si, stage) in Stage::ALL.into_iter().enumerate() {
        let mask = FreezeMask::for_stage(&names, stage);
        let snapshot: Vec<(usize, Tensor2)> = {
            let leaves = params.leaves();
            mask.frozen_indices().map(|i| (i, leaves[i].1.clone())).collect()
        };
        let stage_steps = cfg.stage_epochs[si] * cfg.epoch_batches;
        for s in 0..stage_steps {
            let lr = match stage {
                Stage::Three => cosine_lr(s, stage_steps, cfg.lr_max, cfg.lr_min),
                _ => cfg.lr_max,
            };
            let windows = sampler.next_batch();
            let seqs: Vec<(Modality, &[TokenId])> = windows.iter().map(|(m, w)| (*m, w.as_slice())).collect();
            let batch = TrainBatch::new(&seqs, params.config.vocab_size)?;
            let (loss, grads) = loss_and_grads(params, &batch, cfg).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at stage {} step {s}", stage.number())),
                e => e,
            })?;
            adam_step(&mut params.leaves_mut(), &names, &grads, &mut adam, lr, &mask, cfg)?;
            {
                let leaves = params.leaves();
                for (i, t) in &snapshot {
                    if leaves[*i].1 != t {
                        return Err(Error::Verification(format!("frozen `{}` changed", names[*i])));
                    }
                }
            }
            let record = StepRecord { step, stage, lr, loss };
            observer.on_step(&record)?;
            report.steps.push(record);
            step += 1;
        }
        let v = evaluate(params, &data.valid, eval_batch)?;
        observer.on_stage_end(stage, params, &v)?;
        report.validation.push(v);
    }
    Ok(report)
}
