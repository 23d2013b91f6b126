//! 32-bit streaming predictor used by the coder.
//!
//! Every dot product is reduced in index order, so identical weights and
//! histories give bit-identical distributions on both coder sides.

use std::ops::Range;

use super::params::{merge_reparam, ModelParams, ReparamLinear};
use super::ModelConfig;
use crate::numerics::checkpoint::Checkpoint;
use crate::numerics::ops::{layer_norm_into, relu_sq, softmax_in_place};
use crate::numerics::{vec_mat_cols_into, vec_mat_into, Tensor2};
use crate::routing::{route_logits, RoutedModule, RoutingDecision, UsageTable};
use crate::tokenizer::{mask_range, Modality, TokenId};
use crate::{Error, Result};

struct Linear {
    w0: Tensor2<f32>,
    branch: Option<(Tensor2<f32>, Tensor2<f32>)>,
}

impl Linear {
    fn new(l: &ReparamLinear<Tensor2>) -> Self {
        Self { w0: l.w0.to_f32(), branch: l.branch.as_ref().map(|(a, b)| (a.to_f32(), b.to_f32())) }
    }

    /// `x·W0`, plus `(x·A)·B` while unmerged.
    fn apply(&self, x: &[f32], out: &mut [f32], scratch: &mut Vec<f32>, scratch2: &mut Vec<f32>) {
        vec_mat_into(x, &self.w0, out);
        if let Some((a, b)) = &self.branch {
            scratch.resize(a.cols(), 0.0);
            vec_mat_into(x, a, scratch);
            scratch2.resize(b.cols(), 0.0);
            vec_mat_into(scratch, b, scratch2);
            for (o, &v) in out.iter_mut().zip(scratch2.iter()) {
                *o += v;
            }
        }
    }
}

struct Block {
    ln1_gain: Vec<f32>,
    ln1_bias: Vec<f32>,
    mu_r: Vec<f32>,
    mu_k: Vec<f32>,
    mu_v: Vec<f32>,
    decay: Vec<f32>,
    w_r: Linear,
    w_k: Linear,
    w_v: Vec<Linear>,
    time_router: Tensor2<f32>,
    w_o: Tensor2<f32>,
    ln2_gain: Vec<f32>,
    ln2_bias: Vec<f32>,
    ffn_router: Tensor2<f32>,
    ffn_w1: Vec<Tensor2<f32>>,
    ffn_w2: Vec<Tensor2<f32>>,
}

/// Inference weights in 32-bit.
pub struct InferModel {
    config: ModelConfig,
    embed: Tensor2<f32>,
    blocks: Vec<Block>,
    head_ln_gain: Vec<f32>,
    head_ln_bias: Vec<f32>,
    head: Tensor2<f32>,
}

fn row(t: &Tensor2) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

impl InferModel {
    /// Converts weights as they are; unmerged branches are evaluated
    /// explicitly.
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.config.validate()?;
        let blocks = params
            .blocks
            .iter()
            .map(|b| Block {
                ln1_gain: row(&b.ln1_gain),
                ln1_bias: row(&b.ln1_bias),
                mu_r: row(&b.mu_r),
                mu_k: row(&b.mu_k),
                mu_v: row(&b.mu_v),
                // decay computed in 64-bit, then rounded once
                decay: b.omega.data().iter().map(|&o| (-o.exp()).exp() as f32).collect(),
                w_r: Linear::new(&b.w_r),
                w_k: Linear::new(&b.w_k),
                w_v: b.w_v.iter().map(Linear::new).collect(),
                time_router: b.time_router.to_f32(),
                w_o: b.w_o.to_f32(),
                ln2_gain: row(&b.ln2_gain),
                ln2_bias: row(&b.ln2_bias),
                ffn_router: b.ffn_router.to_f32(),
                ffn_w1: b.ffn_w1.iter().map(|w| w.to_f32()).collect(),
                ffn_w2: b.ffn_w2.iter().map(|w| w.to_f32()).collect(),
            })
            .collect();
        Ok(Self {
            config: params.config.clone(),
            embed: params.embed.to_f32(),
            blocks,
            head_ln_gain: row(&params.head_ln_gain),
            head_ln_bias: row(&params.head_ln_bias),
            head: params.head.to_f32(),
        })
    }

    /// Loads a checkpoint and merges any reparameterization branches.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params = ModelParams::from_checkpoint(ckpt)?;
        Self::new(&merge_reparam(&params)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn context(&self, modality: Modality) -> StreamContext<'_> {
        StreamContext::new(self, modality)
    }
}

/// Recurrent state plus scratch buffers for one chunk.
pub struct StreamContext<'m> {
    model: &'m InferModel,
    modality: Modality,
    range: Range<usize>,
    prev: Vec<Vec<f32>>,
    state: Vec<Vec<f32>>,
    steps: usize,
    x: Vec<f32>,
    a: Vec<f32>,
    xr: Vec<f32>,
    xk: Vec<f32>,
    xv: Vec<f32>,
    r: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    tmp: Vec<f32>,
    y: Vec<f32>,
    s1: Vec<f32>,
    s2: Vec<f32>,
    hid: Vec<f32>,
    gate: Vec<f32>,
    logits: Vec<f32>,
    probs: Vec<f32>,
    decisions: Vec<RoutingDecision<f32>>,
    usage: Option<UsageTable>,
}

impl<'m> StreamContext<'m> {
    fn new(model: &'m InferModel, modality: Modality) -> Self {
        let c = &model.config;
        let d = c.embed_dim;
        let n = d / c.heads;
        let range = mask_range(modality, c.vocab_size);
        let z = |len: usize| vec![0.0f32; len];
        Self {
            model,
            modality,
            prev: (0..c.blocks).map(|_| z(d)).collect(),
            state: (0..c.blocks).map(|_| z(c.heads * n * n)).collect(),
            steps: 0,
            x: z(d),
            a: z(d),
            xr: z(d),
            xk: z(d),
            xv: z(d),
            r: z(d),
            k: z(d),
            v: z(d),
            tmp: z(d),
            y: z(d),
            s1: Vec::new(),
            s2: Vec::new(),
            hid: z(c.ffn_factor * d),
            gate: z(c.experts),
            logits: z(range.len()),
            probs: z(range.len()),
            range,
            decisions: Vec::new(),
            usage: None,
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Vocabulary ids covered by the returned distributions.
    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    /// Clears the recurrence for a new chunk.
    pub fn reset(&mut self) {
        self.prev.iter_mut().for_each(|p| p.fill(0.0));
        self.state.iter_mut().for_each(|s| s.fill(0.0));
        self.steps = 0;
    }

    /// Starts counting expert selections.
    pub fn track_usage(&mut self) {
        let c = &self.model.config;
        self.usage = Some(UsageTable::new(c.blocks, c.experts));
    }

    pub fn take_usage(&mut self) -> Option<UsageTable> {
        self.usage.take()
    }

    /// Routing of the last step: context then feedforward decision per block.
    pub fn last_decisions(&self) -> &[RoutingDecision<f32>] {
        &self.decisions
    }

    /// Logits of the last step over [`StreamContext::range`].
    pub fn last_logits(&self) -> &[f32] {
        &self.logits
    }

    /// Feeds `token` and returns the next-token distribution over the
    /// modality's mask range.
    pub fn predict_next(&mut self, token: TokenId) -> Result<&[f32]> {
        let model = self.model;
        let c = &model.config;
        if token as usize >= c.vocab_size {
            return Err(Error::Input(format!("token {token} outside a {}-id vocabulary", c.vocab_size)));
        }
        if self.steps >= c.context_len {
            return Err(Error::Input(format!("context of {} tokens exhausted; reset first", c.context_len)));
        }
        self.steps += 1;
        let d = c.embed_dim;
        let heads = c.heads;
        let n = d / heads;
        self.x.copy_from_slice(model.embed.row(token as usize));
        self.decisions.clear();
        for (bi, b) in model.blocks.iter().enumerate() {
            layer_norm_into(&self.x, &b.ln1_gain, &b.ln1_bias, &mut self.a);
            let prev = &mut self.prev[bi];
            for i in 0..d {
                let diff = self.a[i] - prev[i];
                self.xr[i] = prev[i] + b.mu_r[i] * diff;
                self.xk[i] = prev[i] + b.mu_k[i] * diff;
                self.xv[i] = prev[i] + b.mu_v[i] * diff;
            }
            prev.copy_from_slice(&self.a);
            b.w_r.apply(&self.xr, &mut self.r, &mut self.s1, &mut self.s2);
            b.w_k.apply(&self.xk, &mut self.k, &mut self.s1, &mut self.s2);

            vec_mat_into(&self.xv, &b.time_router, &mut self.gate);
            let dec = route_logits(self.gate.clone(), c.top_k)?;
            self.v.fill(0.0);
            for (&e, &w) in dec.selected.iter().zip(&dec.weights) {
                b.w_v[e].apply(&self.xv, &mut self.tmp, &mut self.s1, &mut self.s2);
                for (acc, &t) in self.v.iter_mut().zip(&self.tmp) {
                    *acc += w * t;
                }
            }
            if let Some(u) = &mut self.usage {
                u.record(bi, RoutedModule::Context, self.modality, &dec.selected);
            }
            self.decisions.push(dec);

            let state = &mut self.state[bi];
            self.y.fill(0.0);
            for h in 0..heads {
                let s = &mut state[h * n * n..(h + 1) * n * n];
                for i in 0..n {
                    let ch = h * n + i;
                    let (w, kv) = (b.decay[ch], self.k[ch]);
                    for (j, sv) in s[i * n..(i + 1) * n].iter_mut().enumerate() {
                        *sv = w * *sv + kv * self.v[h * n + j];
                    }
                }
                let y = &mut self.y[h * n..(h + 1) * n];
                for i in 0..n {
                    let rv = self.r[h * n + i];
                    for (yj, &sv) in y.iter_mut().zip(&s[i * n..(i + 1) * n]) {
                        *yj += rv * sv;
                    }
                }
            }
            vec_mat_into(&self.y, &b.w_o, &mut self.tmp);
            for (x, &o) in self.x.iter_mut().zip(&self.tmp) {
                *x += o;
            }

            layer_norm_into(&self.x, &b.ln2_gain, &b.ln2_bias, &mut self.a);
            vec_mat_into(&self.a, &b.ffn_router, &mut self.gate);
            let dec = route_logits(self.gate.clone(), c.top_k)?;
            self.v.fill(0.0);
            for (&e, &w) in dec.selected.iter().zip(&dec.weights) {
                vec_mat_into(&self.a, &b.ffn_w1[e], &mut self.hid);
                self.hid.iter_mut().for_each(|h| *h = relu_sq(*h));
                vec_mat_into(&self.hid, &b.ffn_w2[e], &mut self.tmp);
                for (acc, &t) in self.v.iter_mut().zip(&self.tmp) {
                    *acc += w * t;
                }
            }
            for (x, &f) in self.x.iter_mut().zip(&self.v) {
                *x += f;
            }
            if let Some(u) = &mut self.usage {
                u.record(bi, RoutedModule::Feedforward, self.modality, &dec.selected);
            }
            self.decisions.push(dec);
        }
        layer_norm_into(&self.x, &model.head_ln_gain, &model.head_ln_bias, &mut self.a);
        vec_mat_cols_into(&self.a, &model.head, self.range.start, &mut self.logits);
        self.probs.copy_from_slice(&self.logits);
        softmax_in_place(&mut self.probs);
        Ok(&self.probs)
    }

    /// Like [`StreamContext::predict_next`] but over the whole vocabulary,
    /// with exact zeros outside the mask.
    pub fn predict_next_full(&mut self, token: TokenId) -> Result<Vec<f32>> {
        let size = self.model.config.vocab_size;
        let start = self.range.start;
        let local = self.predict_next(token)?;
        let mut full = vec![0.0f32; size];
        full[start..start + local.len()].copy_from_slice(local);
        Ok(full)
    }
}

/// Replays `tokens` through a fresh context and collects the logits after
/// each one.
pub fn forward_infer(model: &InferModel, modality: Modality, tokens: &[TokenId]) -> Result<Vec<Vec<f32>>> {
    let mut ctx = model.context(modality);
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        ctx.predict_next(t)?;
        out.push(ctx.last_logits().to_vec());
    }
    Ok(out)
}
