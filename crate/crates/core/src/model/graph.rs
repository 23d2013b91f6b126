//! Differentiable batch forward pass on the tape (64-bit).
//!
//! All sequences of a batch are stacked into one `T x d` matrix; segment
//! start flags stop token shift and the recurrent state from leaking between
//! sequences. Experts run only on the rows routed to them.

use std::rc::Rc;

use super::params::{ModelParams, ReparamLinear};
use crate::numerics::{Tape, Tensor2, Var};
use crate::routing::{cv2, top_k_indices};
use crate::tokenizer::{mask_range, Modality, TokenId};
use crate::{Error, Result};

/// Sequences stacked for one training step.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    inputs: Rc<[usize]>,
    starts: Rc<[bool]>,
    targets: Vec<usize>,
    modalities: Vec<Modality>,
}

impl TrainBatch {
    /// Each sequence is a modality-prefixed token list; every position
    /// except the last predicts its successor.
    pub fn new(seqs: &[(Modality, &[TokenId])], vocab_size: usize) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut starts = Vec::new();
        let mut targets = Vec::new();
        let mut modalities = Vec::new();
        for &(m, toks) in seqs {
            if toks.len() < 2 {
                continue;
            }
            if toks[0] != m.prefix() {
                return Err(Error::Input(format!("{m} sequence does not start with its prefix")));
            }
            let range = mask_range(m, vocab_size);
            for (i, w) in toks.windows(2).enumerate() {
                if !range.contains(&(w[1] as usize)) {
                    return Err(Error::Input(format!("token {} is outside the {m} mask", w[1])));
                }
                inputs.push(w[0] as usize);
                starts.push(i == 0);
                targets.push(w[1] as usize);
                modalities.push(m);
            }
        }
        if inputs.is_empty() {
            return Err(Error::Input("batch has no predictable positions".into()));
        }
        Ok(Self { inputs: inputs.into(), starts: starts.into(), targets, modalities })
    }

    pub fn rows(&self) -> usize {
        self.inputs.len()
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }
}

/// Raw loss ingredients produced by one forward pass.
pub struct LossTerms {
    /// Summed cross-entropy in bits over all rows.
    pub ce_sum: Var,
    /// Summed squared router logsumexp over every routed token of both
    /// modules in every block.
    pub z_sum: Var,
    pub routed_tokens: usize,
    /// Summed CV² of expert importance over every routed module.
    pub importance_cv2: Var,
    /// Summed CV² of hard expert load (no gradient).
    pub load_cv2: f64,
    pub row_bits: Vec<f64>,
    pub rows: usize,
    /// Per mask group: the rows it covers, its id range and its logits.
    pub groups: Vec<(Rc<[usize]>, std::ops::Range<usize>, Var)>,
}

/// Puts every parameter on the tape as a borrowed leaf.
pub fn param_vars<'p>(tape: &mut Tape<'p>, params: &'p ModelParams) -> ModelParams<Var> {
    let vars: Vec<Var> = params.leaves().into_iter().map(|(_, t)| tape.leaf(t)).collect();
    let mut i = 0;
    params.map(&mut |_, _| {
        i += 1;
        vars[i - 1]
    })
}

fn linear(tape: &mut Tape<'_>, x: Var, l: &ReparamLinear<Var>) -> Result<Var> {
    let w = match l.branch {
        Some((a, b)) => {
            let ab = tape.matmul(a, b)?;
            tape.add(l.w0, ab)?
        }
        None => l.w0,
    };
    tape.matmul(x, w)
}

struct Routed {
    logits: Var,
    scores: Var,
    weights: Var,
    members: Vec<Rc<[usize]>>,
    load: Vec<f64>,
}

fn route_rows(tape: &mut Tape<'_>, x: Var, router: Var, k: usize) -> Result<Routed> {
    let logits = tape.matmul(x, router)?;
    let scores = tape.softmax_rows(logits);
    let weights = tape.topk_renorm(scores, k)?;
    let g = tape.value(scores);
    let e = g.cols();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); e];
    for t in 0..g.rows() {
        for s in top_k_indices(g.row(t), k) {
            members[s].push(t);
        }
    }
    let load = members.iter().map(|m| m.len() as f64).collect();
    Ok(Routed { logits, scores, weights, members: members.into_iter().map(Rc::from).collect(), load })
}

/// Σ_e scatter(ĝ_e · expert_e(x[rows_e]))
fn mix_experts<F>(tape: &mut Tape<'_>, x: Var, routed: &Routed, rows: usize, mut expert: F) -> Result<Var>
where
    F: FnMut(&mut Tape<'_>, usize, Var) -> Result<Var>,
{
    let mut acc: Option<Var> = None;
    for (e, idx) in routed.members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, idx)?;
        let ye = expert(tape, e, xe)?;
        let ys = tape.routed_scale(ye, routed.weights, idx, e)?;
        let full = tape.scatter_rows(ys, idx, rows)?;
        acc = Some(match acc {
            None => full,
            Some(a) => tape.add(a, full)?,
        });
    }
    acc.ok_or_else(|| Error::Input("no rows were routed".into()))
}

/// Forward pass producing the loss ingredients for `batch`.
pub fn forward_terms(tape: &mut Tape<'_>, p: &ModelParams<Var>, batch: &TrainBatch) -> Result<LossTerms> {
    let cfg = &p.config;
    let t_rows = batch.rows();
    let k = cfg.top_k;
    let mut x = tape.gather_rows(p.embed, &batch.inputs)?;
    let mut z_terms = Vec::new();
    let mut imp_terms = Vec::new();
    let mut load_cv2 = 0.0;
    for b in &p.blocks {
        let a = tape.layer_norm(x, b.ln1_gain, b.ln1_bias)?;
        let prev = tape.shift_rows(a, &batch.starts)?;
        let diff = tape.sub(a, prev)?;
        let xr = token_mix(tape, prev, diff, b.mu_r)?;
        let xk = token_mix(tape, prev, diff, b.mu_k)?;
        let xv = token_mix(tape, prev, diff, b.mu_v)?;
        let r = linear(tape, xr, &b.w_r)?;
        let key = linear(tape, xk, &b.w_k)?;
        let routed = route_rows(tape, xv, b.time_router, k)?;
        let v = mix_experts(tape, xv, &routed, t_rows, |tape, e, xe| linear(tape, xe, &b.w_v[e]))?;
        let y = tape.wkv(r, key, v, b.omega, cfg.heads, &batch.starts)?;
        let o = tape.matmul(y, b.w_o)?;
        x = tape.add(x, o)?;
        record_aux(tape, &routed, &mut z_terms, &mut imp_terms, &mut load_cv2);

        let h = tape.layer_norm(x, b.ln2_gain, b.ln2_bias)?;
        let routed = route_rows(tape, h, b.ffn_router, k)?;
        let f = mix_experts(tape, h, &routed, t_rows, |tape, e, xe| {
            let u = tape.matmul(xe, b.ffn_w1[e])?;
            let u = tape.relu_sq(u);
            tape.matmul(u, b.ffn_w2[e])
        })?;
        x = tape.add(x, f)?;
        record_aux(tape, &routed, &mut z_terms, &mut imp_terms, &mut load_cv2);
    }
    let hn = tape.layer_norm(x, p.head_ln_gain, p.head_ln_bias)?;

    let mut groups = Vec::new();
    let mut ce_terms = Vec::new();
    let mut row_bits = vec![0.0; t_rows];
    for byte_group in [true, false] {
        let rows: Vec<usize> = (0..t_rows).filter(|&t| batch.modalities[t].is_byte() == byte_group).collect();
        if rows.is_empty() {
            continue;
        }
        let range = mask_range(batch.modalities[rows[0]], cfg.vocab_size);
        let rows: Rc<[usize]> = rows.into();
        let hg = tape.gather_rows(hn, &rows)?;
        let w = tape.col_slice(p.head, range.start, range.len())?;
        let logits = tape.matmul(hg, w)?;
        let targets: Rc<[usize]> = rows.iter().map(|&t| batch.targets[t] - range.start).collect::<Vec<_>>().into();
        let ce = tape.cross_entropy_bits(logits, &targets)?;
        for (&t, &bits) in rows.iter().zip(tape.row_bits(ce)) {
            row_bits[t] = bits;
        }
        ce_terms.push(ce);
        groups.push((rows, range, logits));
    }
    let ce_sum = sum_vars(tape, &ce_terms)?;
    let z_sum = sum_vars(tape, &z_terms)?;
    let importance_cv2 = sum_vars(tape, &imp_terms)?;
    Ok(LossTerms {
        ce_sum,
        z_sum,
        routed_tokens: t_rows * z_terms.len(),
        importance_cv2,
        load_cv2,
        row_bits,
        rows: t_rows,
        groups,
    })
}

/// `prev + μ ∘ (x - prev)`
fn token_mix(tape: &mut Tape<'_>, prev: Var, diff: Var, mu: Var) -> Result<Var> {
    let m = tape.mul_row(diff, mu)?;
    tape.add(prev, m)
}

fn record_aux(tape: &mut Tape<'_>, routed: &Routed, z: &mut Vec<Var>, imp: &mut Vec<Var>, load_cv2: &mut f64) {
    z.push(tape.lse_sq_sum(routed.logits));
    let importance = tape.col_sum(routed.scores);
    imp.push(tape.cv2(importance));
    *load_cv2 += cv2(&routed.load);
}

fn sum_vars(tape: &mut Tape<'_>, vars: &[Var]) -> Result<Var> {
    let mut acc = match vars.first() {
        Some(&v) => v,
        None => return Ok(tape.constant(Tensor2::row_vector(vec![0.0]))),
    };
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Masked next-token logits for every position of one sequence, computed on
/// the training graph. Row `t` is the distribution over the modality's mask
/// range after reading `tokens[..=t]`.
pub fn forward_train(params: &ModelParams, modality: Modality, tokens: &[TokenId]) -> Result<Tensor2> {
    // a dummy successor lets the final position be evaluated too
    let range = mask_range(modality, params.config.vocab_size);
    let mut ext = tokens.to_vec();
    ext.push(range.start as TokenId);
    let batch = TrainBatch::new(&[(modality, &ext)], params.config.vocab_size)?;
    let mut tape = Tape::new();
    let vars = param_vars(&mut tape, params);
    let terms = forward_terms(&mut tape, &vars, &batch)?;
    let (_, _, logits) = &terms.groups[0];
    Ok(tape.value(*logits).clone())
}
