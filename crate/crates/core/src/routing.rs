//! Mixture-of-experts routing: softmax gate scores, top-k selection with
//! renormalised weights, and the router z-loss and CV² balance terms.

use std::fmt::Write as _;
use std::ops::AddAssign;

use num_traits::Float;

use crate::numerics::{logsumexp, softmax, vec_mat_into, Tensor2};
use crate::tokenizer::Modality;
use crate::{Error, Result};

/// Gating projection `d x E`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<F = f64> {
    pub gate: Tensor2<F>,
}

impl<F: Copy + Default> RouterParams<F> {
    pub fn experts(&self) -> usize {
        self.gate.cols()
    }
}

/// Outcome of routing one token.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision<F = f64> {
    pub logits: Vec<F>,
    /// softmax of `logits`
    pub scores: Vec<F>,
    /// `k` expert indices, best first
    pub selected: Vec<usize>,
    /// scores of `selected` renormalised to sum to one
    pub weights: Vec<F>,
}

/// Indices of the `k` largest entries, best first; ties go to the lower
/// index.
pub fn top_k_indices<F: PartialOrd + Copy>(scores: &[F], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(scores.len()) {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if !(s > scores[b]) => {}
                _ => best = Some(i),
            }
        }
        let b = best.expect("k bounded by len");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Routes from precomputed gate logits.
pub fn route_logits<F: Float>(logits: Vec<F>, k: usize) -> Result<RoutingDecision<F>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!("top-k of {k} over {} experts", logits.len())));
    }
    let scores = softmax(&logits)?;
    let selected = top_k_indices(&scores, k);
    let mut sum = F::zero();
    for &e in &selected {
        sum = sum + scores[e];
    }
    let weights = selected.iter().map(|&e| scores[e] / sum).collect();
    Ok(RoutingDecision { logits, scores, selected, weights })
}

/// `logits = x · W_g`, then softmax, top-k and renormalisation.
pub fn route<F>(x: &[F], params: &RouterParams<F>, k: usize) -> Result<RoutingDecision<F>>
where
    F: Float + AddAssign + Default,
{
    if x.len() != params.gate.rows() {
        return Err(Error::Dimension(format!(
            "token of width {} against a {}x{} router",
            x.len(),
            params.gate.rows(),
            params.gate.cols()
        )));
    }
    let mut logits = vec![F::zero(); params.experts()];
    vec_mat_into(x, &params.gate, &mut logits);
    route_logits(logits, k)
}

/// `Σ_{e ∈ selected} ĝ_e · output_e`; `outputs` aligned with
/// `decision.selected`.
pub fn combine<F: Float>(decision: &RoutingDecision<F>, outputs: &[Vec<F>]) -> Result<Vec<F>> {
    if outputs.len() != decision.selected.len() || outputs.is_empty() {
        return Err(Error::Dimension(format!(
            "{} expert outputs for {} selected experts",
            outputs.len(),
            decision.selected.len()
        )));
    }
    let width = outputs[0].len();
    let mut out = vec![F::zero(); width];
    for (w, o) in decision.weights.iter().zip(outputs) {
        if o.len() != width {
            return Err(Error::Dimension("expert outputs differ in width".into()));
        }
        for (acc, &v) in out.iter_mut().zip(o) {
            *acc = *acc + *w * v;
        }
    }
    Ok(out)
}

/// Mean over routed tokens of `(log Σ_e exp(logit_e))²`.
pub fn z_loss<F: Float>(decisions: &[RoutingDecision<F>]) -> F {
    if decisions.is_empty() {
        return F::zero();
    }
    let mut total = F::zero();
    for d in decisions {
        let l = logsumexp(&d.logits);
        total = total + l * l;
    }
    total / F::from(decisions.len()).unwrap()
}

/// Per-expert importance (summed gate scores) and load (selection counts).
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceStats {
    pub importance: Vec<f64>,
    pub load: Vec<f64>,
}

impl BalanceStats {
    pub fn new(experts: usize) -> Self {
        Self { importance: vec![0.0; experts], load: vec![0.0; experts] }
    }

    pub fn record<F: Float>(&mut self, d: &RoutingDecision<F>) {
        for (acc, s) in self.importance.iter_mut().zip(&d.scores) {
            *acc += s.to_f64().unwrap();
        }
        for &e in &d.selected {
            self.load[e] += 1.0;
        }
    }

    pub fn tokens(&self) -> f64 {
        self.importance.iter().sum()
    }
}

/// Population variance over squared mean; 0 when the mean is 0.
pub fn cv2(v: &[f64]) -> f64 {
    crate::numerics::cv2_value(v)
}

/// `CV²(importance) + CV²(load)`
pub fn balance_loss(stats: &BalanceStats) -> f64 {
    cv2(&stats.importance) + cv2(&stats.load)
}

/// Which of the two routed modules in a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoutedModule {
    Context,
    Feedforward,
}

impl RoutedModule {
    pub fn name(self) -> &'static str {
        match self {
            RoutedModule::Context => "context",
            RoutedModule::Feedforward => "feedforward",
        }
    }
}

/// Expert selection counts per block, module and modality.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageTable {
    blocks: usize,
    experts: usize,
    counts: Vec<u64>,
}

impl UsageTable {
    pub fn new(blocks: usize, experts: usize) -> Self {
        Self { blocks, experts, counts: vec![0; blocks * 2 * Modality::ALL.len() * experts] }
    }

    fn slot(&self, block: usize, module: RoutedModule, modality: Modality, expert: usize) -> usize {
        ((block * 2 + module as usize) * Modality::ALL.len() + modality.tag() as usize) * self.experts + expert
    }

    pub fn record(&mut self, block: usize, module: RoutedModule, modality: Modality, selected: &[usize]) {
        for &e in selected {
            let s = self.slot(block, module, modality, e);
            self.counts[s] += 1;
        }
    }

    pub fn count(&self, block: usize, module: RoutedModule, modality: Modality, expert: usize) -> u64 {
        self.counts[self.slot(block, module, modality, expert)]
    }

    pub fn merge(&mut self, other: &UsageTable) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// CSV with columns `block,module,modality,expert,usage_percent`; rows
    /// with no routed tokens for a modality are skipped.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,module,modality,expert,usage_percent\n");
        for block in 0..self.blocks {
            for module in [RoutedModule::Context, RoutedModule::Feedforward] {
                for &m in Modality::ALL.iter() {
                    let total: u64 = (0..self.experts).map(|e| self.count(block, module, m, e)).sum();
                    if total == 0 {
                        continue;
                    }
                    for e in 0..self.experts {
                        let pct = 100.0 * self.count(block, module, m, e) as f64 / total as f64;
                        let _ = writeln!(out, "{block},{},{},{e},{pct:.4}", module.name(), m.name());
                    }
                }
            }
        }
        out
    }
}
