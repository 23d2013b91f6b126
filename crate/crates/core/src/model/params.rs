//! The parameter tree, generic over what sits at each leaf (weights,
//! gradients, optimizer moments, tape handles).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::numerics::checkpoint::Checkpoint;
use crate::numerics::{matmul, Tensor2};
use crate::{Error, Result};

/// `W0` plus an optional training branch `A·B`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamLinear<P> {
    pub w0: P,
    pub branch: Option<(P, P)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub mu_r: P,
    pub mu_k: P,
    pub mu_v: P,
    pub omega: P,
    pub w_r: ReparamLinear<P>,
    pub w_k: ReparamLinear<P>,
    pub w_v: Vec<ReparamLinear<P>>,
    pub time_router: P,
    pub w_o: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub ffn_router: P,
    pub ffn_w1: Vec<P>,
    pub ffn_w2: Vec<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor2<f64>> {
    pub config: ModelConfig,
    pub embed: P,
    pub blocks: Vec<BlockParams<P>>,
    pub head_ln_gain: P,
    pub head_ln_bias: P,
    pub head: P,
}

impl<P> ModelParams<P> {
    /// Maps every leaf, passing its canonical name.
    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        let lin = |name: &str, l: &ReparamLinear<P>, f: &mut dyn FnMut(&str, &P) -> Q| ReparamLinear {
            w0: f(&format!("{name}.w0"), &l.w0),
            branch: l.branch.as_ref().map(|(a, b)| (f(&format!("{name}.a"), a), f(&format!("{name}.b"), b))),
        };
        let embed = f("embed", &self.embed);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let p = format!("blocks.{i}");
                BlockParams {
                    ln1_gain: f(&format!("{p}.ln1.gain"), &b.ln1_gain),
                    ln1_bias: f(&format!("{p}.ln1.bias"), &b.ln1_bias),
                    mu_r: f(&format!("{p}.time.mu_r"), &b.mu_r),
                    mu_k: f(&format!("{p}.time.mu_k"), &b.mu_k),
                    mu_v: f(&format!("{p}.time.mu_v"), &b.mu_v),
                    omega: f(&format!("{p}.time.omega"), &b.omega),
                    w_r: lin(&format!("{p}.time.w_r"), &b.w_r, f),
                    w_k: lin(&format!("{p}.time.w_k"), &b.w_k, f),
                    w_v: b.w_v.iter().enumerate().map(|(e, l)| lin(&format!("{p}.time.w_v.{e}"), l, f)).collect(),
                    time_router: f(&format!("{p}.time.router"), &b.time_router),
                    w_o: f(&format!("{p}.time.w_o"), &b.w_o),
                    ln2_gain: f(&format!("{p}.ln2.gain"), &b.ln2_gain),
                    ln2_bias: f(&format!("{p}.ln2.bias"), &b.ln2_bias),
                    ffn_router: f(&format!("{p}.ffn.router"), &b.ffn_router),
                    ffn_w1: b.ffn_w1.iter().enumerate().map(|(e, w)| f(&format!("{p}.ffn.{e}.w1"), w)).collect(),
                    ffn_w2: b.ffn_w2.iter().enumerate().map(|(e, w)| f(&format!("{p}.ffn.{e}.w2"), w)).collect(),
                }
            })
            .collect();
        ModelParams {
            config: self.config.clone(),
            embed,
            blocks,
            head_ln_gain: f("head_ln.gain", &self.head_ln_gain),
            head_ln_bias: f("head_ln.bias", &self.head_ln_bias),
            head: f("head", &self.head),
        }
    }

    /// Leaves in canonical order.
    pub fn leaves(&self) -> Vec<(String, &P)> {
        let mut names = Vec::new();
        self.map(&mut |n, _| names.push(n.to_string()));
        let mut refs: Vec<&P> = Vec::with_capacity(names.len());
        self.collect_refs(&mut refs);
        names.into_iter().zip(refs).collect()
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a P>) {
        let lin = |l: &'a ReparamLinear<P>, out: &mut Vec<&'a P>| {
            out.push(&l.w0);
            if let Some((a, b)) = &l.branch {
                out.push(a);
                out.push(b);
            }
        };
        out.push(&self.embed);
        for b in &self.blocks {
            out.extend([&b.ln1_gain, &b.ln1_bias, &b.mu_r, &b.mu_k, &b.mu_v, &b.omega]);
            lin(&b.w_r, out);
            lin(&b.w_k, out);
            for l in &b.w_v {
                lin(l, out);
            }
            out.extend([&b.time_router, &b.w_o, &b.ln2_gain, &b.ln2_bias, &b.ffn_router]);
            out.extend(b.ffn_w1.iter());
            out.extend(b.ffn_w2.iter());
        }
        out.extend([&self.head_ln_gain, &self.head_ln_bias, &self.head]);
    }

    /// Mutable leaves in canonical order.
    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = Vec::new();
        fn lin<'a, P>(l: &'a mut ReparamLinear<P>, out: &mut Vec<&'a mut P>) {
            out.push(&mut l.w0);
            if let Some((a, b)) = &mut l.branch {
                out.push(a);
                out.push(b);
            }
        }
        out.push(&mut self.embed);
        for b in &mut self.blocks {
            out.extend([&mut b.ln1_gain, &mut b.ln1_bias, &mut b.mu_r, &mut b.mu_k, &mut b.mu_v, &mut b.omega]);
            lin(&mut b.w_r, &mut out);
            lin(&mut b.w_k, &mut out);
            for l in &mut b.w_v {
                lin(l, &mut out);
            }
            out.extend([&mut b.time_router, &mut b.w_o, &mut b.ln2_gain, &mut b.ln2_bias, &mut b.ffn_router]);
            out.extend(b.ffn_w1.iter_mut());
            out.extend(b.ffn_w2.iter_mut());
        }
        out.extend([&mut self.head_ln_gain, &mut self.head_ln_bias, &mut self.head]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn is_merged(&self) -> bool {
        self.blocks.iter().all(|b| b.w_r.branch.is_none() && b.w_k.branch.is_none() && b.w_v.iter().all(|l| l.branch.is_none()))
    }
}

impl<T: Copy + Default> ModelParams<Tensor2<T>> {
    pub fn param_count(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.len()).sum()
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor2::from_vec(rows, cols, data).expect("shape matches")
}

/// `ln(-ln 0.9)`: decay starts at 0.9 per step.
pub fn initial_omega() -> f64 {
    (-(0.9f64).ln()).ln()
}

/// Seeded initialization. Linear weights are `U(±1/√d_in)`, `A` is scaled by
/// `1/√r` and `B` is zero, token-shift mixes start at 0.5, decays at 0.9 and
/// routers at zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.embed_dim;
    let r = config.reparam_rank;
    let h = config.ffn_factor * d;
    let bound = |din: usize| 1.0 / (din as f64).sqrt();
    let lin = |rng: &mut ChaCha8Rng| ReparamLinear {
        w0: uniform(rng, d, d, bound(d)),
        branch: Some((uniform(rng, d, r, bound(d) / (r as f64).sqrt()), Tensor2::zeros(r, d))),
    };
    let blocks = (0..config.blocks)
        .map(|_| BlockParams {
            ln1_gain: Tensor2::filled(1, d, 1.0),
            ln1_bias: Tensor2::zeros(1, d),
            mu_r: Tensor2::filled(1, d, 0.5),
            mu_k: Tensor2::filled(1, d, 0.5),
            mu_v: Tensor2::filled(1, d, 0.5),
            omega: Tensor2::filled(1, d, initial_omega()),
            w_r: lin(&mut rng),
            w_k: lin(&mut rng),
            w_v: (0..config.experts).map(|_| lin(&mut rng)).collect(),
            time_router: Tensor2::zeros(d, config.experts),
            w_o: uniform(&mut rng, d, d, bound(d)),
            ln2_gain: Tensor2::filled(1, d, 1.0),
            ln2_bias: Tensor2::zeros(1, d),
            ffn_router: Tensor2::zeros(d, config.experts),
            ffn_w1: (0..config.experts).map(|_| uniform(&mut rng, d, h, bound(d))).collect(),
            ffn_w2: (0..config.experts).map(|_| uniform(&mut rng, h, d, bound(h))).collect(),
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        embed: uniform(&mut rng, config.vocab_size, d, 1.0),
        blocks,
        head_ln_gain: Tensor2::filled(1, d, 1.0),
        head_ln_bias: Tensor2::zeros(1, d),
        head: uniform(&mut rng, d, config.vocab_size, bound(d)),
    })
}

/// Folds every `A·B` branch into its main weight; a no-op when already merged.
pub fn merge_reparam(params: &ModelParams) -> Result<ModelParams> {
    let mut out = params.clone();
    for b in &mut out.blocks {
        for l in std::iter::once(&mut b.w_r).chain(std::iter::once(&mut b.w_k)).chain(b.w_v.iter_mut()) {
            if let Some((a, bb)) = l.branch.take() {
                let mut ab = matmul(&a, &bb)?;
                ab.add_assign(&l.w0);
                l.w0 = ab;
            }
        }
    }
    Ok(out)
}

/// Shapes every leaf must have under `config`, by canonical name.
fn expected_shape(config: &ModelConfig, name: &str) -> Option<(usize, usize)> {
    let d = config.embed_dim;
    let h = config.ffn_factor * d;
    let (e, r, v) = (config.experts, config.reparam_rank, config.vocab_size);
    let tail = name.rsplit('.').next()?;
    Some(match name {
        "embed" => (v, d),
        "head" => (d, v),
        _ if name.ends_with("gain") || name.ends_with("bias") || name.contains(".mu_") || tail == "omega" => (1, d),
        _ if name.ends_with("router") => (d, e),
        _ if tail == "w0" || tail == "w_o" => (d, d),
        _ if tail == "a" => (d, r),
        _ if tail == "b" => (r, d),
        _ if tail == "w1" => (d, h),
        _ if tail == "w2" => (h, d),
        _ => return None,
    })
}

impl ModelParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut config = self.config.to_map();
        config.insert("merged".into(), self.is_merged().to_string());
        Checkpoint {
            config,
            tensors: self.leaves().into_iter().map(|(n, t)| (n, t.to_f32())).collect(),
            blobs: Vec::new(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_map(&ckpt.config)?;
        let merged = ckpt.config.get("merged").map(|s| s == "true").unwrap_or(false);
        let mut skeleton = init_shape(&config, merged);
        let names = skeleton.names();
        if names.len() != ckpt.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, the configuration needs {}",
                ckpt.tensors.len(),
                names.len()
            )));
        }
        for ((name, slot), (cname, t)) in names.iter().zip(skeleton.leaves_mut()).zip(&ckpt.tensors) {
            if name != cname {
                return Err(Error::Config(format!("expected tensor `{name}`, found `{cname}`")));
            }
            if Some(t.shape()) != expected_shape(&config, name) {
                return Err(Error::Config(format!("tensor `{name}` has shape {:?}", t.shape())));
            }
            *slot = t.to_f64();
        }
        Ok(skeleton)
    }
}

fn init_shape(config: &ModelConfig, merged: bool) -> ModelParams {
    let z = || Tensor2::zeros(0, 0);
    let lin = || ReparamLinear { w0: z(), branch: if merged { None } else { Some((z(), z())) } };
    ModelParams {
        config: config.clone(),
        embed: z(),
        blocks: (0..config.blocks)
            .map(|_| BlockParams {
                ln1_gain: z(),
                ln1_bias: z(),
                mu_r: z(),
                mu_k: z(),
                mu_v: z(),
                omega: z(),
                w_r: lin(),
                w_k: lin(),
                w_v: (0..config.experts).map(|_| lin()).collect(),
                time_router: z(),
                w_o: z(),
                ln2_gain: z(),
                ln2_bias: z(),
                ffn_router: z(),
                ffn_w1: (0..config.experts).map(|_| z()).collect(),
                ffn_w2: (0..config.experts).map(|_| z()).collect(),
            })
            .collect(),
        head_ln_gain: z(),
        head_ln_bias: z(),
        head: z(),
    }
}
