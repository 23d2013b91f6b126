//! Define-by-run reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every operation appends a node holding its output and whatever it needs
//! for the reverse sweep. Parameters enter as borrowed leaves so building a
//! graph never copies weights.

use std::borrow::Cow;
use std::f64::consts::LN_2;
use std::rc::Rc;

use super::tensor::{gemm, Tensor2};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    ShiftRows { x: Var, starts: Rc<[bool]> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor2, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    TopKRenorm(Var),
    GatherRows { x: Var, idx: Rc<[usize]> },
    ScatterRows { x: Var, idx: Rc<[usize]> },
    RoutedScale { y: Var, weights: Var, idx: Rc<[usize]>, expert: usize },
    ColSlice { x: Var, start: usize },
    Wkv(Box<WkvSaved>),
    ReluSq(Var),
    CrossEntropyBits { logits: Var, targets: Rc<[usize]>, probs: Tensor2, row_bits: Vec<f64> },
    LseSqSum { x: Var, lse: Vec<f64> },
    ColSum(Var),
    Cv2(Var),
}

struct WkvSaved {
    r: Var,
    k: Var,
    v: Var,
    omega: Var,
    heads: usize,
    starts: Rc<[bool]>,
    decay: Vec<f64>,
    states: Vec<f64>,
}

struct Node<'p> {
    value: Cow<'p, Tensor2>,
    op: Op,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2> {
        self.grads[v.0].take()
    }
}

fn dim_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

fn acc(grads: &mut [Option<Tensor2>], v: Var, shape: (usize, usize)) -> &mut Tensor2 {
    grads[v.0].get_or_insert_with(|| Tensor2::zeros(shape.0, shape.1))
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf referencing an existing tensor (typically a parameter).
    pub fn leaf(&mut self, t: &'p Tensor2) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// A leaf owning its value.
    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension(format!("cannot multiply {m}x{k} by {k2}x{n}")));
        }
        let mut out = Tensor2::zeros(m, n);
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, out.data_mut(), 0.0);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(dim_err(what, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor2::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(dim_err(what, vx.shape(), vr.shape()));
        }
        let mut out = vx.clone();
        let r = vr.data();
        for t in 0..out.rows() {
            for (o, &rv) in out.row_mut(t).iter_mut().zip(r) {
                *o = f(*o, rv);
            }
        }
        Ok(out)
    }

    /// `x + row`, broadcasting a `1 x d` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// `x ∘ row`, broadcasting a `1 x d` row over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor2::row_vector(vec![s]), Op::Sum(x))
    }

    /// Row `t` of the output is row `t - 1` of the input, or zero where a
    /// new segment starts.
    pub fn shift_rows(&mut self, x: Var, starts: &Rc<[bool]>) -> Result<Var> {
        let vx = self.value(x);
        if starts.len() != vx.rows() {
            return Err(Error::Dimension(format!("{} segment flags for {} rows", starts.len(), vx.rows())));
        }
        let mut out = Tensor2::zeros(vx.rows(), vx.cols());
        for t in 1..vx.rows() {
            if !starts[t] {
                out.row_mut(t).copy_from_slice(vx.row(t - 1));
            }
        }
        Ok(self.push(out, Op::ShiftRows { x, starts: starts.clone() }))
    }

    /// Row-wise layer norm with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(dim_err("layer_norm", vx.shape(), self.shape(gain)));
        }
        if d < 2 {
            return Err(Error::Domain("layer norm needs at least 2 columns".into()));
        }
        let mut xhat = Tensor2::zeros(vx.rows(), d);
        let mut inv_std = Vec::with_capacity(vx.rows());
        for t in 0..vx.rows() {
            let row = vx.row(t);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + super::ops::LN_EPS).sqrt();
            for (h, &v) in xhat.row_mut(t).iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for t in 0..out.rows() {
            for ((o, &gv), &bv) in out.row_mut(t).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for t in 0..out.rows() {
            super::ops::softmax_in_place(out.row_mut(t));
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Keeps the `k` largest entries of each row (ties toward the lower
    /// column) and renormalises them to sum to one; other entries become 0.
    pub fn topk_renorm(&mut self, g: Var, k: usize) -> Result<Var> {
        let vg = self.value(g);
        if k == 0 || k > vg.cols() {
            return Err(Error::Config(format!("top-k of {k} over {} experts", vg.cols())));
        }
        let mut out = Tensor2::zeros(vg.rows(), vg.cols());
        for t in 0..vg.rows() {
            let row = vg.row(t);
            let sel = crate::routing::top_k_indices(row, k);
            let s: f64 = sel.iter().map(|&e| row[e]).sum();
            for &e in &sel {
                out.set(t, e, row[e] / s);
            }
        }
        Ok(self.push(out, Op::TopKRenorm(g)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &Rc<[usize]>) -> Result<Var> {
        let vx = self.value(x);
        let mut out = Tensor2::zeros(idx.len(), vx.cols());
        for (r, &i) in idx.iter().enumerate() {
            if i >= vx.rows() {
                return Err(Error::Dimension(format!("gather row {i} of {}", vx.rows())));
            }
            out.row_mut(r).copy_from_slice(vx.row(i));
        }
        Ok(self.push(out, Op::GatherRows { x, idx: idx.clone() }))
    }

    /// Inverse of [`Tape::gather_rows`]: places row `r` of `x` at row
    /// `idx[r]` of a `rows`-row zero matrix. Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &Rc<[usize]>, rows: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rows() != idx.len() {
            return Err(Error::Dimension(format!("scatter {} rows with {} indices", vx.rows(), idx.len())));
        }
        let mut out = Tensor2::zeros(rows, vx.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vx.row(r));
        }
        Ok(self.push(out, Op::ScatterRows { x, idx: idx.clone() }))
    }

    /// Row `r` of `y` scaled by `weights[idx[r], expert]`.
    pub fn routed_scale(&mut self, y: Var, weights: Var, idx: &Rc<[usize]>, expert: usize) -> Result<Var> {
        let (vy, vw) = (self.value(y), self.value(weights));
        if vy.rows() != idx.len() || expert >= vw.cols() {
            return Err(dim_err("routed_scale", vy.shape(), vw.shape()));
        }
        let mut out = vy.clone();
        for (r, &i) in idx.iter().enumerate() {
            let w = vw.get(i, expert);
            out.row_mut(r).iter_mut().for_each(|v| *v *= w);
        }
        Ok(self.push(out, Op::RoutedScale { y, weights, idx: idx.clone(), expert }))
    }

    /// Columns `start..start + len`.
    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.cols() {
            return Err(Error::Dimension(format!("columns {start}..{} of {}", start + len, vx.cols())));
        }
        let mut out = Tensor2::zeros(vx.rows(), len);
        for t in 0..vx.rows() {
            out.row_mut(t).copy_from_slice(&vx.row(t)[start..start + len]);
        }
        Ok(self.push(out, Op::ColSlice { x, start }))
    }

    /// Multi-head decayed outer-product recurrence.
    ///
    /// Per head, with `w = exp(-exp(omega))` over the key channels:
    /// `S_t = diag(w) S_{t-1} + k_t ⊗ v_t` and `y_t = r_t · S_t`, with the
    /// state cleared wherever a segment starts.
    pub fn wkv(&mut self, r: Var, k: Var, v: Var, omega: Var, heads: usize, starts: &Rc<[bool]>) -> Result<Var> {
        let (t_len, d) = self.shape(r);
        if self.shape(k) != (t_len, d) || self.shape(v) != (t_len, d) {
            return Err(dim_err("wkv", self.shape(k), self.shape(v)));
        }
        if self.shape(omega) != (1, d) || heads == 0 || d % heads != 0 || starts.len() != t_len {
            return Err(dim_err("wkv decay", self.shape(omega), (heads, d)));
        }
        let n = d / heads;
        let decay: Vec<f64> = self.value(omega).data().iter().map(|&o| (-o.exp()).exp()).collect();
        let (vr, vk, vv) = (self.value(r).data(), self.value(k).data(), self.value(v).data());
        let block = d * n;
        let mut states = vec![0.0; t_len * block];
        let mut out = Tensor2::zeros(t_len, d);
        for t in 0..t_len {
            let (prev, cur) = states.split_at_mut(t * block);
            let cur = &mut cur[..block];
            if t > 0 && !starts[t] {
                cur.copy_from_slice(&prev[(t - 1) * block..]);
            }
            let row = t * d;
            for h in 0..heads {
                let s = &mut cur[h * n * n..(h + 1) * n * n];
                for i in 0..n {
                    let c = h * n + i;
                    let (w, kv) = (decay[c], vk[row + c]);
                    let srow = &mut s[i * n..(i + 1) * n];
                    for (j, sv) in srow.iter_mut().enumerate() {
                        *sv = w * *sv + kv * vv[row + h * n + j];
                    }
                }
                let y = &mut out.row_mut(t)[h * n..(h + 1) * n];
                for i in 0..n {
                    let rv = vr[row + h * n + i];
                    for (yj, &sv) in y.iter_mut().zip(&s[i * n..(i + 1) * n]) {
                        *yj += rv * sv;
                    }
                }
            }
        }
        let saved = WkvSaved { r, k, v, omega, heads, starts: starts.clone(), decay, states };
        Ok(self.push(out, Op::Wkv(Box::new(saved))))
    }

    pub fn relu_sq(&mut self, x: Var) -> Var {
        let out = self.value(x).map(super::ops::relu_sq);
        self.push(out, Op::ReluSq(x))
    }

    /// Summed cross-entropy in bits of `targets[t]` under `softmax(logits[t])`.
    pub fn cross_entropy_bits(&mut self, logits: Var, targets: &Rc<[usize]>) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rows() != targets.len() {
            return Err(Error::Dimension(format!("{} logit rows for {} targets", vl.rows(), targets.len())));
        }
        let mut probs = vl.clone();
        let mut row_bits = Vec::with_capacity(targets.len());
        for (t, &target) in targets.iter().enumerate() {
            if target >= vl.cols() {
                return Err(Error::Input(format!("target {target} outside {} classes", vl.cols())));
            }
            let lse = super::ops::logsumexp(vl.row(t));
            row_bits.push((lse - vl.get(t, target)) / LN_2);
            super::ops::softmax_in_place(probs.row_mut(t));
        }
        let total = row_bits.iter().sum::<f64>();
        Ok(self.push(
            Tensor2::row_vector(vec![total]),
            Op::CrossEntropyBits { logits, targets: targets.clone(), probs, row_bits },
        ))
    }

    /// Per-row bits recorded by a [`Tape::cross_entropy_bits`] node.
    pub fn row_bits(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].op {
            Op::CrossEntropyBits { row_bits, .. } => row_bits,
            _ => &[],
        }
    }

    /// `Σ_t (logsumexp(x_t))²`
    pub fn lse_sq_sum(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let lse: Vec<f64> = (0..vx.rows()).map(|t| super::ops::logsumexp(vx.row(t))).collect();
        let total = lse.iter().map(|l| l * l).sum::<f64>();
        self.push(Tensor2::row_vector(vec![total]), Op::LseSqSum { x, lse })
    }

    pub fn col_sum(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vec![0.0; vx.cols()];
        for t in 0..vx.rows() {
            for (o, &v) in out.iter_mut().zip(vx.row(t)) {
                *o += v;
            }
        }
        self.push(Tensor2::row_vector(out), Op::ColSum(x))
    }

    /// Squared coefficient of variation of all entries (population
    /// variance over squared mean, 0 when the mean is 0).
    pub fn cv2(&mut self, x: Var) -> Var {
        let v = cv2_value(self.value(x).data());
        self.push(Tensor2::row_vector(vec![v]), Op::Cv2(x))
    }

    /// Reverse sweep from the seeded outputs.
    pub fn backward(&self, seeds: &[(Var, Tensor2)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if !g.same_shape(self.value(*v)) {
                return Err(dim_err("seed", g.shape(), self.shape(*v)));
            }
            acc(&mut grads, *v, g.shape()).add_assign(g);
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<'p>, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA += dC·Bᵀ, dB += Aᵀ·dC
                gemm(m, n, k, g.data(), false, vb.data(), true, acc(grads, *a, (m, k)).data_mut(), 1.0);
                gemm(k, m, n, va.data(), true, g.data(), false, acc(grads, *b, (k, n)).data_mut(), 1.0);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.shape()).add_assign(g);
                acc(grads, *b, g.shape()).add_assign(g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.shape()).add_assign(g);
                let gb = acc(grads, *b, g.shape());
                for (o, &v) in gb.data_mut().iter_mut().zip(g.data()) {
                    *o -= v;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = acc(grads, *a, g.shape());
                for ((o, &gv), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *o += gv * bv;
                }
                let gb = acc(grads, *b, g.shape());
                for ((o, &gv), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    *o += gv * av;
                }
            }
            Op::AddRow(x, row) => {
                acc(grads, *x, g.shape()).add_assign(g);
                let gr = acc(grads, *row, (1, g.cols())).data_mut();
                for t in 0..g.rows() {
                    for (o, &v) in gr.iter_mut().zip(g.row(t)) {
                        *o += v;
                    }
                }
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (self.value(*x), self.value(*row));
                let gx = acc(grads, *x, g.shape());
                for t in 0..g.rows() {
                    for ((o, &gv), &rv) in gx.row_mut(t).iter_mut().zip(g.row(t)).zip(vr.data()) {
                        *o += gv * rv;
                    }
                }
                let gr = acc(grads, *row, (1, g.cols())).data_mut();
                for t in 0..g.rows() {
                    for ((o, &gv), &xv) in gr.iter_mut().zip(g.row(t)).zip(vx.row(t)) {
                        *o += gv * xv;
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = acc(grads, *x, g.shape());
                for (o, &v) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += c * v;
                }
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                let shape = self.shape(*x);
                acc(grads, *x, shape).data_mut().iter_mut().for_each(|o| *o += s);
            }
            Op::ShiftRows { x, starts } => {
                let gx = acc(grads, *x, g.shape());
                for t in 1..g.rows() {
                    if !starts[t] {
                        for (o, &v) in gx.row_mut(t - 1).iter_mut().zip(g.row(t)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = g.cols();
                let gv = self.value(*gain).data().to_vec();
                {
                    let gg = acc(grads, *gain, (1, d)).data_mut();
                    for t in 0..g.rows() {
                        for ((o, &gr), &h) in gg.iter_mut().zip(g.row(t)).zip(xhat.row(t)) {
                            *o += gr * h;
                        }
                    }
                }
                {
                    let gb = acc(grads, *bias, (1, d)).data_mut();
                    for t in 0..g.rows() {
                        for (o, &gr) in gb.iter_mut().zip(g.row(t)) {
                            *o += gr;
                        }
                    }
                }
                let gx = acc(grads, *x, g.shape());
                let mut dh = vec![0.0; d];
                for t in 0..g.rows() {
                    let h = xhat.row(t);
                    for j in 0..d {
                        dh[j] = g.get(t, j) * gv[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dhh = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (j, o) in gx.row_mut(t).iter_mut().enumerate() {
                        *o += inv_std[t] * (dh[j] - mean_dh - h[j] * mean_dhh);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let gx = acc(grads, *x, g.shape());
                for t in 0..g.rows() {
                    let y = out.row(t);
                    let dot: f64 = g.row(t).iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in gx.row_mut(t).iter_mut().zip(g.row(t)).zip(y) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::TopKRenorm(src) => {
                let vg = self.value(*src);
                let gx = acc(grads, *src, g.shape());
                for t in 0..g.rows() {
                    let o = out.row(t);
                    let mut s = 0.0;
                    let mut dot = 0.0;
                    for e in 0..o.len() {
                        if o[e] > 0.0 {
                            s += vg.get(t, e);
                            dot += g.get(t, e) * o[e];
                        }
                    }
                    for e in 0..o.len() {
                        if o[e] > 0.0 {
                            gx.row_mut(t)[e] += (g.get(t, e) - dot) / s;
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let shape = self.shape(*x);
                let gx = acc(grads, *x, shape);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::ScatterRows { x, idx } => {
                let gx = acc(grads, *x, (idx.len(), g.cols()));
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::RoutedScale { y, weights, idx, expert } => {
                let (vy, vw) = (self.value(*y), self.value(*weights));
                {
                    let gy = acc(grads, *y, g.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let w = vw.get(i, *expert);
                        for (o, &gv) in gy.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += gv * w;
                        }
                    }
                }
                let shape = vw.shape();
                let gw = acc(grads, *weights, shape);
                for (r, &i) in idx.iter().enumerate() {
                    let dot: f64 = g.row(r).iter().zip(vy.row(r)).map(|(a, b)| a * b).sum();
                    gw.row_mut(i)[*expert] += dot;
                }
            }
            Op::ColSlice { x, start } => {
                let shape = self.shape(*x);
                let gx = acc(grads, *x, shape);
                for t in 0..g.rows() {
                    for (o, &v) in gx.row_mut(t)[*start..*start + g.cols()].iter_mut().zip(g.row(t)) {
                        *o += v;
                    }
                }
            }
            Op::Wkv(saved) => self.backward_wkv(saved, g, grads),
            Op::ReluSq(x) => {
                let vx = self.value(*x);
                let gx = acc(grads, *x, g.shape());
                for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                    if xv > 0.0 {
                        *o += gv * 2.0 * xv;
                    }
                }
            }
            Op::CrossEntropyBits { logits, targets, probs, .. } => {
                let s = g.data()[0] / LN_2;
                let gx = acc(grads, *logits, probs.shape());
                for (t, &target) in targets.iter().enumerate() {
                    for (o, &p) in gx.row_mut(t).iter_mut().zip(probs.row(t)) {
                        *o += s * p;
                    }
                    gx.row_mut(t)[target] -= s;
                }
            }
            Op::LseSqSum { x, lse } => {
                let s = g.data()[0];
                let vx = self.value(*x);
                let gx = acc(grads, *x, vx.shape());
                let mut p = vec![0.0; vx.cols()];
                for t in 0..vx.rows() {
                    p.copy_from_slice(vx.row(t));
                    super::ops::softmax_in_place(&mut p);
                    for (o, &pv) in gx.row_mut(t).iter_mut().zip(&p) {
                        *o += s * 2.0 * lse[t] * pv;
                    }
                }
            }
            Op::ColSum(x) => {
                let shape = self.shape(*x);
                let gx = acc(grads, *x, shape);
                for t in 0..shape.0 {
                    for (o, &v) in gx.row_mut(t).iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::Cv2(x) => {
                let s = g.data()[0];
                let vx = self.value(*x);
                let n = vx.len() as f64;
                let mean = vx.data().iter().sum::<f64>() / n;
                if mean == 0.0 {
                    return;
                }
                let var = vx.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let gx = acc(grads, *x, vx.shape());
                for (o, &v) in gx.data_mut().iter_mut().zip(vx.data()) {
                    let d = 2.0 * (v - mean) / (n * mean * mean) - 2.0 * var / (n * mean * mean * mean);
                    *o += s * d;
                }
            }
        }
    }

    fn backward_wkv(&self, saved: &WkvSaved, gy: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let (t_len, d) = gy.shape();
        let n = d / saved.heads;
        let block = d * n;
        let (vr, vk, vv) =
            (self.value(saved.r).data(), self.value(saved.k).data(), self.value(saved.v).data());
        let mut dr = Tensor2::zeros(t_len, d);
        let mut dk = Tensor2::zeros(t_len, d);
        let mut dv = Tensor2::zeros(t_len, d);
        let mut dw = vec![0.0; d];
        let mut ds = vec![0.0; block];
        let zeros = vec![0.0; block];
        for t in (0..t_len).rev() {
            if t + 1 < t_len && saved.starts[t + 1] {
                ds.iter_mut().for_each(|x| *x = 0.0);
            }
            let cur = &saved.states[t * block..(t + 1) * block];
            let prev = if t == 0 || saved.starts[t] { &zeros[..] } else { &saved.states[(t - 1) * block..t * block] };
            let row = t * d;
            let g = gy.row(t);
            for h in 0..saved.heads {
                let off = h * n * n;
                for i in 0..n {
                    let c = h * n + i;
                    let rv = vr[row + c];
                    let kv = vk[row + c];
                    let srow = &cur[off + i * n..off + (i + 1) * n];
                    let prow = &prev[off + i * n..off + (i + 1) * n];
                    let dsrow = &mut ds[off + i * n..off + (i + 1) * n];
                    let mut acc_r = 0.0;
                    let mut acc_k = 0.0;
                    let mut acc_w = 0.0;
                    for j in 0..n {
                        let gj = g[h * n + j];
                        dsrow[j] += rv * gj;
                        acc_r += srow[j] * gj;
                        acc_k += dsrow[j] * vv[row + h * n + j];
                        acc_w += dsrow[j] * prow[j];
                        dv.data_mut()[row + h * n + j] += dsrow[j] * kv;
                    }
                    dr.data_mut()[row + c] += acc_r;
                    dk.data_mut()[row + c] += acc_k;
                    dw[c] += acc_w;
                    let w = saved.decay[c];
                    dsrow.iter_mut().for_each(|x| *x *= w);
                }
            }
        }
        acc(grads, saved.r, (t_len, d)).add_assign(&dr);
        acc(grads, saved.k, (t_len, d)).add_assign(&dk);
        acc(grads, saved.v, (t_len, d)).add_assign(&dv);
        let omega = self.value(saved.omega).data().to_vec();
        let go = acc(grads, saved.omega, (1, d)).data_mut();
        for c in 0..d {
            go[c] += dw[c] * saved.decay[c] * -omega[c].exp();
        }
    }
}

/// Population variance over squared mean; 0 when the mean is 0.
pub fn cv2_value(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.iter().all(|&x| x == v[0]) {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var / (mean * mean)
}
