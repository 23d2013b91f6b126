//! Vector primitives shared by the training graph and the streaming
//! predictor. All reductions run in index order.

use num_traits::Float;

use crate::{Error, Result};

/// Variance epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// Max-subtracted softmax.
pub fn softmax<F: Float>(logits: &[F]) -> Result<Vec<F>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax. Entries equal to `-inf` come out as exactly zero.
pub fn softmax_in_place<F: Float>(v: &mut [F]) {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = F::one() / sum;
    for x in v.iter_mut() {
        *x = *x * inv;
    }
}

/// `log Σ exp(v)`, stabilised by the maximum.
pub fn logsumexp<F: Float>(v: &[F]) -> F {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    let mut sum = F::zero();
    for &x in v {
        sum = sum + (x - max).exp();
    }
    max + sum.ln()
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` with population variance.
pub fn layer_norm<F: Float>(x: &[F], gain: &[F], bias: &[F]) -> Result<Vec<F>> {
    if x.len() < 2 {
        return Err(Error::Domain(format!("layer norm needs at least 2 values, got {}", x.len())));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Dimension(format!(
            "layer norm input {} vs gain {} / bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![F::zero(); x.len()];
    layer_norm_into(x, gain, bias, &mut out);
    Ok(out)
}

pub fn layer_norm_into<F: Float>(x: &[F], gain: &[F], bias: &[F], out: &mut [F]) {
    let n = F::from(x.len()).unwrap();
    let mut mean = F::zero();
    for &v in x {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = F::zero();
    for &v in x {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    let inv = F::one() / (var + F::from(LN_EPS).unwrap()).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
}

/// `max(x, 0)²`
pub fn relu_sq<F: Float>(x: F) -> F {
    if x > F::zero() {
        x * x
    } else {
        F::zero()
    }
}
