use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor2;
use crate::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Coordinates probed per parameter tensor when it is larger than this.
pub const FD_SAMPLE: usize = 64;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_a - g_n| / max(1, |g_a|, |g_n|)` over every probed coordinate.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub coordinates: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `f` maps a full parameter list to `(loss, gradients)`, gradients aligned
/// with `params`. Tensors with more than [`FD_SAMPLE`] entries are probed on
/// a random subsample drawn from `seed`.
pub fn grad_check<F>(names: &[String], params: &[Tensor2], f: F, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor2]) -> Result<(f64, Vec<Tensor2>)>,
{
    if names.len() != params.len() {
        return Err(Error::Dimension(format!("{} names for {} parameters", names.len(), params.len())));
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!("{} gradients for {} parameters", analytic.len(), params.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), coordinates: 0 };
    for (p, grad) in analytic.iter().enumerate() {
        if !grad.same_shape(&params[p]) {
            return Err(Error::Dimension(format!("gradient of `{}` has the wrong shape", names[p])));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite(names[p].clone()));
        }
        let len = params[p].len();
        let coords: Vec<usize> =
            if len > FD_SAMPLE { sample(&mut rng, len, FD_SAMPLE).into_vec() } else { (0..len).collect() };
        for c in coords {
            let orig = work[p].data()[c];
            work[p].data_mut()[c] = orig + FD_STEP;
            let (plus, _) = f(&work)?;
            work[p].data_mut()[c] = orig - FD_STEP;
            let (minus, _) = f(&work)?;
            work[p].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[c];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if rel > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst_param = names[p].clone();
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use super::*;
    use crate::numerics::Tape;
    use rand::Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn half_squared_norm() {
        let x = Tensor2::from_vec(1, 5, vec![0.3, -1.2, 2.0, 0.0, 4.5]).unwrap();
        let report = grad_check(
            &names(1),
            &[x],
            |p| {
                let mut tape = Tape::new();
                let v = tape.leaf(&p[0]);
                let sq = tape.mul(v, v)?;
                let s = tape.sum(sq);
                let half = tape.scale(s, 0.5);
                let mut g = tape.backward(&[(half, Tensor2::row_vector(vec![1.0]))])?;
                Ok((tape.scalar(half), vec![g.take(v).unwrap()]))
            },
            1,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn one_layer_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = |r, c| {
            Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let emb = rand_t(10, 6);
        let w = rand_t(6, 10);
        let ids: Rc<[usize]> = vec![1, 4, 4, 9, 0, 3, 7, 2].into();
        let targets: Rc<[usize]> = vec![4, 4, 9, 0, 3, 7, 2, 5].into();
        let report = grad_check(
            &names(2),
            &[emb, w],
            |p| {
                let mut tape = Tape::new();
                let (e, w) = (tape.leaf(&p[0]), tape.leaf(&p[1]));
                let x = tape.gather_rows(e, &ids)?;
                let logits = tape.matmul(x, w)?;
                let ce = tape.cross_entropy_bits(logits, &targets)?;
                let mut g = tape.backward(&[(ce, Tensor2::row_vector(vec![1.0]))])?;
                Ok((tape.scalar(ce), vec![g.take(e).unwrap(), g.take(w).unwrap()]))
            },
            2,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // chains each op once so a wrong backward shows up in the report
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand_t = |r, c, lo: f64, hi: f64| {
            Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let t = 7;
        let d = 8;
        let params = vec![
            rand_t(t, d, -1.0, 1.0),   // x
            rand_t(1, d, 0.5, 1.5),    // gain
            rand_t(1, d, -0.2, 0.2),   // bias
            rand_t(1, d, 0.1, 0.9),    // mu
            rand_t(d, d, -0.5, 0.5),   // wr
            rand_t(d, d, -0.5, 0.5),   // wk
            rand_t(d, d, -0.5, 0.5),   // wv
            rand_t(1, d, -3.0, 0.5),   // omega
            rand_t(d, 4, -1.0, 1.0),   // router
            rand_t(d, 12, -0.5, 0.5),  // head
        ];
        let starts: Rc<[bool]> = vec![true, false, false, false, true, false, false].into();
        let targets: Rc<[usize]> = vec![0, 3, 1, 2, 4, 5, 0].into();
        let f = |p: &[Tensor2]| -> Result<(f64, Vec<Tensor2>)> {
            let mut tape = Tape::new();
            let v: Vec<_> = p.iter().map(|x| tape.leaf(x)).collect();
            let xa = tape.layer_norm(v[0], v[1], v[2])?;
            let xs = tape.shift_rows(xa, &starts)?;
            let diff = tape.sub(xa, xs)?;
            let m = tape.mul_row(diff, v[3])?;
            let xm = tape.add(xs, m)?;
            let r = tape.matmul(xm, v[4])?;
            let k = tape.matmul(xm, v[5])?;
            let logits = tape.matmul(xm, v[8])?;
            let g = tape.softmax_rows(logits);
            let gh = tape.topk_renorm(g, 2)?;
            let mut vsum = None;
            for e in 0..2 {
                let idx: Rc<[usize]> = (0..t).filter(|&i| tape.value(gh).get(i, e) > 0.0).collect::<Vec<_>>().into();
                if idx.is_empty() {
                    continue;
                }
                let xe = tape.gather_rows(xm, &idx)?;
                let ve = tape.matmul(xe, v[6])?;
                let ve = tape.relu_sq(ve);
                let vs = tape.routed_scale(ve, gh, &idx, e)?;
                let full = tape.scatter_rows(vs, &idx, t)?;
                vsum = Some(match vsum {
                    None => full,
                    Some(acc) => tape.add(acc, full)?,
                });
            }
            let vv = vsum.unwrap();
            let y = tape.wkv(r, k, vv, v[7], 2, &starts)?;
            let y = tape.add_row(y, v[2])?;
            let head = tape.col_slice(v[9], 2, 8)?;
            let out = tape.matmul(y, head)?;
            let ce = tape.cross_entropy_bits(out, &targets)?;
            let z = tape.lse_sq_sum(logits);
            let imp = tape.col_sum(g);
            let cv = tape.cv2(imp);
            let z = tape.scale(z, 0.1);
            let tot = tape.add(ce, z)?;
            let tot = tape.add(tot, cv)?;
            let mut grads = tape.backward(&[(tot, Tensor2::row_vector(vec![1.0]))])?;
            let gs = v.iter().zip(p).map(|(&var, x)| grads.take(var).unwrap_or_else(|| Tensor2::zeros(x.rows(), x.cols()))).collect();
            Ok((tape.scalar(tot), gs))
        };
        let report = grad_check(&names(params.len()), &params, f, 9).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let x = Tensor2::row_vector(vec![1.0]);
        let err = grad_check(&["bad".to_string()], &[x], |_| Ok((0.0, vec![Tensor2::row_vector(vec![f64::NAN])])), 0)
            .unwrap_err();
        assert!(err.to_string().contains("bad"));
    }
}
