use crate::{Error, Result};

/// Frequency precision in bits; every quantized table sums to `1 << PRECISION`.
pub const PRECISION: u32 = 16;

/// Integer cumulative-frequency table over a local alphabet `0..M`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Vec<u32>,
}

impl QuantizedCdf {
    /// Builds a table from explicit frequencies (all ≥ 1).
    pub fn from_freqs(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::Config("empty alphabet".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &f in freqs {
            if f == 0 {
                return Err(Error::Domain("zero frequency for a codable symbol".into()));
            }
            acc += f as u64;
            if acc > u32::MAX as u64 {
                return Err(Error::Domain("frequency total overflows".into()));
            }
            cum.push(acc as u32);
        }
        Ok(Self { cum })
    }

    /// Quantizes a distribution over the whole alphabet (every symbol in-mask).
    pub fn from_probs(probs: &[f32]) -> Result<Self> {
        let mut freqs = Vec::new();
        quantize_into(probs, PRECISION, &mut freqs)?;
        Self::from_freqs(&freqs)
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn total(&self) -> u32 {
        *self.cum.last().unwrap()
    }

    pub fn low(&self, s: usize) -> u32 {
        self.cum[s]
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// The symbol whose interval contains `target` (`target < total`).
    pub fn find(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// `-log2(freq / total)`
    pub fn cost_bits(&self, s: usize) -> f64 {
        (self.total() as f64).log2() - (self.freq(s) as f64).log2()
    }
}

/// A quantized table viewed over the full vocabulary through a mask.
#[derive(Clone, Debug)]
pub struct MaskedCdf {
    /// Vocabulary id of each local symbol, ascending.
    pub members: Vec<usize>,
    pub cdf: QuantizedCdf,
}

impl MaskedCdf {
    /// Frequency of a vocabulary id; zero outside the mask.
    pub fn freq_of(&self, id: usize) -> u32 {
        match self.members.binary_search(&id) {
            Ok(s) => self.cdf.freq(s),
            Err(_) => 0,
        }
    }
}

/// Quantizes a full-vocabulary distribution restricted to `mask`.
pub fn quantize_cdf(probs: &[f32], mask: &[bool], precision: u32) -> Result<MaskedCdf> {
    if probs.len() != mask.len() {
        return Err(Error::Dimension(format!("{} probabilities for a {}-entry mask", probs.len(), mask.len())));
    }
    let members: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let local: Vec<f32> = members.iter().map(|&i| probs[i]).collect();
    let mut freqs = Vec::new();
    quantize_into(&local, precision, &mut freqs)?;
    Ok(MaskedCdf { members, cdf: QuantizedCdf::from_freqs(&freqs)? })
}

/// `freq = max(1, round(p·(2^P − M)))`, then a largest-remainder fix-up so
/// the frequencies sum to exactly `2^P`.
///
/// Rounding happens once, in f64 from the f32 inputs; everything after is
/// integer arithmetic and a total order, so both coder sides agree.
pub fn quantize_into(probs: &[f32], precision: u32, freqs: &mut Vec<u32>) -> Result<()> {
    let m = probs.len();
    if !(1..=24).contains(&precision) {
        return Err(Error::Config(format!("precision {precision} out of range")));
    }
    let total = 1u64 << precision;
    if m == 0 || m as u64 > total {
        return Err(Error::Config(format!("alphabet of {m} symbols does not fit 2^{precision}")));
    }
    let budget = (total - m as u64) as f64;
    freqs.clear();
    let mut sum = 0i64;
    let mut exact = Vec::with_capacity(m);
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Domain(format!("invalid probability {p}")));
        }
        let x = p as f64 * budget;
        let f = (x.round() as u64).max(1) as u32;
        exact.push(x);
        freqs.push(f);
        sum += f as i64;
    }
    let mut deficit = total as i64 - sum;
    if deficit == 0 {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..m).collect();
    let rem = |s: usize| exact[s] - freqs[s] as f64;
    if deficit > 0 {
        // largest remainder first, then larger probability, then lower index
        order.sort_unstable_by(|&a, &b| {
            rem(b).total_cmp(&rem(a)).then(probs[b].total_cmp(&probs[a])).then(a.cmp(&b))
        });
        while deficit > 0 {
            let step = (deficit as usize).min(m);
            for &s in &order[..step] {
                freqs[s] += 1;
            }
            deficit -= step as i64;
        }
    } else {
        order.sort_unstable_by(|&a, &b| {
            rem(a).total_cmp(&rem(b)).then(probs[a].total_cmp(&probs[b])).then(a.cmp(&b))
        });
        while deficit < 0 {
            let mut progressed = false;
            for &s in &order {
                if deficit == 0 {
                    break;
                }
                if freqs[s] > 1 {
                    freqs[s] -= 1;
                    deficit += 1;
                    progressed = true;
                }
            }
            if !progressed {
                return Err(Error::Domain("cannot reach frequency total".into()));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_256_is_exact() {
        let c = QuantizedCdf::from_probs(&[1.0 / 256.0; 256]).unwrap();
        assert!((0..256).all(|s| c.freq(s) == 256));
        assert_eq!(c.total(), 65536);
    }

    #[test]
    fn one_hot_hits_the_floor() {
        let mut p = vec![0.0f32; 256];
        p[17] = 1.0;
        let c = QuantizedCdf::from_probs(&p).unwrap();
        assert_eq!(c.freq(17), 65536 - 255);
        assert!((0..256).filter(|&s| s != 17).all(|s| c.freq(s) == 1));
    }

    #[test]
    fn random_distributions_sum_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let m = rng.gen_range(1..2000);
            let mut p: Vec<f32> = (0..m).map(|_| rng.gen::<f32>().powi(rng.gen_range(1..8))).collect();
            let s: f32 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            let c = QuantizedCdf::from_probs(&p).unwrap();
            assert_eq!(c.total(), 65536);
            assert!((0..m).all(|s| c.freq(s) >= 1));
        }
    }

    #[test]
    fn masked_entries_get_zero() {
        let probs = [0.0, 0.5, 0.5, 0.0];
        let mask = [false, true, true, false];
        let c = quantize_cdf(&probs, &mask, 16).unwrap();
        assert_eq!(c.freq_of(0), 0);
        assert_eq!(c.freq_of(3), 0);
        assert_eq!(c.freq_of(1) + c.freq_of(2), 65536);
    }

    #[test]
    fn oversized_alphabet_is_config_error() {
        assert!(matches!(quantize_into(&[0.0; 300], 8, &mut Vec::new()), Err(Error::Config(_))));
    }

    #[test]
    fn find_inverts_intervals() {
        let c = QuantizedCdf::from_freqs(&[3, 1, 4]).unwrap();
        let got: Vec<usize> = (0..8).map(|t| c.find(t)).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 2, 2, 2, 2]);
    }
}
