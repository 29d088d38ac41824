use rand::Rng;

use crate::diffcore::{ModelRng, ParamId, ParamStore, Real};

/// Nearest codeword by squared distance; ties go to the lower index.
/// Returns `(index, squared distance)` per row of `z[n, d]`.
pub fn nearest_codes(z: &[Real], codebook: &[Real], d: usize) -> Vec<(usize, Real)> {
    assert!(d > 0 && !codebook.is_empty(), "empty codebook");
    z.chunks(d)
        .map(|zi| {
            let mut best = (0, Real::INFINITY);
            for (k, ck) in codebook.chunks(d).enumerate() {
                let s: Real = zi.iter().zip(ck).map(|(a, b)| (a - b) * (a - b)).sum();
                if s < best.1 {
                    best = (k, s);
                }
            }
            best
        })
        .collect()
}

/// Per-code assignment counts for one batch.
pub fn code_counts(codes: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &i in codes {
        c[i] += 1;
    }
    c
}

/// `exp` of the entropy of the code-usage distribution.
pub fn perplexity(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// Exponential moving average of code usage with dead-code replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookEma {
    pub decay: f64,
    pub threshold: f64,
    pub patience: usize,
    pub usage: Vec<f64>,
    /// Consecutive batches each code has spent below the threshold.
    pub dead_streak: Vec<usize>,
}

impl CodebookEma {
    /// Usage starts at 1, so a code that wins one stock per batch holds
    /// steady at the threshold and is never treated as dead.
    pub fn new(k: usize, decay: f64, threshold: f64, patience: usize) -> Self {
        CodebookEma {
            decay,
            threshold,
            patience,
            usage: vec![1.0; k],
            dead_streak: vec![0; k],
        }
    }

    /// Folds one batch of counts into the average and returns the codes whose
    /// streak reached the patience limit. Their streaks and usage are reset.
    pub fn observe(&mut self, counts: &[usize]) -> Vec<usize> {
        let mut dead = Vec::new();
        for (k, &c) in counts.iter().enumerate() {
            self.usage[k] = self.decay * self.usage[k] + (1.0 - self.decay) * c as f64;
            if self.usage[k] < self.threshold - 1e-9 {
                self.dead_streak[k] += 1;
            } else {
                self.dead_streak[k] = 0;
            }
            if self.dead_streak[k] >= self.patience {
                dead.push(k);
                self.dead_streak[k] = 0;
                self.usage[k] = self.threshold.max(1.0);
            }
        }
        dead
    }

    pub fn dead_fraction(&self) -> f64 {
        let n = self.usage.iter().filter(|&&u| u < self.threshold - 1e-9).count();
        n as f64 / self.usage.len() as f64
    }

    /// Updates usage from `codes` and overwrites each dead codeword with an
    /// encoder output drawn uniformly from `z[n, d]`. Returns the reset codes.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        codebook: ParamId,
        codes: &[usize],
        z: &[Real],
        rng: &mut ModelRng,
    ) -> Vec<usize> {
        let k = self.usage.len();
        let dead = self.observe(&code_counts(codes, k));
        if dead.is_empty() || codes.is_empty() {
            return dead;
        }
        let d = z.len() / codes.len();
        let cb = store.value_mut(codebook);
        for &c in &dead {
            let pick = rng.random_range(0..codes.len());
            cb.data_mut()[c * d..(c + 1) * d].copy_from_slice(&z[pick * d..(pick + 1) * d]);
        }
        dead
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::SeedableRng;

    #[test]
    fn exact_matches_and_ties() {
        let cb = [0.0, 0.0, 1.0, 1.0, 2.0, 0.0, 1.0, 1.0];
        let got = nearest_codes(&[1.0, 1.0, 1.0, 0.0], &cb, 2);
        assert_eq!(got[0], (1, 0.0));
        // (1,0) is equidistant from codes 0, 1 and 2
        assert_eq!(got[1].0, 0);
        let single = nearest_codes(&[5.0, -3.0, 0.1, 0.2], &[9.0, 9.0], 2);
        assert!(single.iter().all(|c| c.0 == 0));
    }

    #[test]
    fn decay_of_one_freezes_usage() {
        let mut ema = CodebookEma::new(3, 1.0, 1.0, 100);
        ema.usage = vec![0.5, 2.0, 7.0];
        ema.observe(&[10, 0, 3]);
        assert_eq!(ema.usage, vec![0.5, 2.0, 7.0]);
    }

    #[test]
    fn usage_follows_a_scalar_loop() {
        let batches: [[usize; 3]; 10] = [
            [3, 0, 1],
            [2, 2, 0],
            [0, 4, 0],
            [1, 1, 2],
            [5, 0, 0],
            [0, 0, 5],
            [2, 1, 2],
            [4, 1, 0],
            [0, 3, 2],
            [1, 1, 1],
        ];
        let mut ema = CodebookEma::new(3, 0.9, 1.0, 1000);
        for b in &batches {
            ema.observe(b);
        }
        for k in 0..3 {
            let mut u = 1.0;
            for b in &batches {
                u = 0.9 * u + 0.1 * b[k] as f64;
            }
            assert!((ema.usage[k] - u).abs() < 1e-12);
        }
    }

    #[test]
    fn dead_codes_are_reset_and_used_codes_never_are() {
        let mut store = ParamStore::new();
        let cb = store.add("cb", Tensor::matrix(3, 2, vec![0.0, 0.0, 5.0, 5.0, 9.0, 9.0]));
        let mut ema = CodebookEma::new(3, 0.99, 1.0, 100);
        let mut rng = ModelRng::seed_from_u64(0);
        let z = [0.1, 0.1, 4.9, 5.1, 0.2, 0.0];
        let mut resets = Vec::new();
        for _ in 0..150 {
            resets.extend(ema.update(&mut store, cb, &[0, 1, 0], &z, &mut rng));
        }
        assert_eq!(resets, vec![2]);
        let row = &store.value(cb).data()[4..6];
        assert!(z.chunks(2).any(|r| r == row));
        // code 1 is won by exactly one stock per batch
        assert_eq!(ema.dead_streak[1], 0);
    }

    #[test]
    fn perplexity_bounds() {
        assert!((perplexity(&[5, 0, 0]) - 1.0).abs() < 1e-12);
        assert!((perplexity(&[2, 2, 2, 2]) - 4.0).abs() < 1e-12);
    }
}
