use crate::stats::average_ranks;

/// Largest sample tested by exact enumeration of the null distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Pairs with a non-zero difference.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
}

/// Paired signed-rank test on `a - b`. Zero differences are dropped and
/// tied magnitudes receive average ranks. Small untied samples use the
/// exact null distribution; otherwise a normal approximation with tie and
/// continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> WilcoxonResult {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0 && v.is_finite()).collect();
    let n = d.len();
    if n == 0 {
        return WilcoxonResult {
            n,
            w_plus: 0.0,
            w_minus: 0.0,
            statistic: 0.0,
            p_value: 1.0,
            exact: true,
        };
    }
    let mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&mags);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }

    let exact = n <= EXACT_MAX_N && tie_term == 0.0;
    let p_value = if exact {
        (2.0 * lower_tail(n, statistic.round() as usize)).min(1.0)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            1.0
        } else {
            let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
            libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
        }
    };
    WilcoxonResult {
        n,
        w_plus,
        w_minus,
        statistic,
        p_value,
        exact,
    }
}

/// `P(W+ <= w)` under the null for `n` untied ranks, by counting subsets of
/// `{1..n}` per sum.
fn lower_tail(n: usize, w: usize) -> f64 {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let hits: f64 = counts[..=w.min(max)].iter().sum();
    hits / 2f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ModelRng;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identical_samples_give_p_one() {
        let a = [0.3, 0.1, 0.7];
        let r = wilcoxon_signed_rank(&a, &a);
        assert_eq!((r.n, r.p_value), (0, 1.0));
    }

    #[test]
    fn small_sample_matches_sign_enumeration() {
        let a = [1.83, 0.50, 1.62, 2.48, 1.68, 1.88, 1.55, 3.06];
        let b = [0.878, 0.647, 0.598, 2.05, 1.06, 1.29, 1.06, 3.14];
        let r = wilcoxon_signed_rank(&a, &b);
        assert!(r.exact);
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
        let mut rank = [0usize; 8];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r + 1;
        }
        let w_obs: usize = (0..8).filter(|&i| d[i] > 0.0).map(|i| rank[i]).sum();
        let stat = w_obs.min(36 - w_obs);
        let extreme = (0u32..256)
            .filter(|mask| {
                let w: usize = (0..8).filter(|k| mask >> k & 1 == 1).map(|k| k + 1).sum();
                w.min(36 - w) <= stat
            })
            .count();
        assert_eq!(r.statistic, stat as f64);
        assert!((r.p_value - extreme as f64 / 256.0).abs() < 1e-12);
        // negatives hold ranks 1 and 2, so W- = 3; sign sets summing to at
        // most 3 are {}, {1}, {2}, {3}, {1,2}
        assert_eq!(r.w_minus, 3.0);
        assert!((r.p_value - 10.0 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_sample_is_significant() {
        let mut rng = ModelRng::seed_from_u64(3);
        let b: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a: Vec<f64> = b
            .iter()
            .map(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v + 1.0 + 0.3 * e
            })
            .collect();
        let r = wilcoxon_signed_rank(&a, &b);
        assert!(!r.exact);
        assert!(r.p_value < 1e-3, "{}", r.p_value);
    }

    #[test]
    fn null_p_values_are_roughly_uniform() {
        let mut rng = ModelRng::seed_from_u64(9);
        let trials = 2000;
        let mut below = 0;
        for _ in 0..trials {
            let a: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
            if wilcoxon_signed_rank(&a, &b).p_value < 0.05 {
                below += 1;
            }
        }
        let rate = below as f64 / trials as f64;
        assert!((rate - 0.05).abs() < 0.015, "{rate}");
    }

    #[test]
    fn ties_use_the_corrected_normal() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0, 1.0, 2.0, 3.0, 4.0, 7.0];
        let r = wilcoxon_signed_rank(&a, &b);
        assert!(!r.exact);
        // five ties at rank 3, one difference of -1 also tied: all six at 3.5
        assert_eq!(r.w_minus, 3.5);
        assert!(r.p_value > 0.05 && r.p_value <= 1.0);
    }

    #[test]
    fn exact_tail_counts() {
        // n = 3: sums 0,1,2,3,3,4,5,6
        assert_eq!(lower_tail(3, 0), 1.0 / 8.0);
        assert_eq!(lower_tail(3, 3), 5.0 / 8.0);
        assert_eq!(lower_tail(3, 6), 1.0);
    }
}
