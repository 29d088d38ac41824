use super::{
    chronological_split, cs_rank_norm, forward_returns, raw_priors, robust_zscore_features, NormalizationStats,
    PanelDataset, SplitSpec, Splits, AUX_HORIZONS, MAIN_HORIZON, PRIOR_WINDOW,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareConfig {
    pub lookback: usize,
    pub prior_window: usize,
    pub split: SplitSpec,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            lookback: 20,
            prior_window: PRIOR_WINDOW,
            split: SplitSpec::Fractions { train: 0.6, valid: 0.2 },
        }
    }
}

/// A normalised panel with targets, priors and splits, ready to be cut
/// into per-date model batches.
#[derive(Clone, Debug)]
pub struct PreparedPanel {
    pub panel: PanelDataset,
    pub lookback: usize,
    pub splits: Splits,
    pub stats: NormalizationStats,
    /// Robust z-scored features `[D, N, C]`.
    pub features: Vec<f64>,
    /// Raw forward returns `[D, N, H]` for horizons `1..=H`.
    pub targets: Vec<f64>,
    /// Standardised priors `[D, P]`; NaN before the first full window.
    pub priors: Vec<f64>,
}

/// One date's cross-section. `x` is `[n, T, C]` with the oldest day first.
#[derive(Clone, Debug)]
pub struct DateBatch {
    pub t: usize,
    pub stocks: Vec<usize>,
    pub lookback: usize,
    pub n_features: usize,
    pub x: Vec<f64>,
    pub prior: Vec<f64>,
    /// Raw main-horizon forward return (NaN where undefined).
    pub y_raw: Vec<f64>,
    /// Rank-normalised main-horizon target.
    pub y: Vec<f64>,
    /// Rank-normalised targets for every horizon, `[n, H]`.
    pub y_aux: Vec<f64>,
}

impl DateBatch {
    pub fn len(&self) -> usize {
        self.stocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stocks.is_empty()
    }

    /// Feature window of the `k`-th stock in the batch, `[T, C]`.
    pub fn window(&self, k: usize) -> &[f64] {
        let w = self.lookback * self.n_features;
        &self.x[k * w..(k + 1) * w]
    }
}

/// Which targets a batch must carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetNeed {
    /// Every horizon defined (training).
    All,
    /// Main horizon defined (evaluation).
    Main,
    /// No target needed (prediction).
    None,
}

impl PreparedPanel {
    pub fn new(panel: PanelDataset, cfg: &PrepareConfig) -> Result<Self> {
        panel.validate()?;
        if cfg.lookback == 0 {
            return Err(Error::Config("lookback must be at least 1".into()));
        }
        let splits = chronological_split(&panel.dates, &cfg.split)?;
        let (d, n) = (panel.n_dates(), panel.n_stocks());
        let raw = raw_priors(&panel, cfg.prior_window)?;
        let stats = NormalizationStats::fit(&panel, splits.train.clone(), &raw);
        let mut features = panel.features.clone();
        robust_zscore_features(&mut features, &stats);
        let p = panel.n_priors;
        let priors: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(k, v)| (v - stats.prior_mean[k % p]) / stats.prior_std[k % p])
            .collect();
        let mut targets = vec![f64::NAN; d * n * AUX_HORIZONS];
        for h in 1..=AUX_HORIZONS {
            let y = forward_returns(&panel.open, &panel.close, d, n, h)?;
            for (k, v) in y.into_iter().enumerate() {
                targets[k * AUX_HORIZONS + h - 1] = v;
            }
        }
        Ok(PreparedPanel {
            panel,
            lookback: cfg.lookback,
            splits,
            stats,
            features,
            targets,
            priors,
        })
    }

    pub fn n_features(&self) -> usize {
        self.panel.n_features
    }

    pub fn n_priors(&self) -> usize {
        self.panel.n_priors
    }

    pub fn target(&self, t: usize, i: usize, h: usize) -> f64 {
        self.targets[(t * self.panel.n_stocks() + i) * AUX_HORIZONS + h - 1]
    }

    /// Stocks usable at `t`: members on every date of the lookback window
    /// with finite features there.
    pub fn eligible(&self, t: usize) -> Vec<usize> {
        let (n, c, lb) = (self.panel.n_stocks(), self.panel.n_features, self.lookback);
        if t + 1 < lb || t >= self.panel.n_dates() {
            return Vec::new();
        }
        (0..n)
            .filter(|&i| {
                (t + 1 - lb..=t).all(|s| {
                    self.panel.member[s * n + i]
                        && self.features[(s * n + i) * c..(s * n + i + 1) * c].iter().all(|v| v.is_finite())
                })
            })
            .collect()
    }

    /// The cross-section at date `t`, or `None` when fewer than two stocks
    /// qualify or the prior window is incomplete.
    pub fn batch(&self, t: usize, need: TargetNeed) -> Option<DateBatch> {
        let p = self.panel.n_priors;
        let prior = self.priors[t * p..(t + 1) * p].to_vec();
        if prior.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let stocks: Vec<usize> = self
            .eligible(t)
            .into_iter()
            .filter(|&i| match need {
                TargetNeed::All => (1..=AUX_HORIZONS).all(|h| self.target(t, i, h).is_finite()),
                TargetNeed::Main => self.target(t, i, MAIN_HORIZON).is_finite(),
                TargetNeed::None => true,
            })
            .collect();
        if stocks.len() < 2 {
            return None;
        }
        let (n, c, lb) = (self.panel.n_stocks(), self.panel.n_features, self.lookback);
        let mut x = Vec::with_capacity(stocks.len() * lb * c);
        for &i in &stocks {
            for s in t + 1 - lb..=t {
                x.extend_from_slice(&self.features[(s * n + i) * c..(s * n + i + 1) * c]);
            }
        }
        let y_raw: Vec<f64> = stocks.iter().map(|&i| self.target(t, i, MAIN_HORIZON)).collect();
        let y = if y_raw.iter().all(|v| v.is_finite()) {
            cs_rank_norm(&y_raw)
        } else {
            vec![f64::NAN; stocks.len()]
        };
        let mut y_aux = vec![f64::NAN; stocks.len() * AUX_HORIZONS];
        for h in 1..=AUX_HORIZONS {
            let col: Vec<f64> = stocks.iter().map(|&i| self.target(t, i, h)).collect();
            if col.iter().all(|v| v.is_finite()) {
                for (k, v) in cs_rank_norm(&col).into_iter().enumerate() {
                    y_aux[k * AUX_HORIZONS + h - 1] = v;
                }
            }
        }
        Some(DateBatch {
            t,
            stocks,
            lookback: lb,
            n_features: c,
            x,
            prior,
            y_raw,
            y,
            y_aux,
        })
    }

    /// Dates of `range` that yield a batch under `need`.
    pub fn usable_dates(&self, range: std::ops::Range<usize>, need: TargetNeed) -> Vec<usize> {
        range.filter(|&t| self.batch(t, need).is_some()).collect()
    }
}
