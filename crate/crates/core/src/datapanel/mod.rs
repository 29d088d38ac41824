//! Panel data: ingestion, normalisation, targets, prior factors, splits and
//! a synthetic market with planted structure.

mod io;
mod prepared;
mod synthetic;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::stats;

pub use io::{load_panel, read_predictions, write_panel, write_predictions, PredictionRow};
pub use prepared::{DateBatch, PrepareConfig, PreparedPanel, TargetNeed};
pub use synthetic::{read_truth, synthetic_generate, write_truth, SyntheticConfig, Truth};

/// Main prediction horizon in trading days.
pub const MAIN_HORIZON: usize = 5;
/// Number of auxiliary horizons (1 through 9 days).
pub const AUX_HORIZONS: usize = 9;
/// Prior-factor compounding window.
pub const PRIOR_WINDOW: usize = 20;

/// Date × stock panel. Array layouts are row-major with dates outermost:
/// `features[(t·N + i)·C + c]`, `open[t·N + i]`, `factor_returns[t·P + j]`.
/// Missing feature cells hold NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    pub n_features: usize,
    pub features: Vec<f64>,
    pub open: Vec<f64>,
    pub close: Vec<f64>,
    pub member: Vec<bool>,
    pub n_priors: usize,
    /// Daily prior-factor returns r_{j,t}.
    pub factor_returns: Vec<f64>,
}

impl PanelDataset {
    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_stocks(&self) -> usize {
        self.tickers.len()
    }

    pub fn feature(&self, t: usize, i: usize) -> &[f64] {
        let (n, c) = (self.n_stocks(), self.n_features);
        &self.features[(t * n + i) * c..(t * n + i + 1) * c]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.n_dates(), self.n_stocks());
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("panel dates are not strictly increasing".into()));
        }
        if self.features.len() != d * n * self.n_features
            || self.open.len() != d * n
            || self.close.len() != d * n
            || self.member.len() != d * n
            || self.factor_returns.len() != d * self.n_priors
        {
            return Err(Error::Data("panel array sizes disagree with its dimensions".into()));
        }
        Ok(())
    }

    /// Carries the last observed value forward per stock and feature. A
    /// member whose features are still missing afterwards becomes a
    /// non-member on that date.
    pub fn forward_fill(&mut self) {
        let (d, n, c) = (self.n_dates(), self.n_stocks(), self.n_features);
        for i in 0..n {
            for f in 0..c {
                let mut last = f64::NAN;
                for t in 0..d {
                    let v = &mut self.features[(t * n + i) * c + f];
                    if v.is_nan() {
                        *v = last;
                    } else {
                        last = *v;
                    }
                }
            }
        }
        for t in 0..d {
            for i in 0..n {
                if self.member[t * n + i] && self.feature(t, i).iter().any(|v| v.is_nan()) {
                    self.member[t * n + i] = false;
                }
            }
        }
    }

    /// Close-to-close simple return earned by holding from `t` to `t+1`;
    /// NaN on the last date.
    pub fn close_to_close(&self, t: usize, i: usize) -> f64 {
        let n = self.n_stocks();
        if t + 1 >= self.n_dates() {
            return f64::NAN;
        }
        self.close[(t + 1) * n + i] / self.close[t * n + i] - 1.0
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }
}

/// Per-feature robust statistics and per-prior moments, fitted on the
/// training dates only.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub median: Vec<f64>,
    pub mad: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub prior_std: Vec<f64>,
}

pub const MAD_SCALE: f64 = 1.4826;
pub const MAD_FLOOR: f64 = 1e-8;
pub const ZSCORE_CLIP: f64 = 3.0;

impl NormalizationStats {
    /// Fits feature statistics over member cells of dates in `train`, and
    /// prior moments over the raw compounded priors of those dates.
    pub fn fit(panel: &PanelDataset, train: std::ops::Range<usize>, raw_priors: &[f64]) -> Self {
        let (n, c, p) = (panel.n_stocks(), panel.n_features, panel.n_priors);
        let mut median = vec![0.0; c];
        let mut mad = vec![0.0; c];
        for f in 0..c {
            let vals: Vec<f64> = train
                .clone()
                .flat_map(|t| (0..n).map(move |i| (t, i)))
                .filter(|&(t, i)| panel.member[t * n + i])
                .map(|(t, i)| panel.feature(t, i)[f])
                .filter(|v| v.is_finite())
                .collect();
            if vals.is_empty() {
                continue;
            }
            let med = stats::median(&vals);
            let dev: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
            median[f] = med;
            mad[f] = stats::median(&dev);
        }
        let mut prior_mean = vec![0.0; p];
        let mut prior_std = vec![1.0; p];
        for j in 0..p {
            let vals: Vec<f64> = train
                .clone()
                .map(|t| raw_priors[t * p + j])
                .filter(|v| v.is_finite())
                .collect();
            if vals.len() >= 2 {
                prior_mean[j] = stats::mean(&vals);
                let sd = stats::pop_var(&vals).sqrt();
                prior_std[j] = if sd > 0.0 { sd } else { 1.0 };
            }
        }
        NormalizationStats {
            median,
            mad,
            prior_mean,
            prior_std,
        }
    }
}

/// `clip((x − median) / (1.4826·max(MAD, 1e-8)), −3, 3)`; NaN stays NaN.
pub fn robust_zscore(x: f64, median: f64, mad: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    ((x - median) / (MAD_SCALE * mad.max(MAD_FLOOR))).clamp(-ZSCORE_CLIP, ZSCORE_CLIP)
}

/// Applies [`robust_zscore`] to every cell of a `[.., C]` feature array.
pub fn robust_zscore_features(features: &mut [f64], stats: &NormalizationStats) {
    let c = stats.median.len();
    for row in features.chunks_mut(c) {
        for (f, v) in row.iter_mut().enumerate() {
            *v = robust_zscore(*v, stats.median[f], stats.mad[f]);
        }
    }
}

/// Cross-sectional rank normalisation: percentile `(rank − 0.5)/N` with
/// average ranks for ties, then standardised to zero mean and unit
/// population variance. A single value maps to 0.
pub fn cs_rank_norm(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        if n == 1 {
            log::warn!("cross-sectional rank normalisation of a single stock; emitting 0");
        }
        return vec![0.0; n];
    }
    let pct: Vec<f64> = stats::average_ranks(values)
        .into_iter()
        .map(|r| (r - 0.5) / n as f64)
        .collect();
    let m = stats::mean(&pct);
    let sd = stats::pop_var(&pct).sqrt();
    if sd == 0.0 {
        return vec![0.0; n];
    }
    pct.iter().map(|p| (p - m) / sd).collect()
}

/// `y[t, i] = (close[t+h, i] − open[t+1, i]) / open[t+1, i]`, NaN where
/// `t + h` runs past the panel.
pub fn forward_returns(open: &[f64], close: &[f64], n_dates: usize, n_stocks: usize, h: usize) -> Result<Vec<f64>> {
    assert!(h >= 1, "horizon must be at least one day");
    if let Some(p) = open.iter().chain(close).find(|&&p| !(p > 0.0)) {
        return Err(Error::Data(format!("non-positive or missing price {p}")));
    }
    let mut out = vec![f64::NAN; n_dates * n_stocks];
    for t in 0..n_dates {
        if t + h >= n_dates {
            break;
        }
        for i in 0..n_stocks {
            let o = open[(t + 1) * n_stocks + i];
            out[t * n_stocks + i] = (close[(t + h) * n_stocks + i] - o) / o;
        }
    }
    Ok(out)
}

/// Compounded factor return over the `window` days strictly before `t`.
pub fn prior_factor_window(returns: &[f64], t: usize, window: usize) -> Result<f64> {
    if t < window {
        return Err(Error::Data(format!(
            "prior window of {window} days needs {window} earlier dates, date index {t} has {t}"
        )));
    }
    let mut log_sum = 0.0;
    for (k, &r) in returns[t - window..t].iter().enumerate() {
        if !(r > -1.0) {
            return Err(Error::Data(format!(
                "factor return {r} at date index {} makes log(1 + r) undefined",
                t - window + k
            )));
        }
        log_sum += r.ln_1p();
    }
    Ok(log_sum.exp_m1())
}

/// Raw compounded priors `[D, P]`; NaN where the window is incomplete.
pub fn raw_priors(panel: &PanelDataset, window: usize) -> Result<Vec<f64>> {
    let (d, p) = (panel.n_dates(), panel.n_priors);
    let mut out = vec![f64::NAN; d * p];
    for j in 0..p {
        let series: Vec<f64> = (0..d).map(|t| panel.factor_returns[t * p + j]).collect();
        for t in window..d {
            out[t * p + j] = prior_factor_window(&series, t, window)?;
        }
    }
    Ok(out)
}

/// Chronological partition of the panel dates.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Fractions of the date count for train and validation; the rest is test.
    Fractions { train: f64, valid: f64 },
    /// Last date (inclusive) of the train and validation ranges.
    Dates { train_end: NaiveDate, valid_end: NaiveDate },
}

/// Index ranges of the train, validation and test dates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: std::ops::Range<usize>,
    pub valid: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

pub fn chronological_split(dates: &[NaiveDate], spec: &SplitSpec) -> Result<Splits> {
    let d = dates.len();
    let (a, b) = match spec {
        SplitSpec::Fractions { train, valid } => {
            if !(*train > 0.0 && *valid >= 0.0 && train + valid < 1.0) {
                return Err(Error::Config(format!(
                    "split fractions train={train} valid={valid} must be positive and sum below 1"
                )));
            }
            let a = (train * d as f64).round() as usize;
            let b = ((train + valid) * d as f64).round() as usize;
            (a, b)
        }
        SplitSpec::Dates { train_end, valid_end } => {
            if train_end >= valid_end {
                return Err(Error::Config("train end must precede validation end".into()));
            }
            let a = dates.partition_point(|x| x <= train_end);
            let b = dates.partition_point(|x| x <= valid_end);
            (a, b)
        }
    };
    let s = Splits {
        train: 0..a,
        valid: a..b,
        test: b..d,
    };
    for (name, r) in [("train", &s.train), ("validation", &s.valid), ("test", &s.test)] {
        if r.is_empty() {
            return Err(Error::Config(format!("{name} split is empty")));
        }
    }
    Ok(s)
}
