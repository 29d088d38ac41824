//! Ranking metrics: Spearman correlation, daily RankIC with its information
//! ratio, and a moving-block bootstrap for comparing two IC series.

use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::datapanel::{PredictionRow, PreparedPanel, MAIN_HORIZON};
use crate::diffcore::ModelRng;
use crate::error::{Error, Result};
use crate::stats;

/// Average ranks with rank 1 assigned to the highest value.
pub fn descending_ranks(x: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    stats::average_ranks(&neg)
}

/// Spearman rank correlation. `None` for fewer than two points, a constant
/// input, or any non-finite value.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "spearman inputs differ in length");
    if a.len() < 2 || a.iter().chain(b).any(|v| !v.is_finite()) {
        return None;
    }
    stats::pearson(&descending_ranks(a), &descending_ranks(b))
}

/// One date's aligned scores and realised returns.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossSection {
    pub date: NaiveDate,
    pub scores: Vec<f64>,
    pub realized: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IcSeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
}

impl IcSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Time-mean of the daily values; NaN when empty.
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            f64::NAN
        } else {
            stats::mean(&self.values)
        }
    }

    /// Mean over sample standard deviation. A deviation below 1e-12 counts as
    /// zero and gives a signed infinity (NaN if the mean is also zero); fewer
    /// than two dates give NaN.
    pub fn icir(&self) -> f64 {
        let sd = stats::sample_std(&self.values);
        let m = self.mean();
        if sd.is_nan() {
            f64::NAN
        } else if sd < 1e-12 {
            if m > 0.0 {
                f64::INFINITY
            } else if m < 0.0 {
                f64::NEG_INFINITY
            } else {
                f64::NAN
            }
        } else {
            m / sd
        }
    }
}

/// Daily Spearman between scores and realised returns. Dates with fewer
/// than two names or a degenerate cross-section are skipped.
pub fn rank_ic(days: &[CrossSection]) -> IcSeries {
    let ics: Vec<Option<f64>> = days.par_iter().map(|d| spearman(&d.scores, &d.realized)).collect();
    let mut out = IcSeries::default();
    for (d, ic) in days.iter().zip(ics) {
        match ic {
            Some(v) => {
                out.dates.push(d.date);
                out.values.push(v);
                out.counts.push(d.scores.len());
            }
            None => log::warn!("{}: rank IC undefined for {} names, date skipped", d.date, d.scores.len()),
        }
    }
    out
}

/// Joins predictions with the main-horizon forward returns of the panel.
/// Rows whose date or ticker is unknown, or whose target is undefined, are
/// dropped.
pub fn cross_sections(rows: &[PredictionRow], prepared: &PreparedPanel) -> Vec<CrossSection> {
    let panel = &prepared.panel;
    let tickers: HashMap<&str, usize> = panel.tickers.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut by_date: std::collections::BTreeMap<NaiveDate, CrossSection> = Default::default();
    for r in rows {
        let (Some(t), Some(&i)) = (panel.date_index(r.date), tickers.get(r.ticker.as_str())) else {
            continue;
        };
        let y = prepared.target(t, i, MAIN_HORIZON);
        if !y.is_finite() || !r.score.is_finite() {
            continue;
        }
        let cs = by_date.entry(r.date).or_insert_with(|| CrossSection {
            date: r.date,
            scores: Vec::new(),
            realized: Vec::new(),
        });
        cs.scores.push(r.score);
        cs.realized.push(y);
    }
    by_date.into_values().collect()
}

/// One-sided moving-block bootstrap p-value for mean(a − b) > 0 over the
/// dates both series share: the fraction of resampled means that are ≤ 0.
pub fn block_bootstrap_pvalue(a: &IcSeries, b: &IcSeries, block_len: usize, n_resamples: usize, seed: u64) -> Result<f64> {
    if block_len == 0 || n_resamples == 0 {
        return Err(Error::Config("block length and resample count must be positive".into()));
    }
    let bmap: HashMap<NaiveDate, f64> = b.dates.iter().copied().zip(b.values.iter().copied()).collect();
    let diff: Vec<f64> = a
        .dates
        .iter()
        .zip(&a.values)
        .filter_map(|(d, va)| bmap.get(d).map(|vb| va - vb))
        .collect();
    bootstrap_mean_pvalue(&diff, block_len, n_resamples, seed)
}

/// Moving-block bootstrap of the mean of `d`; returns the fraction of
/// resampled means that are ≤ 0.
pub fn bootstrap_mean_pvalue(d: &[f64], block_len: usize, n_resamples: usize, seed: u64) -> Result<f64> {
    let n = d.len();
    if n == 0 {
        return Err(Error::Data("bootstrap needs at least one shared date".into()));
    }
    let mut block = block_len;
    if block > n {
        log::warn!("block length {block} exceeds series length {n}; using {n}");
        block = n;
    }
    let starts = n - block + 1;
    let mut rng = ModelRng::seed_from_u64(seed);
    let mut below = 0usize;
    for _ in 0..n_resamples {
        let mut sum = 0.0;
        let mut filled = 0;
        while filled < n {
            let s = rng.random_range(0..starts);
            let take = block.min(n - filled);
            sum += d[s..s + take].iter().sum::<f64>();
            filled += take;
        }
        if sum / n as f64 <= 0.0 {
            below += 1;
        }
    }
    Ok(below as f64 / n_resamples as f64)
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Writes `date,rank_ic,n`.
pub fn write_ic_series(series: &IcSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| write_err(path, e))?;
    w.write_record(["date", "rank_ic", "n"]).map_err(|e| write_err(path, e))?;
    for ((d, v), n) in series.dates.iter().zip(&series.values).zip(&series.counts) {
        w.write_record([d.format("%Y-%m-%d").to_string(), format!("{v}"), n.to_string()])
            .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `metric,value` rows.
pub fn write_metrics(metrics: &[(&str, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| write_err(path, e))?;
    w.write_record(["metric", "value"]).map_err(|e| write_err(path, e))?;
    for (k, v) in metrics {
        w.write_record([k.to_string(), format!("{v}")]).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
