use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{forward_returns, PanelDataset, MAIN_HORIZON};
use crate::error::{Error, Result};
use crate::stats;

/// Synthetic market settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_stocks: usize,
    pub n_dates: usize,
    pub n_clusters: usize,
    /// Ratio of systematic to idiosyncratic daily return volatility.
    pub snr: f64,
    pub n_factors: usize,
    pub n_features: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_stocks: 200,
            n_dates: 500,
            n_clusters: 4,
            snr: 1.0,
            n_factors: 4,
            n_features: 8,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.n_clusters > self.n_stocks {
            return Err(Error::Config(format!(
                "need 1 ≤ clusters ≤ stocks, got {} clusters for {} stocks",
                self.n_clusters, self.n_stocks
            )));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        if self.n_features == 0 || self.n_factors == 0 {
            return Err(Error::Config("need at least one feature and one factor".into()));
        }
        if self.n_dates <= MAIN_HORIZON + 1 {
            return Err(Error::Config(format!("need more than {} dates", MAIN_HORIZON + 1)));
        }
        Ok(())
    }
}

/// Ground truth planted by the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub cluster: Vec<usize>,
    /// Factor loadings `[N, P]`.
    pub loadings: Vec<f64>,
    /// Main-horizon return compounded from the expected daily returns alone
    /// (no factor shocks or noise), `[D, N]`, NaN where undefined.
    pub planted: Vec<f64>,
    /// Per-date rank correlation between planted and realised forward return.
    pub achievable_ic: Vec<f64>,
}

impl Truth {
    /// Mean achievable IC over the dates in `range` where it is defined.
    pub fn mean_achievable_ic(&self, range: std::ops::Range<usize>) -> f64 {
        let v: Vec<f64> = self.achievable_ic[range].iter().copied().filter(|x| x.is_finite()).collect();
        stats::mean(&v)
    }
}

const PHI: f64 = 0.98;
const SD_DRIFT: f64 = 0.006;
const SD_IDIO: f64 = 0.008;
const SD_FACTOR: f64 = 0.005;
const PERIODS: [[f64; 8]; 2] = [
    [4.0, 6.5, 10.0, 16.0, 5.0, 8.0, 12.0, 20.0],
    [9.0, 14.0, 5.0, 3.0, 11.0, 4.0, 18.0, 7.0],
];
const ALPHA_NOISE: f64 = 1.0;
const COMMON_AR: f64 = 0.5;

fn business_days(n: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2015, 1, 2).unwrap();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().unwrap();
    }
    out
}

/// Generates a panel whose returns follow
/// `r_{i,t} = a_{i,t−1} + β_iᵀ f_t + ε_{i,t}` with a persistent expected
/// return `a` made of a cluster drift plus an idiosyncratic AR(1) term.
///
/// Feature columns: `f001` noisy `a`, `f002` last daily return, `f003` and
/// `f004` periodic patterns whose periods identify the cluster, `f005` a
/// short-memory path shared within the cluster, the rest pure noise. Priors are the daily factor returns `f_t`.
pub fn synthetic_generate(cfg: &SyntheticConfig) -> Result<(PanelDataset, Truth)> {
    cfg.validate()?;
    let (n, d, k, p, c) = (cfg.n_stocks, cfg.n_dates, cfg.n_clusters, cfg.n_factors, cfg.n_features);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cluster: Vec<usize> = (0..n).map(|i| i % k).collect();
    cluster.shuffle(&mut rng);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut z = || std_normal.sample(&mut rng);

    let mut cluster_beta = vec![0.0; k * p];
    for ci in 0..k {
        for j in 0..p {
            cluster_beta[ci * p + j] = if j == 0 { 1.0 + 0.5 * z() } else { 0.7 * z() };
        }
    }
    let mut loadings = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            loadings[i * p + j] = cluster_beta[cluster[i] * p + j] + 0.1 * z();
        }
    }
    let mean_beta_sq = loadings.chunks(p).map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n as f64;
    let sd_a = (SD_DRIFT * SD_DRIFT + SD_IDIO * SD_IDIO).sqrt();
    let sd_sys = (sd_a * sd_a + SD_FACTOR * SD_FACTOR * mean_beta_sq).sqrt();
    let sd_eps = if cfg.snr.is_finite() { sd_sys / cfg.snr } else { 0.0 };
    let sd_ret = (sd_sys * sd_sys + sd_eps * sd_eps).sqrt();
    let innov = (1.0 - PHI * PHI).sqrt();

    let mut factors = vec![0.0; d * p];
    for t in 1..d {
        for j in 0..p {
            factors[t * p + j] = SD_FACTOR * z();
        }
    }
    let mut drift = vec![0.0; d * k];
    let mut common = vec![0.0; d * k];
    for ci in 0..k {
        drift[ci] = SD_DRIFT * z();
        common[ci] = z();
        for t in 1..d {
            drift[t * k + ci] = PHI * drift[(t - 1) * k + ci] + SD_DRIFT * innov * z();
            common[t * k + ci] = COMMON_AR * common[(t - 1) * k + ci] + (1.0 - COMMON_AR * COMMON_AR).sqrt() * z();
        }
    }
    let phase: Vec<f64> = (0..2 * k).map(|_| z() * std::f64::consts::PI).collect();
    let mut a = vec![0.0; d * n];
    for i in 0..n {
        let mut e = SD_IDIO * z();
        for t in 0..d {
            if t > 0 {
                e = PHI * e + SD_IDIO * innov * z();
            }
            a[t * n + i] = drift[t * k + cluster[i]] + e;
        }
    }

    let mut ret = vec![0.0; d * n];
    let mut clean = vec![0.0; d * n];
    for t in 1..d {
        for i in 0..n {
            clean[t * n + i] = a[(t - 1) * n + i];
            let sys = clean[t * n + i]
                + (0..p).map(|j| loadings[i * p + j] * factors[t * p + j]).sum::<f64>();
            ret[t * n + i] = sys + sd_eps * z();
        }
    }
    let mut close = vec![0.0; d * n];
    let mut open = vec![0.0; d * n];
    for i in 0..n {
        close[i] = 100.0;
        open[i] = 100.0;
        for t in 1..d {
            let r = ret[t * n + i];
            if r <= -1.0 {
                return Err(Error::Data(format!("generated return {r} wipes out stock {i}")));
            }
            open[t * n + i] = close[(t - 1) * n + i];
            close[t * n + i] = close[(t - 1) * n + i] * (1.0 + r);
        }
    }

    let mut features = vec![0.0; d * n * c];
    for t in 0..d {
        for i in 0..n {
            let ci = cluster[i];
            let row = &mut features[(t * n + i) * c..(t * n + i + 1) * c];
            for (f, v) in row.iter_mut().enumerate() {
                *v = match f {
                    0 => a[t * n + i] / sd_a + ALPHA_NOISE * z(),
                    1 => ret[t * n + i] / sd_ret,
                    2 | 3 => {
                        let set = &PERIODS[f - 2];
                        let period = set[ci % set.len()] * (1 + ci / set.len()) as f64;
                        let angle = 2.0 * std::f64::consts::PI * t as f64 / period + phase[(f - 2) * k + ci];
                        angle.sin() + 0.3 * z()
                    }
                    4 => common[t * k + ci] + 0.5 * z(),
                    _ => z(),
                };
            }
        }
    }

    let realized = forward_returns(&open, &close, d, n, MAIN_HORIZON)?;
    let mut planted = vec![f64::NAN; d * n];
    let mut achievable_ic = vec![f64::NAN; d];
    for t in 0..d.saturating_sub(MAIN_HORIZON) {
        for i in 0..n {
            // open_{t+1} = close_t, so the target compounds r_{t+1..t+5}
            let g: f64 = (1..=MAIN_HORIZON).map(|h| 1.0 + clean[(t + h) * n + i]).product();
            planted[t * n + i] = g - 1.0;
        }
        let ps = &planted[t * n..(t + 1) * n];
        let ys = &realized[t * n..(t + 1) * n];
        achievable_ic[t] = stats::pearson(&stats::average_ranks(ps), &stats::average_ranks(ys)).unwrap_or(f64::NAN);
    }

    let tickers: Vec<String> = (0..n).map(|i| format!("S{i:04}")).collect();
    let panel = PanelDataset {
        dates: business_days(d),
        tickers,
        n_features: c,
        features,
        open,
        close,
        member: vec![true; d * n],
        n_priors: p,
        factor_returns: factors,
    };
    Ok((
        panel,
        Truth {
            cluster,
            loadings,
            planted,
            achievable_ic,
        },
    ))
}

/// Writes ground truth in long form with header `kind,key,value`:
/// `cluster,<ticker>,<id>`, `loading,<ticker>:p<j>,<beta>` and
/// `achievable_ic,<date>,<ic>`.
pub fn write_truth(truth: &Truth, panel: &PanelDataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    let err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(["kind", "key", "value"]).map_err(err)?;
    let p = panel.n_priors;
    for (i, t) in panel.tickers.iter().enumerate() {
        w.write_record(["cluster", t, &truth.cluster[i].to_string()]).map_err(err)?;
    }
    for (i, t) in panel.tickers.iter().enumerate() {
        for j in 0..p {
            let key = format!("{t}:p{:02}", j + 1);
            w.write_record(["loading", &key, &format!("{}", truth.loadings[i * p + j])])
                .map_err(err)?;
        }
    }
    for (t, date) in panel.dates.iter().enumerate() {
        let ic = truth.achievable_ic[t];
        if ic.is_finite() {
            w.write_record(["achievable_ic", &date.format("%Y-%m-%d").to_string(), &format!("{ic}")])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads the cluster ids and per-date achievable IC back from `truth.csv`.
pub fn read_truth(path: &Path) -> Result<(Vec<(String, usize)>, Vec<(NaiveDate, f64)>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(f);
    let mut clusters = Vec::new();
    let mut ics = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Ingest {
            file: path.display().to_string(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let bad = || Error::Ingest {
            file: path.display().to_string(),
            line: rec.position().map_or(0, |p| p.line() as usize),
            msg: "malformed truth row".into(),
        };
        match &rec[0] {
            "cluster" => clusters.push((rec[1].to_string(), rec[2].parse().map_err(|_| bad())?)),
            "achievable_ic" => ics.push((
                NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d").map_err(|_| bad())?,
                rec[2].parse().map_err(|_| bad())?,
            )),
            _ => {}
        }
    }
    Ok((clusters, ics))
}
