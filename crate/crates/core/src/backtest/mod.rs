//! TopK-DropN equal-weight portfolio engine with asymmetric proportional
//! costs, portfolio metrics and cost / rebalance-rate sweeps.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::datapanel::{PanelDataset, PredictionRow};
use crate::error::{Error, Result};
use crate::stats;

pub const TRADING_DAYS: f64 = 252.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostRegime {
    pub name: &'static str,
    pub buy_bps: f64,
    pub sell_bps: f64,
}

pub const COST_REGIMES: [CostRegime; 6] = [
    CostRegime { name: "no_cost", buy_bps: 0.0, sell_bps: 0.0 },
    CostRegime { name: "low", buy_bps: 2.0, sell_bps: 3.0 },
    CostRegime { name: "default", buy_bps: 5.0, sell_bps: 15.0 },
    CostRegime { name: "high", buy_bps: 10.0, sell_bps: 20.0 },
    CostRegime { name: "very_high", buy_bps: 15.0, sell_bps: 30.0 },
    CostRegime { name: "extreme", buy_bps: 20.0, sell_bps: 40.0 },
];

/// Rebalance rates of the `n_drop` sweep at `k_port = 30`.
pub const N_DROP_GRID: [usize; 6] = [1, 3, 5, 7, 10, 15];

#[derive(Clone, Debug, PartialEq)]
pub struct BacktestConfig {
    pub k_port: usize,
    pub n_drop: usize,
    pub buy_bps: f64,
    pub sell_bps: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            k_port: 30,
            n_drop: 5,
            buy_bps: 5.0,
            sell_bps: 15.0,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_port == 0 || self.n_drop == 0 || self.n_drop > self.k_port {
            return Err(Error::Config(format!(
                "need 1 <= n_drop <= k_port, got k_port={} n_drop={}",
                self.k_port, self.n_drop
            )));
        }
        if !(self.buy_bps >= 0.0 && self.sell_bps >= 0.0) {
            return Err(Error::Config("costs must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_costs(&self, regime: &CostRegime) -> Self {
        BacktestConfig {
            buy_bps: regime.buy_bps,
            sell_bps: regime.sell_bps,
            ..self.clone()
        }
    }
}

/// One trading day: the scored universe and each name's realised return
/// over the holding period that starts on this date.
#[derive(Clone, Debug, PartialEq)]
pub struct DayInput {
    pub date: NaiveDate,
    pub tickers: Vec<String>,
    pub scores: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Holdings after a rebalance with the net trades against the previous day.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Rebalance {
    pub holdings: BTreeSet<String>,
    pub buys: BTreeSet<String>,
    pub sells: BTreeSet<String>,
}

/// Universe order: score descending, then ticker ascending.
fn ranked<'a>(tickers: &'a [String], scores: &[f64]) -> Vec<&'a str> {
    let mut idx: Vec<usize> = (0..tickers.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| tickers[a].cmp(&tickers[b])));
    idx.into_iter().map(|i| tickers[i].as_str()).collect()
}

/// One TopK-DropN step. Held names outside the universe are dropped first;
/// the weakest `n_drop` remaining holdings are sold and replaced from the
/// top-K candidates; any shortfall below `k_port` is then filled from the
/// candidates by score.
pub fn topk_dropn_rebalance(
    tickers: &[String],
    scores: &[f64],
    prev: &BTreeSet<String>,
    k_port: usize,
    n_drop: usize,
) -> Rebalance {
    let order = ranked(tickers, scores);
    if order.len() < k_port {
        log::warn!("universe of {} names is smaller than k_port={k_port}", order.len());
    }
    let candidates = &order[..k_port.min(order.len())];
    let held: Vec<&str> = order.iter().copied().filter(|t| prev.contains(*t)).collect();
    let n_sell = n_drop.min(held.len());
    let kept: BTreeSet<&str> = held[..held.len() - n_sell].iter().copied().collect();
    let mut holdings = kept.clone();
    let buys: Vec<&str> = candidates.iter().copied().filter(|t| !kept.contains(t)).take(n_sell).collect();
    holdings.extend(buys);
    for t in candidates {
        if holdings.len() >= k_port {
            break;
        }
        holdings.insert(t);
    }
    let holdings: BTreeSet<String> = holdings.into_iter().map(String::from).collect();
    Rebalance {
        buys: holdings.difference(prev).cloned().collect(),
        sells: prev.difference(&holdings).cloned().collect(),
        holdings,
    }
}

/// Runs the rebalancing state machine over all days, starting from an
/// empty book.
pub fn simulate_holdings(days: &[DayInput], k_port: usize, n_drop: usize) -> Vec<Rebalance> {
    let mut prev = BTreeSet::new();
    days.iter()
        .map(|d| {
            let r = topk_dropn_rebalance(&d.tickers, &d.scores, &prev, k_port, n_drop);
            prev = r.holdings.clone();
            r
        })
        .collect()
}

/// Half the ℓ1 distance between consecutive equal-weight books.
pub fn turnover(prev: &BTreeSet<String>, next: &BTreeSet<String>) -> f64 {
    let w = |s: &BTreeSet<String>| if s.is_empty() { 0.0 } else { 1.0 / s.len() as f64 };
    let (wp, wn) = (w(prev), w(next));
    let mut l1 = 0.0;
    for t in prev.union(next) {
        let a = if prev.contains(t) { wp } else { 0.0 };
        let b = if next.contains(t) { wn } else { 0.0 };
        l1 += (a - b).abs();
    }
    0.5 * l1
}

/// Log return of the equal-weight book net of costs, with bought and sold
/// weight measured against the post-rebalance book.
pub fn daily_return(gross: f64, n_held: usize, n_bought: usize, n_sold: usize, buy_bps: f64, sell_bps: f64) -> Result<(f64, f64)> {
    let base = n_held.max(1) as f64;
    let cost = buy_bps * 1e-4 * n_bought as f64 / base + sell_bps * 1e-4 * n_sold as f64 / base;
    let net = gross - cost;
    if net <= -1.0 {
        return Err(Error::Data(format!("portfolio wiped out: gross {gross} net of cost {cost}")));
    }
    Ok((net.ln_1p(), cost))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DayRecord {
    pub date: NaiveDate,
    pub holdings: Vec<String>,
    pub buys: Vec<String>,
    pub sells: Vec<String>,
    pub gross: f64,
    pub cost: f64,
    pub g: f64,
    pub turnover: f64,
    pub wealth: f64,
}

impl DayRecord {
    /// FNV-1a over the sorted holdings, as 16 hex digits.
    pub fn holdings_hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.holdings {
            for b in t.bytes().chain(std::iter::once(b',')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        format!("{h:016x}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PortfolioMetrics {
    pub ar: f64,
    pub mdd: f64,
    /// NaN when the return series has (numerically) zero deviation.
    pub sr: f64,
    pub cumulative: f64,
    pub mean_turnover: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BacktestResult {
    pub days: Vec<DayRecord>,
    pub metrics: PortfolioMetrics,
}

/// Largest peak-to-trough loss of a wealth path.
pub fn max_drawdown(wealth: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut mdd: f64 = 0.0;
    for &w in wealth {
        peak = peak.max(w);
        mdd = mdd.max(1.0 - w / peak);
    }
    mdd
}

/// AR, MDD, SR and cumulative return of a daily log-return series.
pub fn portfolio_metrics(g: &[f64], mean_turnover: f64) -> PortfolioMetrics {
    if g.is_empty() {
        return PortfolioMetrics {
            ar: f64::NAN,
            mdd: f64::NAN,
            sr: f64::NAN,
            cumulative: f64::NAN,
            mean_turnover,
        };
    }
    let m = stats::mean(g);
    let sd = stats::sample_std(g);
    let mut acc = 0.0;
    let wealth: Vec<f64> = g
        .iter()
        .map(|x| {
            acc += x;
            acc.exp()
        })
        .collect();
    PortfolioMetrics {
        ar: (TRADING_DAYS * m).exp() - 1.0,
        mdd: max_drawdown(&wealth),
        sr: if sd.is_nan() || sd < 1e-14 {
            f64::NAN
        } else {
            TRADING_DAYS.sqrt() * m / sd
        },
        cumulative: acc.exp_m1(),
        mean_turnover,
    }
}

/// Prices a fixed trade sequence at the given costs.
pub fn apply_costs(days: &[DayInput], trades: &[Rebalance], buy_bps: f64, sell_bps: f64) -> Result<BacktestResult> {
    assert_eq!(days.len(), trades.len());
    let mut prev = BTreeSet::new();
    let mut log_wealth = 0.0;
    let mut records = Vec::with_capacity(days.len());
    for (d, r) in days.iter().zip(trades) {
        let ret: HashMap<&str, f64> = d.tickers.iter().map(String::as_str).zip(d.returns.iter().copied()).collect();
        let mut gross = 0.0;
        for t in &r.holdings {
            let y = ret.get(t.as_str()).copied().unwrap_or(f64::NAN);
            if !y.is_finite() {
                return Err(Error::Data(format!("{}: no return for held name {t}", d.date)));
            }
            gross += y;
        }
        if !r.holdings.is_empty() {
            gross /= r.holdings.len() as f64;
        }
        let n_base = if r.holdings.is_empty() { prev.len() } else { r.holdings.len() };
        let (g, cost) = daily_return(gross, n_base, r.buys.len(), r.sells.len(), buy_bps, sell_bps)
            .map_err(|e| Error::Data(format!("{}: {e}", d.date)))?;
        log_wealth += g;
        records.push(DayRecord {
            date: d.date,
            holdings: r.holdings.iter().cloned().collect(),
            buys: r.buys.iter().cloned().collect(),
            sells: r.sells.iter().cloned().collect(),
            gross,
            cost,
            g,
            turnover: turnover(&prev, &r.holdings),
            wealth: log_wealth.exp(),
        });
        prev = r.holdings.clone();
    }
    let g: Vec<f64> = records.iter().map(|r| r.g).collect();
    let mean_to = if records.is_empty() {
        f64::NAN
    } else {
        records.iter().map(|r| r.turnover).sum::<f64>() / records.len() as f64
    };
    Ok(BacktestResult {
        metrics: portfolio_metrics(&g, mean_to),
        days: records,
    })
}

pub fn run_backtest(days: &[DayInput], cfg: &BacktestConfig) -> Result<BacktestResult> {
    cfg.validate()?;
    let trades = simulate_holdings(days, cfg.k_port, cfg.n_drop);
    apply_costs(days, &trades, cfg.buy_bps, cfg.sell_bps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub regime: String,
    pub buy_bps: f64,
    pub sell_bps: f64,
    pub n_drop: usize,
    pub metrics: PortfolioMetrics,
}

/// One backtest per cost regime with the trade sequence held fixed.
pub fn cost_sweep(days: &[DayInput], cfg: &BacktestConfig, regimes: &[CostRegime]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let trades = simulate_holdings(days, cfg.k_port, cfg.n_drop);
    regimes
        .par_iter()
        .map(|r| {
            let res = apply_costs(days, &trades, r.buy_bps, r.sell_bps)?;
            Ok(SweepRow {
                regime: r.name.to_string(),
                buy_bps: r.buy_bps,
                sell_bps: r.sell_bps,
                n_drop: cfg.n_drop,
                metrics: res.metrics,
            })
        })
        .collect()
}

/// One re-simulated backtest per `n_drop` value at the configured costs.
pub fn n_drop_sweep(days: &[DayInput], cfg: &BacktestConfig, n_drops: &[usize]) -> Result<Vec<SweepRow>> {
    n_drops
        .par_iter()
        .map(|&n| {
            let c = BacktestConfig { n_drop: n, ..cfg.clone() };
            let res = run_backtest(days, &c)?;
            Ok(SweepRow {
                regime: format!("n_drop_{n}"),
                buy_bps: c.buy_bps,
                sell_bps: c.sell_bps,
                n_drop: n,
                metrics: res.metrics,
            })
        })
        .collect()
}

/// Builds backtest days from predictions. A position opened on date `t` earns
/// the close-to-close return from `t` to `t + 1`; the last panel date is
/// therefore never traded. Only current members with finite scores form the
/// universe.
pub fn days_from_predictions(rows: &[PredictionRow], panel: &PanelDataset) -> Vec<DayInput> {
    let n = panel.n_stocks();
    let tickers: HashMap<&str, usize> = panel.tickers.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut by_date: std::collections::BTreeMap<NaiveDate, DayInput> = Default::default();
    for r in rows {
        let (Some(t), Some(&i)) = (panel.date_index(r.date), tickers.get(r.ticker.as_str())) else {
            continue;
        };
        if t + 1 >= panel.n_dates() || !panel.member[t * n + i] || !r.score.is_finite() {
            continue;
        }
        let day = by_date.entry(r.date).or_insert_with(|| DayInput {
            date: r.date,
            tickers: Vec::new(),
            scores: Vec::new(),
            returns: Vec::new(),
        });
        day.tickers.push(r.ticker.clone());
        day.scores.push(r.score);
        day.returns.push(panel.close_to_close(t, i));
    }
    by_date.into_values().collect()
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Writes `date,holdings_hash,n_held,g,turnover,cost`.
pub fn write_daily(res: &BacktestResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["date", "holdings_hash", "n_held", "g", "turnover", "cost"])
        .map_err(|e| csv_err(path, e))?;
    for d in &res.days {
        w.write_record([
            d.date.format("%Y-%m-%d").to_string(),
            d.holdings_hash(),
            d.holdings.len().to_string(),
            format!("{}", d.g),
            format!("{}", d.turnover),
            format!("{}", d.cost),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn metric_rows(m: &PortfolioMetrics) -> Vec<(&'static str, f64)> {
    vec![
        ("ar", m.ar),
        ("mdd", m.mdd),
        ("sr", m.sr),
        ("cumulative_return", m.cumulative),
        ("mean_turnover", m.mean_turnover),
    ]
}

/// Writes `regime,buy_bps,sell_bps,n_drop,ar,sr,mdd,cumulative_return,turnover`.
pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "regime",
        "buy_bps",
        "sell_bps",
        "n_drop",
        "ar",
        "sr",
        "mdd",
        "cumulative_return",
        "turnover",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.regime.clone(),
            format!("{}", r.buy_bps),
            format!("{}", r.sell_bps),
            r.n_drop.to_string(),
            format!("{}", m.ar),
            format!("{}", m.sr),
            format!("{}", m.mdd),
            format!("{}", m.cumulative),
            format!("{}", m.mean_turnover),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
