//! Interpretability analytics over prediction files: code transition
//! dynamics, code–factor exposures, expert activation spikes and paired
//! signed-rank tests.

mod wilcoxon;

pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::datapanel::{PanelDataset, PredictionRow};
use crate::error::{Error, Result};
use crate::evaluation::spearman;
use crate::stats;

pub const TOP_CODES: usize = 100;
pub const MONTHLY: usize = 21;
pub const QUARTERLY: usize = 63;
pub const MIN_EXPOSURE_OBS: usize = 30;
pub const SPIKE_SIGMAS: f64 = 1.5;

/// Code index per date and stock; `None` where the stock was not scored.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentHistory {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    pub codes: Vec<Option<usize>>,
}

impl AssignmentHistory {
    pub fn from_predictions(rows: &[PredictionRow]) -> Result<Self> {
        let mut dates: Vec<NaiveDate> = rows.iter().map(|r| r.date).collect();
        dates.sort();
        dates.dedup();
        let mut tickers: Vec<String> = rows.iter().map(|r| r.ticker.clone()).collect();
        tickers.sort();
        tickers.dedup();
        let di: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        let ti: HashMap<&str, usize> = tickers.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let n = tickers.len();
        let mut codes = vec![None; dates.len() * n];
        for r in rows {
            let c = r
                .code_index
                .ok_or_else(|| Error::Data(format!("prediction for {} on {} has no code", r.ticker, r.date)))?;
            codes[di[&r.date] * n + ti[r.ticker.as_str()]] = Some(c);
        }
        Ok(AssignmentHistory { dates, tickers, codes })
    }

    pub fn n_stocks(&self) -> usize {
        self.tickers.len()
    }

    pub fn code(&self, t: usize, i: usize) -> Option<usize> {
        self.codes[t * self.n_stocks() + i]
    }

    /// Assignment counts per code, over every date and stock.
    pub fn activity(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for c in self.codes.iter().flatten() {
            *m.entry(*c).or_insert(0) += 1;
        }
        m
    }
}

/// Transition statistics at one horizon, restricted to the most active codes.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionSummary {
    pub horizon: usize,
    pub codes: Vec<usize>,
    /// Row-stochastic `[K', K']`; rows without observations are all zero.
    pub matrix: Vec<f64>,
    pub row_counts: Vec<usize>,
    /// Mean diagonal over rows with observations.
    pub persistence: f64,
    /// Mean row entropy in nats over rows with observations.
    pub entropy: f64,
}

/// Counts, per stock, the code at `t` against the code at `t + horizon`
/// among the `top` most assigned codes (ties to the lower index) and
/// normalises each row. Transitions touching other codes are ignored.
pub fn code_transition_matrix(hist: &AssignmentHistory, horizon: usize, top: usize) -> Result<TransitionSummary> {
    if horizon == 0 {
        return Err(Error::Config("transition horizon must be at least one day".into()));
    }
    let mut active: Vec<(usize, usize)> = hist.activity().into_iter().collect();
    active.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut codes: Vec<usize> = active.into_iter().take(top).map(|(c, _)| c).collect();
    codes.sort_unstable();
    let pos: HashMap<usize, usize> = codes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let k = codes.len();
    let mut counts = vec![0usize; k * k];
    for t in 0..hist.dates.len().saturating_sub(horizon) {
        for i in 0..hist.n_stocks() {
            if let (Some(a), Some(b)) = (hist.code(t, i), hist.code(t + horizon, i)) {
                if let (Some(&pa), Some(&pb)) = (pos.get(&a), pos.get(&b)) {
                    counts[pa * k + pb] += 1;
                }
            }
        }
    }
    let mut matrix = vec![0.0; k * k];
    let mut row_counts = vec![0; k];
    let (mut diag, mut ent, mut live) = (0.0, 0.0, 0usize);
    for r in 0..k {
        let row = &counts[r * k..(r + 1) * k];
        let s: usize = row.iter().sum();
        row_counts[r] = s;
        if s == 0 {
            continue;
        }
        live += 1;
        for c in 0..k {
            matrix[r * k + c] = row[c] as f64 / s as f64;
        }
        diag += matrix[r * k + r];
        ent -= matrix[r * k..(r + 1) * k]
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>();
    }
    let (persistence, entropy) = if live == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (diag / live as f64, ent / live as f64)
    };
    Ok(TransitionSummary {
        horizon,
        codes,
        matrix,
        row_counts,
        persistence,
        entropy,
    })
}

/// Share of assignments that fall in their code's majority ground-truth
/// cluster.
pub fn cluster_purity(hist: &AssignmentHistory, cluster_of: &HashMap<String, usize>) -> f64 {
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for t in 0..hist.dates.len() {
        for (i, tk) in hist.tickers.iter().enumerate() {
            if let (Some(c), Some(&g)) = (hist.code(t, i), cluster_of.get(tk)) {
                *table.entry(c).or_default().entry(g).or_insert(0) += 1;
            }
        }
    }
    let total: usize = table.values().flat_map(|m| m.values()).sum();
    let majority: usize = table.values().map(|m| m.values().max().copied().unwrap_or(0)).sum();
    if total == 0 {
        f64::NAN
    } else {
        majority as f64 / total as f64
    }
}

/// Top factor correlations of one code's return series.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureRow {
    pub code: usize,
    pub n_obs: usize,
    /// `(factor index, ρ)` by decreasing `|ρ|`, at most three.
    pub top: Vec<(usize, f64)>,
}

/// Equal-weighted next-day return of each code's holders, keyed by code,
/// as `(panel date index, return)` pairs.
pub fn code_returns(hist: &AssignmentHistory, panel: &PanelDataset) -> Result<BTreeMap<usize, Vec<(usize, f64)>>> {
    let col: HashMap<&str, usize> = panel.tickers.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut out: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for (h, date) in hist.dates.iter().enumerate() {
        let t = panel
            .date_index(*date)
            .ok_or_else(|| Error::Data(format!("prediction date {date} is not in the panel")))?;
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (i, tk) in hist.tickers.iter().enumerate() {
            let Some(c) = hist.code(h, i) else { continue };
            let j = *col
                .get(tk.as_str())
                .ok_or_else(|| Error::Data(format!("ticker {tk} is not in the panel")))?;
            let r = panel.close_to_close(t, j);
            if r.is_finite() {
                let e = sums.entry(c).or_insert((0.0, 0));
                e.0 += r;
                e.1 += 1;
            }
        }
        for (c, (s, n)) in sums {
            out.entry(c).or_default().push((t, s / n as f64));
        }
    }
    Ok(out)
}

/// Spearman correlation of every code's next-day return with the factor
/// returns realised over the same day. Codes with fewer than `min_obs`
/// dates are skipped; their number is returned alongside.
pub fn code_factor_exposure(hist: &AssignmentHistory, panel: &PanelDataset, min_obs: usize) -> Result<(Vec<ExposureRow>, usize)> {
    let series = code_returns(hist, panel)?;
    let p = panel.n_priors;
    let (thick, thin): (Vec<_>, Vec<_>) = series.into_iter().partition(|(_, s)| s.len() >= min_obs);
    let rows = thick
        .par_iter()
        .map(|(code, s)| {
            let rets: Vec<f64> = s.iter().map(|x| x.1).collect();
            let mut rho: Vec<(usize, f64)> = (0..p)
                .filter_map(|j| {
                    let f: Vec<f64> = s.iter().map(|&(t, _)| panel.factor_returns[(t + 1) * p + j]).collect();
                    spearman(&rets, &f).map(|r| (j, r))
                })
                .collect();
            rho.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
            rho.truncate(3);
            ExposureRow {
                code: *code,
                n_obs: s.len(),
                top: rho,
            }
        })
        .collect();
    if !thin.is_empty() {
        log::info!("{} codes with fewer than {min_obs} observations skipped", thin.len());
    }
    Ok((rows, thin.len()))
}

/// Mean gate weight per date and expert, `[D, M_e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationPanel {
    pub dates: Vec<NaiveDate>,
    pub n_experts: usize,
    pub values: Vec<f64>,
}

impl ActivationPanel {
    pub fn from_predictions(rows: &[PredictionRow], n_experts: usize) -> Result<Self> {
        let mut acc: BTreeMap<NaiveDate, (Vec<f64>, usize)> = BTreeMap::new();
        for r in rows {
            if r.experts.is_empty() {
                return Err(Error::Data(format!(
                    "prediction for {} on {} carries no routing; use a single-seed prediction file",
                    r.ticker, r.date
                )));
            }
            let e = acc.entry(r.date).or_insert_with(|| (vec![0.0; n_experts], 0));
            for (&j, &w) in r.experts.iter().zip(&r.gate_weights) {
                if j >= n_experts {
                    return Err(Error::Data(format!("expert index {j} outside 0..{n_experts}")));
                }
                e.0[j] += w;
            }
            e.1 += 1;
        }
        let dates = acc.keys().copied().collect();
        let values = acc
            .into_values()
            .flat_map(|(v, n)| v.into_iter().map(move |x| x / n as f64))
            .collect();
        Ok(ActivationPanel {
            dates,
            n_experts,
            values,
        })
    }

    pub fn series(&self, e: usize) -> Vec<f64> {
        self.values.iter().skip(e).step_by(self.n_experts).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSpikes {
    pub mean: f64,
    pub std: f64,
    /// Date indices with activation above `mean + 1.5 std`.
    pub spikes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeReport {
    pub experts: Vec<ExpertSpikes>,
    /// Symmetric `[M_e, M_e]` Jaccard overlap of spike-date sets; NaN where
    /// both sets are empty.
    pub jaccard: Vec<f64>,
    /// Mean over distinct pairs with a non-empty union.
    pub mean_pairwise_jaccard: f64,
}

/// Spike dates per series (population standard deviation; none when the
/// deviation is zero).
pub fn spike_dates(series: &[f64], sigmas: f64) -> ExpertSpikes {
    let mean = stats::mean(series);
    let std = stats::pop_var(series).sqrt();
    let spikes = if std > 0.0 {
        let cut = mean + sigmas * std;
        series.iter().enumerate().filter(|(_, &v)| v > cut).map(|(t, _)| t).collect()
    } else {
        Vec::new()
    };
    ExpertSpikes { mean, std, spikes }
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return f64::NAN;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

pub fn expert_spikes(act: &ActivationPanel) -> Result<SpikeReport> {
    if act.dates.len() < 2 {
        return Err(Error::Data("spike detection needs at least two dates".into()));
    }
    let m = act.n_experts;
    let experts: Vec<ExpertSpikes> = (0..m).map(|e| spike_dates(&act.series(e), SPIKE_SIGMAS)).collect();
    let mut jac = vec![0.0; m * m];
    let mut pairs = Vec::new();
    for a in 0..m {
        for b in 0..m {
            jac[a * m + b] = jaccard(&experts[a].spikes, &experts[b].spikes);
            if a < b && jac[a * m + b].is_finite() {
                pairs.push(jac[a * m + b]);
            }
        }
    }
    Ok(SpikeReport {
        experts,
        jaccard: jac,
        mean_pairwise_jaccard: if pairs.is_empty() { f64::NAN } else { stats::mean(&pairs) },
    })
}

/// Signed-rank tests between every pair of expert activation series.
pub fn pairwise_wilcoxon(act: &ActivationPanel) -> Vec<(usize, usize, WilcoxonResult)> {
    let m = act.n_experts;
    let mut out = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            out.push((a, b, wilcoxon_signed_rank(&act.series(a), &act.series(b))));
        }
    }
    out
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e.to_string()))
}

/// Matrix form: header `from,<code>...`, one row per source code.
pub fn write_transitions(s: &TransitionSummary, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let err = csv_err(path);
    let mut hdr = vec!["from".to_string()];
    hdr.extend(s.codes.iter().map(usize::to_string));
    w.write_record(&hdr).map_err(&err)?;
    let k = s.codes.len();
    for (r, c) in s.codes.iter().enumerate() {
        let mut rec = vec![c.to_string()];
        rec.extend(s.matrix[r * k..(r + 1) * k].iter().map(f64::to_string));
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `horizon,n_codes,persistence,entropy,uniform_baseline`.
pub fn write_persistence(rows: &[TransitionSummary], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let err = csv_err(path);
    w.write_record(["horizon", "n_codes", "persistence", "entropy", "uniform_baseline"])
        .map_err(&err)?;
    for s in rows {
        let k = s.codes.len();
        w.write_record([
            s.horizon.to_string(),
            k.to_string(),
            s.persistence.to_string(),
            s.entropy.to_string(),
            (1.0 / k as f64).to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `code,n_obs,F1,rho1,F2,rho2,F3,rho3`; factors are named `p01`, `p02`, …
pub fn write_exposures(rows: &[ExposureRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let err = csv_err(path);
    w.write_record(["code", "n_obs", "F1", "rho1", "F2", "rho2", "F3", "rho3"])
        .map_err(&err)?;
    for r in rows {
        let mut rec = vec![r.code.to_string(), r.n_obs.to_string()];
        for k in 0..3 {
            match r.top.get(k) {
                Some((j, rho)) => rec.extend([format!("p{:02}", j + 1), rho.to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `date,e1..eM`.
pub fn write_activation(act: &ActivationPanel, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let err = csv_err(path);
    let mut hdr = vec!["date".to_string()];
    hdr.extend((1..=act.n_experts).map(|e| format!("e{e}")));
    w.write_record(&hdr).map_err(&err)?;
    for (t, d) in act.dates.iter().enumerate() {
        let mut rec = vec![d.to_string()];
        rec.extend(act.values[t * act.n_experts..(t + 1) * act.n_experts].iter().map(f64::to_string));
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `expert,mean_activation,std_activation,n_spikes,spike_rate,spike_dates`
/// followed by `jaccard` rows `expert_a,expert_b,value` in a second file.
pub fn write_spikes(rep: &SpikeReport, dates: &[NaiveDate], spikes: &Path, overlap: &Path) -> Result<()> {
    let mut w = writer(spikes)?;
    let err = csv_err(spikes);
    w.write_record(["expert", "mean_activation", "std_activation", "n_spikes", "spike_rate", "spike_dates"])
        .map_err(&err)?;
    for (e, s) in rep.experts.iter().enumerate() {
        let list: Vec<String> = s.spikes.iter().map(|&t| dates[t].to_string()).collect();
        w.write_record([
            format!("e{}", e + 1),
            s.mean.to_string(),
            s.std.to_string(),
            s.spikes.len().to_string(),
            (s.spikes.len() as f64 / dates.len() as f64).to_string(),
            list.join(";"),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(spikes, e))?;

    let mut w = writer(overlap)?;
    let err = csv_err(overlap);
    w.write_record(["expert_a", "expert_b", "jaccard"]).map_err(&err)?;
    let m = rep.experts.len();
    for a in 0..m {
        for b in a + 1..m {
            w.write_record([format!("e{}", a + 1), format!("e{}", b + 1), rep.jaccard[a * m + b].to_string()])
                .map_err(&err)?;
        }
    }
    w.write_record(["mean", "", &rep.mean_pairwise_jaccard.to_string()]).map_err(&err)?;
    w.flush().map_err(|e| Error::io(overlap, e))
}

/// `expert_a,expert_b,n,statistic,p_value,method`.
pub fn write_wilcoxon(rows: &[(usize, usize, WilcoxonResult)], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let err = csv_err(path);
    w.write_record(["expert_a", "expert_b", "n", "statistic", "p_value", "method"])
        .map_err(&err)?;
    for (a, b, r) in rows {
        w.write_record([
            format!("e{}", a + 1),
            format!("e{}", b + 1),
            r.n.to_string(),
            r.statistic.to_string(),
            r.p_value.to_string(),
            if r.exact { "exact" } else { "normal" }.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ModelRng;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn history(codes: Vec<Vec<usize>>) -> AssignmentHistory {
        let d = codes.len();
        let n = codes[0].len();
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        AssignmentHistory {
            dates: (0..d).map(|t| start + chrono::Days::new(t as u64)).collect(),
            tickers: (0..n).map(|i| format!("T{i}")).collect(),
            codes: codes.into_iter().flatten().map(Some).collect(),
        }
    }

    #[test]
    fn constant_assignments_persist() {
        let h = history(vec![vec![0, 1, 2, 1]; 30]);
        let s = code_transition_matrix(&h, 5, TOP_CODES).unwrap();
        assert_eq!(s.codes, vec![0, 1, 2]);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(s.matrix[r * 3 + c], if r == c { 1.0 } else { 0.0 });
            }
        }
        assert_eq!((s.persistence, s.entropy), (1.0, 0.0));
    }

    #[test]
    fn alternation_is_a_permutation() {
        let rows: Vec<Vec<usize>> = (0..20).map(|t| vec![t % 2, (t + 1) % 2]).collect();
        let s = code_transition_matrix(&history(rows), 1, TOP_CODES).unwrap();
        assert_eq!(s.persistence, 0.0);
        assert_eq!(s.entropy, 0.0);
    }

    #[test]
    fn random_assignments_hit_the_uniform_baseline() {
        let mut rng = ModelRng::seed_from_u64(0);
        let k = 10;
        let rows: Vec<Vec<usize>> = (0..400).map(|_| (0..50).map(|_| rng.random_range(0..k)).collect()).collect();
        let s = code_transition_matrix(&history(rows), 1, k).unwrap();
        assert!((s.persistence - 0.1).abs() < 0.01, "{}", s.persistence);
        assert!(s.entropy <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn top_codes_keep_the_most_active() {
        let rows: Vec<Vec<usize>> = (0..10).map(|_| vec![5, 5, 5, 2, 2, 9]).collect();
        let s = code_transition_matrix(&history(rows), 1, 2).unwrap();
        assert_eq!(s.codes, vec![2, 5]);
    }

    proptest! {
        #[test]
        fn transition_rows_are_stochastic(
            seed in 0u64..500,
            k in 1usize..6,
            h in 1usize..4,
        ) {
            let mut rng = ModelRng::seed_from_u64(seed);
            let rows: Vec<Vec<usize>> = (0..12).map(|_| (0..7).map(|_| rng.random_range(0..k)).collect()).collect();
            let s = code_transition_matrix(&history(rows), h, TOP_CODES).unwrap();
            let kk = s.codes.len();
            for r in 0..kk {
                let sum: f64 = s.matrix[r * kk..(r + 1) * kk].iter().sum();
                prop_assert!(s.row_counts[r] == 0 || (sum - 1.0).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&s.persistence));
            prop_assert!(s.entropy >= 0.0 && s.entropy <= (kk as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn purity_counts_majorities() {
        let h = history(vec![vec![0, 0, 1, 1], vec![0, 1, 1, 1]]);
        let truth: HashMap<String, usize> = [("T0", 0), ("T1", 0), ("T2", 1), ("T3", 1)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        // code 0: {0,0,0}; code 1: {1,1,0,1,1}
        assert!((cluster_purity(&h, &truth) - 7.0 / 8.0).abs() < 1e-12);
    }

    fn factor_panel(d: usize, n: usize, p: usize, seed: u64) -> (PanelDataset, Vec<usize>) {
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut factors = vec![0.0; d * p];
        for v in factors.iter_mut().skip(p) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v = 0.01 * e;
        }
        let group: Vec<usize> = (0..n).map(|i| i % p).collect();
        let mut close = vec![100.0; d * n];
        for t in 1..d {
            for i in 0..n {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let r = factors[t * p + group[i]] + 0.002 * noise;
                close[t * n + i] = close[(t - 1) * n + i] * (1.0 + r);
            }
        }
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let panel = PanelDataset {
            dates: (0..d).map(|t| start + chrono::Days::new(t as u64)).collect(),
            tickers: (0..n).map(|i| format!("T{i}")).collect(),
            n_features: 1,
            features: vec![0.0; d * n],
            open: close.clone(),
            close,
            member: vec![true; d * n],
            n_priors: p,
            factor_returns: factors,
        };
        (panel, group)
    }

    #[test]
    fn planted_code_loads_on_its_factor() {
        let (panel, group) = factor_panel(120, 12, 3, 1);
        let d = panel.n_dates() - 1;
        let h = AssignmentHistory {
            dates: panel.dates[..d].to_vec(),
            tickers: panel.tickers.clone(),
            codes: (0..d).flat_map(|_| group.iter().map(|&g| Some(g))).collect(),
        };
        let (rows, thin) = code_factor_exposure(&h, &panel, MIN_EXPOSURE_OBS).unwrap();
        assert_eq!(thin, 0);
        for r in &rows {
            assert_eq!(r.top[0].0, r.code);
            assert!(r.top[0].1 > 0.9, "{r:?}");
            assert_eq!(r.top.len(), 3);
        }
        let short = AssignmentHistory {
            dates: h.dates[..10].to_vec(),
            codes: h.codes[..10 * 12].to_vec(),
            ..h
        };
        let (rows, thin) = code_factor_exposure(&short, &panel, MIN_EXPOSURE_OBS).unwrap();
        assert!(rows.is_empty());
        assert_eq!(thin, 3);
    }

    #[test]
    fn identical_series_correlate_perfectly() {
        let (mut panel, _) = factor_panel(60, 4, 2, 2);
        let d = panel.n_dates() - 1;
        let h = AssignmentHistory {
            dates: panel.dates[..d].to_vec(),
            tickers: panel.tickers.clone(),
            codes: vec![Some(0); d * 4],
        };
        let series = code_returns(&h, &panel).unwrap();
        for &(t, r) in &series[&0] {
            panel.factor_returns[(t + 1) * 2 + 1] = r;
        }
        let (rows, _) = code_factor_exposure(&h, &panel, MIN_EXPOSURE_OBS).unwrap();
        assert_eq!(rows[0].top[0].0, 1);
        assert!((rows[0].top[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn activation_rows_average_gate_weights() {
        let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let mk = |t: &str, e: Vec<usize>, w: Vec<f64>| PredictionRow {
            date: d,
            ticker: t.into(),
            code_index: Some(0),
            experts: e,
            gate_weights: w,
            ..Default::default()
        };
        let rows = vec![mk("A", vec![0, 2], vec![0.7, 0.3]), mk("B", vec![1, 0], vec![0.6, 0.4])];
        let act = ActivationPanel::from_predictions(&rows, 3).unwrap();
        assert_eq!(act.values, vec![0.55, 0.3, 0.15]);
        assert!((act.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ActivationPanel::from_predictions(&rows, 2).is_err());
    }

    #[test]
    fn spikes_and_overlap() {
        assert!(spike_dates(&[0.5; 10], SPIKE_SIGMAS).spikes.is_empty());
        let a = vec![1, 4, 7];
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &[2, 3]), 0.0);
        assert_eq!(jaccard(&a, &[4, 7, 9]), 0.5);
        assert!(jaccard(&[], &[]).is_nan());
    }

    #[test]
    fn gaussian_panels_spike_at_the_tail_rate() {
        let mut rng = ModelRng::seed_from_u64(11);
        let days = 100_000;
        let act = ActivationPanel {
            dates: vec![NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(); days],
            n_experts: 2,
            values: (0..2 * days).map(|_| StandardNormal.sample(&mut rng)).collect(),
        };
        let rep = expert_spikes(&act).unwrap();
        for e in &rep.experts {
            let rate = e.spikes.len() as f64 / days as f64;
            assert!((rate - 0.0668).abs() < 0.015, "{rate}");
        }
        assert_eq!(rep.jaccard[1], rep.jaccard[2]);
    }
}
