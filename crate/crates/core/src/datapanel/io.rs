use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use chrono::NaiveDate;

use super::PanelDataset;
use crate::error::{Error, Result};

fn ingest(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Ingest {
        file: path.display().to_string(),
        line: line as usize,
        msg: msg.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn headers(path: &Path, rdr: &mut csv::Reader<std::fs::File>) -> Result<Vec<String>> {
    Ok(rdr
        .headers()
        .map_err(|e| ingest(path, 1, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect())
}

fn parse_date(path: &Path, line: u64, s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|_| ingest(path, line, format!("invalid date '{s}'")))
}

fn parse_num(path: &Path, line: u64, col: &str, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| ingest(path, line, format!("non-numeric value '{s}' in column {col}")))
}

/// Like [`parse_num`] but empty and NaN-like cells are missing values.
fn parse_opt(path: &Path, line: u64, col: &str, s: &str) -> Result<f64> {
    match s.trim() {
        "" | "NaN" | "nan" | "NA" | "null" => Ok(f64::NAN),
        other => parse_num(path, line, col, other),
    }
}

fn parse_member(path: &Path, line: u64, s: &str) -> Result<bool> {
    match s.trim() {
        "1" | "true" | "True" | "TRUE" => Ok(true),
        "0" | "false" | "False" | "FALSE" => Ok(false),
        other => Err(ingest(path, line, format!("invalid member flag '{other}'"))),
    }
}

struct PriceRow {
    open: f64,
    close: f64,
    member: bool,
}

/// Reads the three panel CSV files and forward-fills missing features.
///
/// The prices file defines the date × ticker grid. Cells absent from the
/// prices file are non-members whose prices carry the nearest observed value.
pub fn load_panel(features: &Path, prices: &Path, priors: &Path) -> Result<PanelDataset> {
    // prices
    let mut rdr = open_csv(prices)?;
    let hdr = headers(prices, &mut rdr)?;
    if hdr != ["date", "ticker", "open", "close", "member"] {
        return Err(ingest(prices, 1, "header must be date,ticker,open,close,member"));
    }
    let mut price_rows: HashMap<(NaiveDate, String), PriceRow> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ingest(prices, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 5 {
            return Err(ingest(prices, line, format!("expected 5 fields, found {}", rec.len())));
        }
        let date = parse_date(prices, line, &rec[0])?;
        let ticker = rec[1].trim().to_string();
        let row = PriceRow {
            open: parse_num(prices, line, "open", &rec[2])?,
            close: parse_num(prices, line, "close", &rec[3])?,
            member: parse_member(prices, line, &rec[4])?,
        };
        if price_rows.insert((date, ticker.clone()), row).is_some() {
            return Err(ingest(prices, line, format!("duplicate row for ({date}, {ticker})")));
        }
    }
    let dates: Vec<NaiveDate> = price_rows.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
    let tickers: Vec<String> = price_rows
        .keys()
        .map(|k| k.1.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (d, n) = (dates.len(), tickers.len());
    let didx: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let tidx: HashMap<&str, usize> = tickers.iter().enumerate().map(|(i, x)| (x.as_str(), i)).collect();

    let mut open = vec![f64::NAN; d * n];
    let mut close = vec![f64::NAN; d * n];
    let mut member = vec![false; d * n];
    for ((date, ticker), row) in &price_rows {
        let k = didx[date] * n + tidx[ticker.as_str()];
        open[k] = row.open;
        close[k] = row.close;
        member[k] = row.member;
    }
    for i in 0..n {
        fill_gaps(&mut open, d, n, i);
        fill_gaps(&mut close, d, n, i);
    }

    // features
    let mut rdr = open_csv(features)?;
    let hdr = headers(features, &mut rdr)?;
    if hdr.len() < 3 || hdr[0] != "date" || hdr[1] != "ticker" {
        return Err(ingest(features, 1, "header must be date,ticker,<feature columns>"));
    }
    let c = hdr.len() - 2;
    let mut feats = vec![f64::NAN; d * n * c];
    let mut seen = vec![false; d * n];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ingest(features, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != c + 2 {
            return Err(ingest(features, line, format!("expected {} fields, found {}", c + 2, rec.len())));
        }
        let date = parse_date(features, line, &rec[0])?;
        let ticker = rec[1].trim();
        let (Some(&t), Some(&i)) = (didx.get(&date), tidx.get(ticker)) else {
            return Err(ingest(
                features,
                line,
                format!("({date}, {ticker}) has no row in {}", prices.display()),
            ));
        };
        if std::mem::replace(&mut seen[t * n + i], true) {
            return Err(ingest(features, line, format!("duplicate row for ({date}, {ticker})")));
        }
        for f in 0..c {
            feats[(t * n + i) * c + f] = parse_opt(features, line, &hdr[f + 2], &rec[f + 2])?;
        }
    }

    // priors
    let mut rdr = open_csv(priors)?;
    let hdr = headers(priors, &mut rdr)?;
    if hdr.is_empty() || hdr[0] != "date" {
        return Err(ingest(priors, 1, "header must be date,<factor columns>"));
    }
    let p = hdr.len() - 1;
    let mut factor_returns = vec![f64::NAN; d * p];
    let mut prior_seen = vec![false; d];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ingest(priors, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != p + 1 {
            return Err(ingest(priors, line, format!("expected {} fields, found {}", p + 1, rec.len())));
        }
        let date = parse_date(priors, line, &rec[0])?;
        let Some(&t) = didx.get(&date) else {
            return Err(ingest(priors, line, format!("date {date} is not in {}", prices.display())));
        };
        if std::mem::replace(&mut prior_seen[t], true) {
            return Err(ingest(priors, line, format!("duplicate row for {date}")));
        }
        for j in 0..p {
            factor_returns[t * p + j] = parse_num(priors, line, &hdr[j + 1], &rec[j + 1])?;
        }
    }
    if let Some(t) = prior_seen.iter().position(|s| !s) {
        return Err(ingest(priors, 0, format!("missing row for date {}", dates[t])));
    }

    let mut panel = PanelDataset {
        dates,
        tickers,
        n_features: c,
        features: feats,
        open,
        close,
        member,
        n_priors: p,
        factor_returns,
    };
    panel.forward_fill();
    panel.validate()?;
    Ok(panel)
}

/// Forward then backward fill of one stock's price column.
fn fill_gaps(x: &mut [f64], d: usize, n: usize, i: usize) {
    let mut last = f64::NAN;
    for t in 0..d {
        if x[t * n + i].is_nan() {
            x[t * n + i] = last;
        } else {
            last = x[t * n + i];
        }
    }
    let mut next = f64::NAN;
    for t in (0..d).rev() {
        if x[t * n + i].is_nan() {
            x[t * n + i] = next;
        } else {
            next = x[t * n + i];
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn create(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Writes `features.csv`, `prices.csv` and `priors.csv` into `dir`.
/// Values use the shortest round-trip decimal form, so reloading is exact.
pub fn write_panel(panel: &PanelDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, n, c, p) = (panel.n_dates(), panel.n_stocks(), panel.n_features, panel.n_priors);

    let path = dir.join("features.csv");
    let mut w = create(&path)?;
    let mut hdr = vec!["date".to_string(), "ticker".to_string()];
    hdr.extend((1..=c).map(|f| format!("f{f:03}")));
    w.write_record(&hdr).map_err(|e| csv_err(&path, e))?;
    for t in 0..d {
        let ds = panel.dates[t].format("%Y-%m-%d").to_string();
        for i in 0..n {
            let mut rec = vec![ds.clone(), panel.tickers[i].clone()];
            rec.extend(panel.feature(t, i).iter().map(|&v| fmt_num(v)));
            w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("prices.csv");
    let mut w = create(&path)?;
    w.write_record(["date", "ticker", "open", "close", "member"])
        .map_err(|e| csv_err(&path, e))?;
    for t in 0..d {
        let ds = panel.dates[t].format("%Y-%m-%d").to_string();
        for i in 0..n {
            let k = t * n + i;
            w.write_record([
                ds.clone(),
                panel.tickers[i].clone(),
                fmt_num(panel.open[k]),
                fmt_num(panel.close[k]),
                (panel.member[k] as u8).to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("priors.csv");
    let mut w = create(&path)?;
    let mut hdr = vec!["date".to_string()];
    hdr.extend((1..=p).map(|j| format!("p{j:02}")));
    w.write_record(&hdr).map_err(|e| csv_err(&path, e))?;
    for t in 0..d {
        let mut rec = vec![panel.dates[t].format("%Y-%m-%d").to_string()];
        rec.extend((0..p).map(|j| fmt_num(panel.factor_returns[t * p + j])));
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// One row of a prediction file. Only `date`, `ticker` and `score` are
/// required on input; the decomposition and routing columns are optional.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionRow {
    pub date: NaiveDate,
    pub ticker: String,
    pub score: f64,
    pub alpha: f64,
    pub prior_term: f64,
    pub latent_term: f64,
    pub code_index: Option<usize>,
    pub experts: Vec<usize>,
    pub gate_weights: Vec<f64>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rdr = open_csv(path)?;
    let hdr = headers(path, &mut rdr)?;
    let col = |name: &str| hdr.iter().position(|h| h == name);
    let (Some(ci_date), Some(ci_ticker), Some(ci_score)) = (col("date"), col("ticker"), col("score")) else {
        return Err(ingest(path, 1, "prediction file needs date, ticker and score columns"));
    };
    let ci_alpha = col("alpha");
    let ci_prior = col("prior_term");
    let ci_latent = col("latent_term");
    let ci_code = col("code_index");
    let expert_cols: Vec<usize> = (1..).map_while(|k| col(&format!("expert_top{k}"))).collect();
    let gate_cols: Vec<usize> = (1..).map_while(|k| col(&format!("gate_w{k}"))).collect();
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| ingest(path, line, e.to_string()))?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let opt = |c: Option<usize>, name: &str| -> Result<f64> {
            c.map_or(Ok(f64::NAN), |c| parse_opt(path, line, name, get(c)))
        };
        let date = parse_date(path, line, get(ci_date))?;
        let ticker = get(ci_ticker).trim().to_string();
        if !seen.insert((date, ticker.clone())) {
            return Err(ingest(path, line, format!("duplicate row for {ticker} on {date}")));
        }
        let parse_idx = |c: usize, name: &str| -> Result<usize> {
            get(c).trim()
                .parse::<usize>()
                .map_err(|_| ingest(path, line, format!("invalid index '{}' in column {name}", get(c))))
        };
        let code_index = match ci_code {
            Some(c) if !get(c).trim().is_empty() => Some(parse_idx(c, "code_index")?),
            _ => None,
        };
        rows.push(PredictionRow {
            date,
            ticker,
            score: parse_opt(path, line, "score", get(ci_score))?,
            alpha: opt(ci_alpha, "alpha")?,
            prior_term: opt(ci_prior, "prior_term")?,
            latent_term: opt(ci_latent, "latent_term")?,
            code_index,
            experts: expert_cols.iter().map(|&c| parse_idx(c, "expert")).collect::<Result<_>>()?,
            gate_weights: gate_cols
                .iter()
                .map(|&c| parse_num(path, line, "gate", get(c)))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Writes rows in the order given. The number of expert and gate columns is
/// taken from the first row.
pub fn write_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.experts.len());
    let mut w = create(path)?;
    let mut hdr: Vec<String> = ["date", "ticker", "score", "alpha", "prior_term", "latent_term", "code_index"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    hdr.extend((1..=k).map(|j| format!("expert_top{j}")));
    hdr.extend((1..=k).map(|j| format!("gate_w{j}")));
    w.write_record(&hdr).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let mut rec = vec![
            r.date.format("%Y-%m-%d").to_string(),
            r.ticker.clone(),
            fmt_num(r.score),
            fmt_num(r.alpha),
            fmt_num(r.prior_term),
            fmt_num(r.latent_term),
            r.code_index.map(|c| c.to_string()).unwrap_or_default(),
        ];
        rec.extend(r.experts.iter().map(|e| e.to_string()));
        rec.extend(r.gate_weights.iter().map(|&v| fmt_num(v)));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    const PRICES: &str = "date,ticker,open,close,member\n\
        2021-01-04,AAA,10,10.5,1\n2021-01-04,BBB,20,19,1\n\
        2021-01-05,AAA,10.5,11,1\n2021-01-05,BBB,19,19.5,1\n";
    const FEATURES: &str = "date,ticker,f001,f002\n\
        2021-01-04,AAA,0.5,1.25\n2021-01-04,BBB,-1,2\n\
        2021-01-05,AAA,0.75,\n2021-01-05,BBB,3,4\n";
    const PRIORS: &str = "date,p01\n2021-01-04,0.01\n2021-01-05,-0.02\n";

    #[test]
    fn minimal_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "f.csv", FEATURES);
        let pr = write(dir.path(), "p.csv", PRICES);
        let q = write(dir.path(), "q.csv", PRIORS);
        let panel = load_panel(&f, &pr, &q).unwrap();
        assert_eq!(panel.tickers, vec!["AAA", "BBB"]);
        assert_eq!(panel.feature(0, 0), &[0.5, 1.25]);
        // forward-filled from the previous date
        assert_eq!(panel.feature(1, 0), &[0.75, 1.25]);
        assert_eq!(panel.close, vec![10.5, 19.0, 11.0, 19.5]);

        let out = tempfile::tempdir().unwrap();
        write_panel(&panel, out.path()).unwrap();
        let again = load_panel(
            &out.path().join("features.csv"),
            &out.path().join("prices.csv"),
            &out.path().join("priors.csv"),
        )
        .unwrap();
        assert_eq!(panel, again);
    }

    #[test]
    fn shuffled_rows_load_identically() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "f.csv", FEATURES);
        let pr = write(dir.path(), "p.csv", PRICES);
        let q = write(dir.path(), "q.csv", PRIORS);
        let mut lines: Vec<&str> = FEATURES.lines().collect();
        lines[1..].reverse();
        let f2 = write(dir.path(), "f2.csv", &(lines.join("\n") + "\n"));
        let mut plines: Vec<&str> = PRICES.lines().collect();
        plines[1..].rotate_left(1);
        let pr2 = write(dir.path(), "p2.csv", &(plines.join("\n") + "\n"));
        assert_eq!(load_panel(&f, &pr, &q).unwrap(), load_panel(&f2, &pr2, &q).unwrap());
    }

    #[test]
    fn ingestion_errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "f.csv", FEATURES);
        let q = write(dir.path(), "q.csv", PRIORS);
        let dup = write(dir.path(), "dup.csv", &format!("{PRICES}2021-01-05,BBB,19,19.5,1\n"));
        let err = load_panel(&f, &dup, &q).unwrap_err().to_string();
        assert!(err.contains("dup.csv:6") && err.contains("duplicate"), "{err}");

        let bad = write(dir.path(), "bad.csv", &PRICES.replace("10.5,11", "x,11"));
        let err = load_panel(&f, &bad, &q).unwrap_err().to_string();
        assert!(err.contains("bad.csv:4") && err.contains("non-numeric"), "{err}");

        let pr = write(dir.path(), "p.csv", PRICES);
        let mis = write(dir.path(), "mis.csv", &FEATURES.replace("2021-01-05,BBB", "2021-01-06,BBB"));
        let err = load_panel(&mis, &pr, &q).unwrap_err().to_string();
        assert!(err.contains("mis.csv:5"), "{err}");
    }

    #[test]
    fn predictions_round_trip_and_minimal_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let d = NaiveDate::from_ymd_opt(2022, 3, 1).unwrap();
        let rows = vec![
            PredictionRow {
                date: d,
                ticker: "AAA".into(),
                score: 0.25,
                alpha: 0.01,
                prior_term: 0.1,
                latent_term: 0.14,
                code_index: Some(3),
                experts: vec![1, 0],
                gate_weights: vec![0.75, 0.25],
            },
            PredictionRow {
                date: d,
                ticker: "BBB".into(),
                score: -1.5,
                code_index: Some(0),
                experts: vec![0, 1],
                gate_weights: vec![0.5, 0.5],
                ..Default::default()
            },
        ];
        let path = dir.path().join("pred.csv");
        write_predictions(&rows, &path).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1], rows[1]);

        let minimal = write(dir.path(), "m.csv", "date,ticker,score\n2022-03-01,AAA,1\n");
        let m = read_predictions(&minimal).unwrap();
        assert_eq!(m[0].code_index, None);
        assert!(m[0].experts.is_empty());
    }
}
