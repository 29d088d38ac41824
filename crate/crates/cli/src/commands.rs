use std::collections::HashMap;
use std::path::{Path, PathBuf};

use prism_core::analysis::{self, ActivationPanel, AssignmentHistory};
use prism_core::backtest::{self, COST_REGIMES, N_DROP_GRID};
use prism_core::datapanel::{self, PanelDataset, PredictionRow, PreparedPanel};
use prism_core::diffcore::ModelRng;
use prism_core::evaluation;
use prism_core::training::{self, Checkpoint, RunConfig};
use prism_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::manifest::{io_err, Manifest};
use crate::{Analysis, Common, Market, Split, SweepMode};

pub const PANEL_FILES: [&str; 3] = ["features.csv", "prices.csv", "priors.csv"];
pub const TRUTH_FILE: &str = "truth.csv";

/// Defaults, then the config file, market, `--set` overrides and `--seed`.
pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            require(p, "pass an existing config file")?;
            RunConfig::from_file(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = common.market {
        cfg.apply_market(match m {
            Market::CsiStyle => "csi-style",
            Market::SpStyle => "sp-style",
        })?;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = &common.seed {
        cfg.set("seeds", s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("missing file {}; {hint}", path.display())))
    }
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed{seed}"))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

fn load_data(data: &Path, m: &mut Manifest) -> Result<PanelDataset> {
    let paths: Vec<PathBuf> = PANEL_FILES.iter().map(|f| data.join(f)).collect();
    for p in &paths {
        require(p, "run `prism-vq gen-data` or point --data at a panel directory")?;
        m.input(p);
    }
    datapanel::load_panel(&paths[0], &paths[1], &paths[2])
}

fn load_predictions(path: &Path, hint: &str, m: &mut Manifest) -> Result<Vec<PredictionRow>> {
    require(path, hint)?;
    m.input(path);
    datapanel::read_predictions(path)
}

fn finish(m: Manifest, out: &Path) -> Result<()> {
    let path = m.write(out)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn gen_data(common: &Common) -> Result<()> {
    let mut cfg = resolve(common)?;
    let seed = match &common.seed {
        None => 0,
        Some(_) if cfg.train.seeds.len() == 1 => cfg.train.seeds[0],
        Some(s) => return Err(Error::Usage(format!("gen-data takes a single seed, got `{s}`"))),
    };
    cfg.synthetic.seed = seed;
    cfg.synthetic.validate()?;
    let out = &common.out;
    make_dir(out)?;
    let mut m = Manifest::new("gen-data", common.config.as_deref(), &cfg, &[seed]);
    let (panel, truth) = datapanel::synthetic_generate(&cfg.synthetic)?;
    datapanel::write_panel(&panel, out)?;
    let truth_path = out.join(TRUTH_FILE);
    datapanel::write_truth(&truth, &panel, &truth_path)?;
    for f in PANEL_FILES {
        m.output(out.join(f));
    }
    m.output(truth_path);
    finish(m, out)
}

pub fn train(common: &Common, stage: u8, data: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let out = &common.out;
    let seeds = cfg.train.seeds.clone();
    let mut m = Manifest::new(format!("train-stage{stage}"), common.config.as_deref(), &cfg, &seeds);
    if stage == 2 {
        for &s in &seeds {
            require(
                &seed_dir(out, s).join("stage1.ckpt"),
                "stage 2 needs a stage-1 checkpoint; run `prism-vq train --stage 1` with the same --out and --seed first",
            )?;
        }
    }
    let panel = load_data(data, &mut m)?;
    let prep = PreparedPanel::new(panel, &cfg.data.prepare()?)?;
    for &s in &seeds {
        let dir = seed_dir(out, s);
        make_dir(&dir)?;
        let run = if stage == 1 {
            training::train_stage1(&prep, &cfg, s)?
        } else {
            let p1 = dir.join("stage1.ckpt");
            m.input(&p1);
            training::train_stage2(&prep, &Checkpoint::load(&p1)?, &cfg, s)?
        };
        log::info!(
            "seed {s}: stage {stage} ran {} epochs, best epoch {}",
            run.epochs_run,
            run.checkpoint.epoch
        );
        let ckpt = dir.join(format!("stage{stage}.ckpt"));
        let log_path = dir.join(format!("stage{stage}_log.csv"));
        run.checkpoint.save(&ckpt)?;
        run.log.write(&log_path)?;
        m.output(ckpt);
        m.output(log_path);
    }
    finish(m, out)
}

pub fn predict(common: &Common, data: &Path, split: Split) -> Result<()> {
    let cfg = resolve(common)?;
    let out = &common.out;
    let seeds = cfg.train.seeds.clone();
    let name = split_name(split);
    let mut m = Manifest::new(format!("predict-{name}"), common.config.as_deref(), &cfg, &seeds);
    let mut ckpts = Vec::new();
    for &s in &seeds {
        let p = seed_dir(out, s).join("stage2.ckpt");
        require(&p, "run `prism-vq train --stage 2` for this seed first")?;
        m.input(&p);
        ckpts.push(Checkpoint::load(&p)?);
    }
    let panel = load_data(data, &mut m)?;
    // the split and normalisation come from training, not from the command line
    let data_cfg = ckpts[0].config.data.clone();
    if let Some(c) = ckpts.iter().find(|c| c.config.data != data_cfg) {
        return Err(Error::Usage(format!(
            "seed {} was trained with different data settings than seed {}",
            c.seed, ckpts[0].seed
        )));
    }
    let prep = PreparedPanel::new(panel, &data_cfg.prepare()?)?;
    let range = match split {
        Split::Train => prep.splits.train.clone(),
        Split::Valid => prep.splits.valid.clone(),
        Split::Test => prep.splits.test.clone(),
    };
    for (ckpt, &s) in ckpts.iter().zip(&seeds) {
        let rows = training::predict(ckpt, &prep, range.clone())?;
        let path = seed_dir(out, s).join(format!("predictions_{name}.csv"));
        datapanel::write_predictions(&rows, &path)?;
        m.output(path);
    }
    finish(m, out)
}

pub fn ensemble(common: &Common, split: Split) -> Result<()> {
    let cfg = resolve(common)?;
    let out = &common.out;
    let seeds = cfg.train.seeds.clone();
    let name = split_name(split);
    let mut m = Manifest::new(format!("ensemble-{name}"), common.config.as_deref(), &cfg, &seeds);
    let mut runs = Vec::new();
    for &s in &seeds {
        let p = seed_dir(out, s).join(format!("predictions_{name}.csv"));
        runs.push(load_predictions(&p, "run `prism-vq predict` for this seed first", &mut m)?);
    }
    let rows = training::seed_ensemble(&runs)?;
    let path = out.join(format!("predictions_{name}.csv"));
    datapanel::write_predictions(&rows, &path)?;
    m.output(path);
    finish(m, out)
}

fn ensembled(out: &Path, predictions: Option<PathBuf>) -> PathBuf {
    predictions.unwrap_or_else(|| out.join("predictions_test.csv"))
}

const ENSEMBLE_HINT: &str = "run `prism-vq ensemble` first or pass --predictions";

pub fn evaluate(common: &Common, data: &Path, predictions: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common)?;
    let out = &common.out;
    make_dir(out)?;
    let mut m = Manifest::new("evaluate", common.config.as_deref(), &cfg, &cfg.train.seeds);
    let rows = load_predictions(&ensembled(out, predictions), ENSEMBLE_HINT, &mut m)?;
    let panel = load_data(data, &mut m)?;
    let prep = PreparedPanel::new(panel, &cfg.data.prepare()?)?;
    let ic = evaluation::rank_ic(&evaluation::cross_sections(&rows, &prep));
    let mut metrics = vec![("rank_ic", ic.mean()), ("rank_icir", ic.icir()), ("n_dates", ic.len() as f64)];
    let truth_path = data.join(TRUTH_FILE);
    if truth_path.is_file() {
        m.input(&truth_path);
        let (_, achievable) = datapanel::read_truth(&truth_path)?;
        let by_date: HashMap<_, _> = achievable.into_iter().collect();
        let vals: Vec<f64> = ic.dates.iter().filter_map(|d| by_date.get(d).copied()).collect();
        let mean = if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        metrics.push(("achievable_rank_ic", mean));
    }
    let metrics_path = out.join("metrics.csv");
    let daily_path = out.join("ic_daily.csv");
    evaluation::write_metrics(&metrics, &metrics_path)?;
    evaluation::write_ic_series(&ic, &daily_path)?;
    m.output(metrics_path);
    m.output(daily_path);
    finish(m, out)
}

pub fn backtest(common: &Common, data: &Path, predictions: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common)?;
    let out = &common.out;
    make_dir(out)?;
    let mut m = Manifest::new("backtest", common.config.as_deref(), &cfg, &cfg.train.seeds);
    let rows = load_predictions(&ensembled(out, predictions), ENSEMBLE_HINT, &mut m)?;
    let panel = load_data(data, &mut m)?;
    let days = backtest::days_from_predictions(&rows, &panel);
    let res = backtest::run_backtest(&days, &cfg.backtest)?;
    let daily = out.join("backtest_daily.csv");
    let summary = out.join("backtest_metrics.csv");
    backtest::write_daily(&res, &daily)?;
    evaluation::write_metrics(&backtest::metric_rows(&res.metrics), &summary)?;
    m.output(daily);
    m.output(summary);
    finish(m, out)
}

pub fn sweep(common: &Common, mode: SweepMode, data: &Path, predictions: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common)?;
    let out = &common.out;
    make_dir(out)?;
    let tag = match mode {
        SweepMode::Costs => "costs",
        SweepMode::Ndrop => "ndrop",
    };
    let mut m = Manifest::new(format!("sweep-{tag}"), common.config.as_deref(), &cfg, &cfg.train.seeds);
    let rows = load_predictions(&ensembled(out, predictions), ENSEMBLE_HINT, &mut m)?;
    let panel = load_data(data, &mut m)?;
    let days = backtest::days_from_predictions(&rows, &panel);
    let table = match mode {
        SweepMode::Costs => backtest::cost_sweep(&days, &cfg.backtest, &COST_REGIMES)?,
        SweepMode::Ndrop => {
            let grid: Vec<usize> = N_DROP_GRID.into_iter().filter(|&n| n <= cfg.backtest.k_port).collect();
            backtest::n_drop_sweep(&days, &cfg.backtest, &grid)?
        }
    };
    let path = out.join(format!("sweep_{tag}.csv"));
    backtest::write_sweep(&table, &path)?;
    m.output(path);
    finish(m, out)
}

/// Majority-vote purity after permuting cluster labels across tickers.
fn shuffled_purity(hist: &AssignmentHistory, labels: &[(String, usize)], seed: u64) -> f64 {
    let mut rng = ModelRng::seed_from_u64(seed);
    let mut clusters: Vec<usize> = labels.iter().map(|(_, c)| *c).collect();
    clusters.shuffle(&mut rng);
    let map: HashMap<String, usize> = labels.iter().map(|(t, _)| t.clone()).zip(clusters).collect();
    analysis::cluster_purity(hist, &map)
}

pub fn analyze(
    common: &Common,
    what: Analysis,
    data: &Path,
    predictions: Option<PathBuf>,
    truth: Option<PathBuf>,
) -> Result<()> {
    let cfg = resolve(common)?;
    let out = &common.out;
    make_dir(out)?;
    let tag = match what {
        Analysis::Codes => "codes",
        Analysis::Exposures => "exposures",
        Analysis::Experts => "experts",
    };
    let mut m = Manifest::new(format!("analyze-{tag}"), common.config.as_deref(), &cfg, &cfg.train.seeds);
    // ensembled scores carry no codes or gate weights, so read one seed's file
    let pred_path = predictions.unwrap_or_else(|| seed_dir(out, cfg.train.seeds[0]).join("predictions_test.csv"));
    let rows = load_predictions(&pred_path, "run `prism-vq predict` first or pass --predictions", &mut m)?;
    match what {
        Analysis::Codes => {
            let hist = AssignmentHistory::from_predictions(&rows)?;
            let mut summaries = Vec::new();
            for h in [1, analysis::MONTHLY, analysis::QUARTERLY] {
                if h >= hist.dates.len() {
                    log::warn!("horizon {h} spans the whole history of {} dates, skipped", hist.dates.len());
                    continue;
                }
                let s = analysis::code_transition_matrix(&hist, h, analysis::TOP_CODES)?;
                let path = out.join(format!("transitions_{h}.csv"));
                analysis::write_transitions(&s, &path)?;
                m.output(path);
                summaries.push(s);
            }
            let path = out.join("persistence.csv");
            analysis::write_persistence(&summaries, &path)?;
            m.output(path);
            if let Some(t) = truth {
                require(&t, "pass the truth.csv written by `prism-vq gen-data`")?;
                m.input(&t);
                let (labels, _) = datapanel::read_truth(&t)?;
                let map: HashMap<String, usize> = labels.iter().cloned().collect();
                let n_clusters = labels.iter().map(|(_, c)| c + 1).max().unwrap_or(1);
                let metrics = [
                    ("purity", analysis::cluster_purity(&hist, &map)),
                    ("shuffled_label_purity", shuffled_purity(&hist, &labels, 0)),
                    ("chance", 1.0 / n_clusters as f64),
                ];
                let path = out.join("purity.csv");
                evaluation::write_metrics(&metrics, &path)?;
                m.output(path);
            }
        }
        Analysis::Exposures => {
            let hist = AssignmentHistory::from_predictions(&rows)?;
            let panel = load_data(data, &mut m)?;
            let (table, _) = analysis::code_factor_exposure(&hist, &panel, analysis::MIN_EXPOSURE_OBS)?;
            let path = out.join("exposures.csv");
            analysis::write_exposures(&table, &path)?;
            m.output(path);
        }
        Analysis::Experts => {
            let act = ActivationPanel::from_predictions(&rows, cfg.temporal.n_experts)?;
            let rep = analysis::expert_spikes(&act)?;
            let tests = analysis::pairwise_wilcoxon(&act);
            let paths = ["expert_activation.csv", "spikes.csv", "spike_overlap.csv", "wilcoxon.csv"].map(|f| out.join(f));
            analysis::write_activation(&act, &paths[0])?;
            analysis::write_spikes(&rep, &act.dates, &paths[1], &paths[2])?;
            analysis::write_wilcoxon(&tests, &paths[3])?;
            for p in paths {
                m.output(p);
            }
        }
    }
    finish(m, out)
}
