use prism_core::analysis::{self, AssignmentHistory};
use prism_core::backtest;
use prism_core::datapanel::{self, PreparedPanel, SyntheticConfig};
use prism_core::evaluation::{cross_sections, rank_ic};
use prism_core::training::{self, Checkpoint, RunConfig};

fn small() -> (RunConfig, SyntheticConfig) {
    let mut cfg = RunConfig::desk();
    cfg.data.lookback = 8;
    cfg.spatial.d_s = 8;
    cfg.spatial.d_ff = 16;
    cfg.spatial.codebook_size = 6;
    cfg.spatial.dec_hidden = 8;
    cfg.spatial.dec_t0 = 2;
    cfg.spatial.aux_hidden = 8;
    cfg.temporal.d_t = 8;
    cfg.temporal.d_ff = 16;
    cfg.temporal.d_moe = 8;
    cfg.train.max_epochs = 3;
    cfg.train.patience = 2;
    cfg.backtest.k_port = 4;
    cfg.backtest.n_drop = 1;
    let syn = SyntheticConfig {
        n_stocks: 16,
        n_dates: 180,
        n_clusters: 2,
        n_factors: 2,
        n_features: 5,
        seed: 4,
        ..Default::default()
    };
    (cfg, syn)
}

#[test]
fn panel_files_round_trip() {
    let (_, syn) = small();
    let (panel, truth) = datapanel::synthetic_generate(&syn).unwrap();
    let dir = tempfile::tempdir().unwrap();
    datapanel::write_panel(&panel, dir.path()).unwrap();
    let back = datapanel::load_panel(
        &dir.path().join("features.csv"),
        &dir.path().join("prices.csv"),
        &dir.path().join("priors.csv"),
    )
    .unwrap();
    assert_eq!(back.dates, panel.dates);
    assert_eq!(back.tickers, panel.tickers);
    assert_eq!(back.member, panel.member);
    for (a, b) in back.close.iter().zip(&panel.close) {
        assert!((a - b).abs() <= 1e-12 * b.abs());
    }
    let tp = dir.path().join("truth.csv");
    datapanel::write_truth(&truth, &panel, &tp).unwrap();
    let (clusters, ics) = datapanel::read_truth(&tp).unwrap();
    assert_eq!(clusters.len(), syn.n_stocks);
    assert!(clusters.iter().all(|(_, c)| *c < syn.n_clusters));
    assert!(!ics.is_empty());
}

#[test]
fn two_stages_through_files_to_metrics() {
    let (cfg, syn) = small();
    let (panel, truth) = datapanel::synthetic_generate(&syn).unwrap();
    let prep = PreparedPanel::new(panel.clone(), &cfg.data.prepare().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let s1 = training::train_stage1(&prep, &cfg, 0).unwrap();
    let p1 = dir.path().join("stage1.ckpt");
    s1.checkpoint.save(&p1).unwrap();
    let s2 = training::train_stage2(&prep, &Checkpoint::load(&p1).unwrap(), &cfg, 0).unwrap();
    assert_eq!(s2.checkpoint.spatial.store.digest(), s1.checkpoint.spatial.store.digest());
    let log = dir.path().join("stage2_log.csv");
    s2.log.write(&log).unwrap();
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 1 + s2.log.rows.len());

    let rows = training::predict(&s2.checkpoint, &prep, prep.splits.test.clone()).unwrap();
    let pp = dir.path().join("predictions.csv");
    datapanel::write_predictions(&rows, &pp).unwrap();
    let back = datapanel::read_predictions(&pp).unwrap();
    assert_eq!(back.len(), rows.len());
    assert!(back.iter().zip(&rows).all(|(a, b)| a.code_index == b.code_index && a.experts == b.experts));

    let ic = rank_ic(&cross_sections(&back, &prep));
    assert!(!ic.is_empty() && ic.values.iter().all(|v| v.abs() <= 1.0));
    assert!(truth.mean_achievable_ic(prep.splits.test.clone()) > 0.0);

    let days = backtest::days_from_predictions(&back, &panel);
    let res = backtest::run_backtest(&days, &cfg.backtest).unwrap();
    assert_eq!(res.days.len(), days.len());
    assert!(res.days.iter().all(|d| d.holdings.len() == cfg.backtest.k_port));

    let hist = AssignmentHistory::from_predictions(&back).unwrap();
    let t1 = analysis::code_transition_matrix(&hist, 1, analysis::TOP_CODES).unwrap();
    assert!((0.0..=1.0).contains(&t1.persistence));
}

#[test]
fn seed_ensemble_of_real_runs_averages_scores() {
    let (cfg, syn) = small();
    let (panel, _) = datapanel::synthetic_generate(&syn).unwrap();
    let prep = PreparedPanel::new(panel, &cfg.data.prepare().unwrap()).unwrap();
    let runs: Vec<_> = [0, 1]
        .iter()
        .map(|&s| {
            let s1 = training::train_stage1(&prep, &cfg, s).unwrap();
            let s2 = training::train_stage2(&prep, &s1.checkpoint, &cfg, s).unwrap();
            training::predict(&s2.checkpoint, &prep, prep.splits.test.clone()).unwrap()
        })
        .collect();
    let ens = training::seed_ensemble(&runs).unwrap();
    assert_eq!(ens.len(), runs[0].len());
    for (e, (a, b)) in ens.iter().zip(runs[0].iter().zip(&runs[1])) {
        assert_eq!((e.date, &e.ticker), (a.date, &a.ticker));
        assert!((e.score - (a.score + b.score) / 2.0).abs() < 1e-12);
    }
}
