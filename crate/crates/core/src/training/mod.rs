//! Two-stage training: optimiser, schedule, early stopping, the frozen
//! codebook hand-off between stages, checkpoints and seed ensembling.

mod checkpoint;
mod config;
mod optim;
mod stages;

pub use checkpoint::{temporal_seed, Checkpoint, RngState, MAGIC, VERSION};
pub use config::{parse_kv, DataConfig, RunConfig, TrainConfig};
pub use optim::{clip_global_norm, grad_norm, lr_multiplier, AdamW, EarlyStopping, Goal, StopSignal};
pub use stages::{
    predict, purged, seed_ensemble, stage1_step, stage2_step, train_stage1, train_stage2, EpochLog, StageRun,
    TrainingLog, STAGE1_COMPONENTS, STAGE2_COMPONENTS,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapanel::{synthetic_generate, PredictionRow, PreparedPanel, SyntheticConfig, TargetNeed};
    use crate::diffcore::nn::Mode;
    use crate::diffcore::{Graph, ModelRng};
    use crate::spatial::SpatialModel;
    use crate::temporal::TemporalModel;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::desk();
        c.data.lookback = 8;
        c.spatial.d_s = 4;
        c.spatial.d_ff = 8;
        c.spatial.codebook_size = 4;
        c.spatial.dec_hidden = 4;
        c.spatial.dec_t0 = 2;
        c.spatial.aux_hidden = 4;
        c.temporal.d_t = 4;
        c.temporal.d_ff = 8;
        c.temporal.d_moe = 4;
        c.train.max_epochs = 3;
        c.train.patience = 2;
        c
    }

    fn tiny_panel() -> PreparedPanel {
        let syn = SyntheticConfig {
            n_stocks: 10,
            n_dates: 130,
            n_clusters: 2,
            n_features: 4,
            n_factors: 2,
            ..Default::default()
        };
        let (panel, _) = synthetic_generate(&syn).unwrap();
        PreparedPanel::new(panel, &tiny_config().data.prepare().unwrap()).unwrap()
    }

    #[test]
    fn stage_two_leaves_stage_one_untouched_and_runs_are_reproducible() {
        let prep = tiny_panel();
        let cfg = tiny_config();
        let s1 = train_stage1(&prep, &cfg, 7).unwrap();
        let before = s1.checkpoint.spatial.store.digest();
        let codebook_before = s1.checkpoint.spatial.store.value(s1.checkpoint.spatial.codebook).clone();
        let s2 = train_stage2(&prep, &s1.checkpoint, &cfg, 7).unwrap();
        assert_eq!(s2.checkpoint.spatial.store.digest(), before);
        assert_eq!(
            s2.checkpoint.spatial.store.value(s2.checkpoint.spatial.codebook),
            &codebook_before
        );
        assert_eq!(s1.checkpoint.stage, 1);
        assert_eq!(s2.checkpoint.stage, 2);
        assert_eq!(s2.log.rows.len(), 2 * s2.epochs_run);

        let again1 = train_stage1(&prep, &cfg, 7).unwrap();
        let again2 = train_stage2(&prep, &again1.checkpoint, &cfg, 7).unwrap();
        assert_eq!(again1.checkpoint.to_bytes(), s1.checkpoint.to_bytes());
        assert_eq!(again2.checkpoint.to_bytes(), s2.checkpoint.to_bytes());

        let rows = predict(&s2.checkpoint, &prep, prep.splits.test.clone()).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.score.is_finite() && r.code_index.is_some()));
        assert!(predict(&s1.checkpoint, &prep, prep.splits.test.clone()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_validation() {
        let prep = tiny_panel();
        let cfg = tiny_config();
        let s1 = train_stage1(&prep, &cfg, 3).unwrap();
        let s2 = train_stage2(&prep, &s1.checkpoint, &cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        s2.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), s2.checkpoint.to_bytes());
        assert_eq!(back.rng, s2.checkpoint.rng);
        assert_eq!(back.history.len(), s2.checkpoint.history.len());
        let range = prep.splits.valid.clone();
        let a = predict(&s2.checkpoint, &prep, range.clone()).unwrap();
        let b = predict(&back, &prep, range).unwrap();
        assert_eq!(a, b);

        let mut bytes = s2.checkpoint.to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let full = s2.checkpoint.to_bytes();
        assert!(Checkpoint::from_bytes(&full[..full.len() - 3]).is_err());
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut r = ModelRng::seed_from_u64(5);
        r.set_stream(1);
        for _ in 0..7 {
            r.random::<u64>();
        }
        let mut back = RngState::capture(&r).restore();
        assert_eq!(r.random::<u64>(), back.random::<u64>());
    }

    #[test]
    fn stage_two_rejects_a_checkpoint_from_another_panel() {
        let prep = tiny_panel();
        let cfg = tiny_config();
        let mut s1 = train_stage1(&prep, &cfg, 1).unwrap().checkpoint;
        s1.n_features += 1;
        assert!(matches!(
            train_stage2(&prep, &s1, &cfg, 1),
            Err(crate::error::Error::Usage(_))
        ));
    }

    #[test]
    #[should_panic(expected = "frozen")]
    fn frozen_stage_one_store_rejects_updates() {
        let prep = tiny_panel();
        let cfg = tiny_config();
        let mut m = SpatialModel::new(cfg.spatial_for(prep.n_features(), prep.n_priors()), 0).unwrap();
        let mut opt = AdamW::new(&m.store, 0.01);
        m.store.freeze();
        opt.update(&mut m.store, 1e-3);
    }

    #[test]
    fn single_batch_descent_within_fifty_steps() {
        let prep = tiny_panel();
        let cfg = tiny_config();
        let b = prep.batch(prep.splits.train.start + 40, TargetNeed::All).unwrap();
        let mut rng = ModelRng::seed_from_u64(0);

        let mut sm = SpatialModel::new(cfg.spatial_for(prep.n_features(), prep.n_priors()), 0).unwrap();
        sm.cfg.dropout = 0.0;
        let eval1 = |m: &SpatialModel| {
            let mut g = Graph::new();
            let p = m.forward(&mut g, &m.store, &b, &mut Mode::Infer);
            g.value(p.total).item()
        };
        let start = eval1(&sm);
        let mut opt = AdamW::new(&sm.store, 0.0);
        let mut dropped = false;
        for _ in 0..50 {
            stage1_step(&mut sm, &mut opt, &b, 1e-2, 1.0, &mut rng);
            dropped |= eval1(&sm) < start;
        }
        assert!(dropped);

        let a = sm.assign(&b);
        let mut tcfg = cfg.temporal_for(prep.n_features(), prep.n_priors());
        tcfg.dropout = 0.0;
        let mut tm = TemporalModel::new(tcfg, 1).unwrap();
        let eval2 = |m: &TemporalModel| {
            let mut g = Graph::new();
            let p = m.forward(&mut g, &m.store, &b, &a, &mut Mode::Infer);
            g.value(p.total).item()
        };
        let start = eval2(&tm);
        let mut opt = AdamW::new(&tm.store, 0.0);
        let mut dropped = false;
        for _ in 0..50 {
            stage2_step(&mut tm, &mut opt, &b, &a, 1e-2, 1.0, &mut rng);
            dropped |= eval2(&tm) < start;
        }
        assert!(dropped);
    }

    fn row(d: u32, t: &str, s: f64) -> PredictionRow {
        PredictionRow {
            date: NaiveDate::from_ymd_opt(2020, 1, d).unwrap(),
            ticker: t.into(),
            score: s,
            ..Default::default()
        }
    }

    #[test]
    fn ensemble_identity_symmetry_and_mean() {
        let a = vec![row(1, "A", 0.3), row(1, "B", -1.2), row(2, "A", 0.7)];
        let single = seed_ensemble(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.iter().map(|r| r.score).collect::<Vec<_>>(), vec![0.3, -1.2, 0.7]);
        let neg: Vec<PredictionRow> = a.iter().map(|r| row(r.date.format("%d").to_string().parse().unwrap(), &r.ticker, -r.score)).collect();
        assert!(seed_ensemble(&[a.clone(), neg]).unwrap().iter().all(|r| r.score == 0.0));

        let mut rng = ModelRng::seed_from_u64(4);
        let keys: Vec<(u32, String)> = (1..=6).flat_map(|d| ["A", "B", "C"].map(|t| (d, t.to_string()))).collect();
        let runs: Vec<Vec<PredictionRow>> = (0..5)
            .map(|_| keys.iter().map(|(d, t)| row(*d, t, rng.random_range(-1.0..1.0))).collect())
            .collect();
        // later files in another order
        let mut shuffled = runs.clone();
        shuffled[3].reverse();
        let ens = seed_ensemble(&shuffled).unwrap();
        for (j, r) in ens.iter().enumerate() {
            let want = runs.iter().map(|run| run[j].score).sum::<f64>() / 5.0;
            assert!((r.score - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_reports_missing_keys() {
        let a = vec![row(1, "A", 0.3), row(1, "B", -1.2)];
        let b = vec![row(1, "A", 0.1), row(1, "C", 0.0)];
        let err = seed_ensemble(&[a, b]).unwrap_err().to_string();
        assert!(err.contains("2020-01-01/B") && err.contains("2020-01-01/C"), "{err}");
    }

    #[test]
    fn purge_trims_the_horizon() {
        assert_eq!(purged(10..50, 9), 10..41);
        assert_eq!(purged(10..15, 9), 10..10);
    }
}
