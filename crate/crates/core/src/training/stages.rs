use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

use super::checkpoint::{temporal_seed, Checkpoint, RngState};
use super::config::RunConfig;
use super::optim::{clip_global_norm, lr_multiplier, AdamW, EarlyStopping, Goal, StopSignal};
use crate::datapanel::{DateBatch, PredictionRow, PreparedPanel, TargetNeed, AUX_HORIZONS, MAIN_HORIZON};
use crate::diffcore::nn::Mode;
use crate::diffcore::{Graph, ModelRng, Var};
use crate::error::{Error, Result};
use crate::evaluation::spearman;
use crate::spatial::{code_counts, perplexity, CodeAssignment, SpatialModel};
use crate::stats;
use crate::temporal::TemporalModel;

pub const STAGE1_COMPONENTS: [&str; 4] = ["recon", "vq", "contra", "pred"];
pub const STAGE2_COMPONENTS: [&str; 3] = ["mse", "balance", "reg"];

/// One line of the per-epoch training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: &'static str,
    pub loss_total: f64,
    pub components: Vec<f64>,
    pub skipped_steps: u64,
    /// Validation criterion; NaN on training rows.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLog {
    pub components: Vec<&'static str>,
    pub rows: Vec<EpochLog>,
}

impl TrainingLog {
    /// CSV with header `epoch,split,loss_total,<components>,skipped_steps,metric`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(f);
        let err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
        let mut hdr = vec!["epoch", "split", "loss_total"];
        hdr.extend(&self.components);
        hdr.extend(["skipped_steps", "metric"]);
        w.write_record(&hdr).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.epoch.to_string(), r.split.to_string(), r.loss_total.to_string()];
            rec.extend(r.components.iter().map(f64::to_string));
            rec.push(r.skipped_steps.to_string());
            rec.push(r.metric.to_string());
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Result of one training stage: the best-epoch checkpoint and its log.
#[derive(Clone, Debug)]
pub struct StageRun {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
    pub epochs_run: usize,
}

/// `range` without its last `horizon` dates, whose targets would read
/// prices from the following split.
pub fn purged(range: Range<usize>, horizon: usize) -> Range<usize> {
    range.start..range.end.saturating_sub(horizon).max(range.start)
}

fn batches(prep: &PreparedPanel, range: Range<usize>, need: TargetNeed, what: &str) -> Result<Vec<DateBatch>> {
    let out: Vec<DateBatch> = range.filter_map(|t| prep.batch(t, need)).collect();
    if out.is_empty() {
        return Err(Error::Data(format!("no usable {what} dates")));
    }
    Ok(out)
}

fn training_rng(seed: u64) -> ModelRng {
    let mut r = ModelRng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

fn value(g: &Graph, v: Var) -> f64 {
    g.value(v).item() as f64
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let k = rows.first().map_or(0, Vec::len);
    (0..k)
        .map(|j| {
            let v: Vec<f64> = rows.iter().map(|r| r[j]).filter(|x| x.is_finite()).collect();
            stats::mean(&v)
        })
        .collect()
}

/// Stage-1 losses `[total, recon, vq, contra, pred]` of one date.
fn stage1_losses(g: &Graph, pass: &crate::spatial::SpatialPass) -> Vec<f64> {
    vec![
        value(g, pass.total),
        value(g, pass.recon),
        value(g, pass.vq),
        value(g, pass.contra),
        pass.pred.map_or(f64::NAN, |p| value(g, p)),
    ]
}

/// One optimisation step of stage 1 on one date, including the codebook
/// usage update. Returns the losses before the step and whether it applied.
pub fn stage1_step(
    model: &mut SpatialModel,
    opt: &mut AdamW,
    b: &DateBatch,
    lr: f64,
    clip: f64,
    rng: &mut ModelRng,
) -> (Vec<f64>, bool) {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &model.store, b, &mut Mode::Train(rng));
    let losses = stage1_losses(&g, &pass);
    model.store.zero_grad();
    g.backward_into(pass.total, &mut model.store);
    clip_global_norm(&mut model.store, clip);
    let applied = opt.update(&mut model.store, lr);
    let z = g.value(pass.z).data().to_vec();
    let cb = model.codebook;
    let reset = model.ema.update(&mut model.store, cb, &pass.codes, &z, rng);
    if !reset.is_empty() {
        log::debug!("reset {} dead codes", reset.len());
    }
    (losses, applied)
}

pub fn train_stage1(prep: &PreparedPanel, cfg: &RunConfig, seed: u64) -> Result<StageRun> {
    cfg.validate()?;
    let tc = &cfg.train;
    let (nf, np) = (prep.n_features(), prep.n_priors());
    let mut model = SpatialModel::new(cfg.spatial_for(nf, np), seed)?;
    let train = batches(prep, purged(prep.splits.train.clone(), AUX_HORIZONS), TargetNeed::All, "training")?;
    let valid = batches(prep, purged(prep.splits.valid.clone(), AUX_HORIZONS), TargetNeed::All, "validation")?;
    let mut rng = training_rng(seed);
    let mut opt = AdamW::new(&model.store, tc.weight_decay);
    opt.set_lr_scale(model.codebook, tc.codebook_lr_scale);
    let mut stop = EarlyStopping::new(Goal::Minimize, tc.patience);
    let mut best = (model.store.clone(), model.ema.clone());
    let mut log = TrainingLog {
        components: STAGE1_COMPONENTS.to_vec(),
        rows: Vec::new(),
    };
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;
    for epoch in 0..tc.max_epochs {
        let lr = tc.lr * lr_multiplier(epoch, tc.max_epochs, tc.lr_floor);
        order.shuffle(&mut rng);
        let skipped0 = opt.skipped;
        let mut rows = Vec::with_capacity(train.len());
        for &i in &order {
            rows.push(stage1_step(&mut model, &mut opt, &train[i], lr, tc.clip_norm, &mut rng).0);
        }
        let tr = mean_rows(&rows);
        log.rows.push(EpochLog {
            epoch,
            split: "train",
            loss_total: tr[0],
            components: tr[1..].to_vec(),
            skipped_steps: opt.skipped - skipped0,
            metric: f64::NAN,
        });

        let vrows: Vec<(Vec<f64>, Vec<usize>)> = valid
            .par_iter()
            .map(|b| {
                let mut g = Graph::new();
                let pass = model.forward(&mut g, &model.store, b, &mut Mode::Infer);
                (stage1_losses(&g, &pass), pass.codes)
            })
            .collect();
        let va = mean_rows(&vrows.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
        let k = model.cfg.codebook_size;
        let mut counts = vec![0; k];
        for (_, codes) in &vrows {
            for (c, n) in counts.iter_mut().zip(code_counts(codes, k)) {
                *c += n;
            }
        }
        log::info!(
            "stage 1 seed {seed} epoch {epoch}: train {:.5} valid {:.5} perplexity {:.2} dead {:.2}",
            tr[0],
            va[0],
            perplexity(&counts),
            model.ema.dead_fraction()
        );
        log.rows.push(EpochLog {
            epoch,
            split: "valid",
            loss_total: va[0],
            components: va[1..].to_vec(),
            skipped_steps: 0,
            metric: va[0],
        });
        history.push(va[0]);
        epochs_run = epoch + 1;
        match stop.observe(epoch, va[0]) {
            StopSignal::Improved => best = (model.store.clone(), model.ema.clone()),
            StopSignal::Continue => {}
            StopSignal::Stop => break,
        }
    }
    model.store.copy_values_from(&best.0);
    model.ema = best.1;
    Ok(StageRun {
        checkpoint: Checkpoint {
            stage: 1,
            epoch: stop.best_epoch,
            seed,
            config: cfg.clone(),
            n_features: nf,
            n_priors: np,
            spatial: model,
            temporal: None,
            rng: RngState::capture(&rng),
            history,
        },
        log,
        epochs_run,
    })
}

/// One stage-2 optimisation step; returns `[total, mse, balance, reg]`
/// before the step and whether it applied.
pub fn stage2_step(
    model: &mut TemporalModel,
    opt: &mut AdamW,
    b: &DateBatch,
    assign: &CodeAssignment,
    lr: f64,
    clip: f64,
    rng: &mut ModelRng,
) -> (Vec<f64>, bool) {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &model.store, b, assign, &mut Mode::Train(rng));
    let losses = vec![
        value(&g, pass.total),
        value(&g, pass.mse),
        value(&g, pass.balance),
        value(&g, pass.reg),
    ];
    model.store.zero_grad();
    g.backward_into(pass.total, &mut model.store);
    clip_global_norm(&mut model.store, clip);
    let applied = opt.update(&mut model.store, lr);
    (losses, applied)
}

/// Mean daily rank correlation of inference scores with raw main-horizon
/// returns, plus the mean inference loss rows.
fn stage2_validate(model: &TemporalModel, valid: &[DateBatch], assigns: &[CodeAssignment]) -> (f64, Vec<f64>) {
    let per_day: Vec<(Option<f64>, Vec<f64>)> = valid
        .par_iter()
        .zip(assigns)
        .map(|(b, a)| {
            let mut g = Graph::new();
            let pass = model.forward(&mut g, &model.store, b, a, &mut Mode::Infer);
            let scores: Vec<f64> = g.value(pass.y_hat).data().iter().map(|&v| v as f64).collect();
            let losses = vec![
                value(&g, pass.total),
                value(&g, pass.mse),
                value(&g, pass.balance),
                value(&g, pass.reg),
            ];
            (spearman(&scores, &b.y_raw), losses)
        })
        .collect();
    let ics: Vec<f64> = per_day.iter().filter_map(|d| d.0).collect();
    let ic = if ics.is_empty() { f64::NAN } else { stats::mean(&ics) };
    (ic, mean_rows(&per_day.into_iter().map(|d| d.1).collect::<Vec<_>>()))
}

pub fn train_stage2(prep: &PreparedPanel, stage1: &Checkpoint, cfg: &RunConfig, seed: u64) -> Result<StageRun> {
    cfg.validate()?;
    let tc = &cfg.train;
    let (nf, np) = (prep.n_features(), prep.n_priors());
    if (stage1.n_features, stage1.n_priors) != (nf, np) || stage1.spatial.cfg.lookback != cfg.data.lookback {
        return Err(Error::Usage(format!(
            "stage-1 checkpoint was trained on {} features, {} priors and lookback {}; \
             this panel has {nf}, {np} and {}. Retrain stage 1 on this panel",
            stage1.n_features, stage1.n_priors, stage1.spatial.cfg.lookback, cfg.data.lookback
        )));
    }
    let mut spatial = stage1.spatial.clone();
    spatial.store.freeze();
    let frozen_digest = spatial.store.digest();

    let tcfg = crate::temporal::TemporalConfig {
        d_s: spatial.cfg.d_s,
        ..cfg.temporal_for(nf, np)
    };
    let mut model = TemporalModel::new(tcfg, temporal_seed(seed))?;
    let train = batches(prep, purged(prep.splits.train.clone(), MAIN_HORIZON), TargetNeed::Main, "training")?;
    let valid = batches(prep, purged(prep.splits.valid.clone(), MAIN_HORIZON), TargetNeed::Main, "validation")?;
    let train_codes: Vec<CodeAssignment> = train.par_iter().map(|b| spatial.assign(b)).collect();
    let valid_codes: Vec<CodeAssignment> = valid.par_iter().map(|b| spatial.assign(b)).collect();

    let mut rng = training_rng(temporal_seed(seed));
    let mut opt = AdamW::new(&model.store, tc.weight_decay);
    let mut stop = EarlyStopping::new(Goal::Maximize, tc.patience);
    let mut best = model.store.clone();
    let mut log = TrainingLog {
        components: STAGE2_COMPONENTS.to_vec(),
        rows: Vec::new(),
    };
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;
    for epoch in 0..tc.max_epochs {
        let lr = tc.lr * lr_multiplier(epoch, tc.max_epochs, tc.lr_floor);
        order.shuffle(&mut rng);
        let skipped0 = opt.skipped;
        let rows: Vec<Vec<f64>> = order
            .iter()
            .map(|&i| stage2_step(&mut model, &mut opt, &train[i], &train_codes[i], lr, tc.clip_norm, &mut rng).0)
            .collect();
        let tr = mean_rows(&rows);
        log.rows.push(EpochLog {
            epoch,
            split: "train",
            loss_total: tr[0],
            components: tr[1..].to_vec(),
            skipped_steps: opt.skipped - skipped0,
            metric: f64::NAN,
        });
        let (ic, va) = stage2_validate(&model, &valid, &valid_codes);
        log::info!("stage 2 seed {seed} epoch {epoch}: train {:.5} valid {:.5} rank IC {ic:.4}", tr[0], va[0]);
        log.rows.push(EpochLog {
            epoch,
            split: "valid",
            loss_total: va[0],
            components: va[1..].to_vec(),
            skipped_steps: 0,
            metric: ic,
        });
        history.push(ic);
        epochs_run = epoch + 1;
        match stop.observe(epoch, ic) {
            StopSignal::Improved => best = model.store.clone(),
            StopSignal::Continue => {}
            StopSignal::Stop => break,
        }
    }
    model.store.copy_values_from(&best);
    assert_eq!(
        spatial.store.digest(),
        frozen_digest,
        "stage-1 parameters changed during stage-2 training"
    );
    Ok(StageRun {
        checkpoint: Checkpoint {
            stage: 2,
            epoch: stop.best_epoch,
            seed,
            config: cfg.clone(),
            n_features: nf,
            n_priors: np,
            spatial,
            temporal: Some(model),
            rng: RngState::capture(&rng),
            history,
        },
        log,
        epochs_run,
    })
}

/// Inference-mode predictions for every usable date in `range`, in date
/// then panel order.
pub fn predict(ckpt: &Checkpoint, prep: &PreparedPanel, range: Range<usize>) -> Result<Vec<PredictionRow>> {
    let temporal = ckpt.temporal.as_ref().ok_or_else(|| {
        Error::Usage("prediction needs a stage-2 checkpoint; run `train --stage 2` first".into())
    })?;
    if (ckpt.n_features, ckpt.n_priors) != (prep.n_features(), prep.n_priors()) {
        return Err(Error::Usage("checkpoint widths do not match the panel".into()));
    }
    let dates: Vec<usize> = range.collect();
    let per_date: Vec<Vec<PredictionRow>> = dates
        .par_iter()
        .filter_map(|&t| prep.batch(t, TargetNeed::None))
        .map(|b| {
            let a = ckpt.spatial.assign(&b);
            let preds = temporal.predict(&b, &a);
            b.stocks
                .iter()
                .zip(preds)
                .zip(&a.codes)
                .map(|((&i, p), &code)| PredictionRow {
                    date: prep.panel.dates[b.t],
                    ticker: prep.panel.tickers[i].clone(),
                    score: p.score as f64,
                    alpha: p.alpha as f64,
                    prior_term: p.prior_term as f64,
                    latent_term: p.latent_term as f64,
                    code_index: Some(code),
                    experts: p.experts,
                    gate_weights: p.gate_weights.into_iter().map(|w| w as f64).collect(),
                })
                .collect()
        })
        .collect();
    Ok(per_date.into_iter().flatten().collect())
}

/// Per-key mean of several seeds' predictions. Score and pricing terms are
/// averaged; code and routing columns are dropped because they are
/// seed-specific. Every file must cover the same `(date, ticker)` keys.
pub fn seed_ensemble(runs: &[Vec<PredictionRow>]) -> Result<Vec<PredictionRow>> {
    let first = runs.first().ok_or_else(|| Error::Usage("ensemble needs at least one prediction file".into()))?;
    let key = |r: &PredictionRow| (r.date, r.ticker.clone());
    let mut acc: BTreeMap<(NaiveDate, String), [f64; 4]> = BTreeMap::new();
    for r in first {
        acc.insert(key(r), [0.0; 4]);
    }
    for (s, run) in runs.iter().enumerate() {
        let seen: HashMap<(NaiveDate, String), &PredictionRow> = run.iter().map(|r| (key(r), r)).collect();
        let missing: Vec<String> = acc
            .keys()
            .filter(|k| !seen.contains_key(*k))
            .chain(seen.keys().filter(|k| !acc.contains_key(*k)))
            .take(10)
            .map(|(d, t)| format!("{d}/{t}"))
            .collect();
        if !missing.is_empty() || seen.len() != acc.len() {
            return Err(Error::Data(format!(
                "prediction file {} does not share keys with file 0; mismatched keys include: {}",
                s,
                missing.join(", ")
            )));
        }
        for (k, sums) in acc.iter_mut() {
            let r = seen[k];
            for (a, v) in sums.iter_mut().zip([r.score, r.alpha, r.prior_term, r.latent_term]) {
                *a += v;
            }
        }
    }
    let n = runs.len() as f64;
    Ok(first
        .iter()
        .map(|r| {
            let s = acc[&key(r)];
            PredictionRow {
                date: r.date,
                ticker: r.ticker.clone(),
                score: s[0] / n,
                alpha: s[1] / n,
                prior_term: s[2] / n,
                latent_term: s[3] / n,
                ..Default::default()
            }
        })
        .collect())
}
