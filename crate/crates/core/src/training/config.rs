use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;

use crate::backtest::BacktestConfig;
use crate::datapanel::{PrepareConfig, SplitSpec, SyntheticConfig, PRIOR_WINDOW};
use crate::error::{Error, Result};
use crate::spatial::SpatialConfig;
use crate::temporal::TemporalConfig;

/// Optimisation settings shared by both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub patience: usize,
    /// Final learning-rate multiplier of the linear decay.
    pub lr_floor: f64,
    /// Step-size multiplier of the stage-1 codewords, which otherwise trail
    /// the moving encoder output.
    pub codebook_lr_scale: f64,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            max_epochs: 50,
            clip_norm: 1.0,
            patience: 15,
            lr_floor: 0.1,
            codebook_lr_scale: 10.0,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0 && self.codebook_lr_scale > 0.0) {
            return Err(Error::Config(
                "learning rate, codebook step scale and clip norm must be positive".into(),
            ));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "need 1 ≤ patience ({}) ≤ max epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return Err(Error::Config(format!("lr floor {} outside (0, 1]", self.lr_floor)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// Data preparation keys in flat form.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub lookback: usize,
    pub prior_window: usize,
    pub train_frac: f64,
    pub valid_frac: f64,
    pub train_end: Option<NaiveDate>,
    pub valid_end: Option<NaiveDate>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            lookback: 20,
            prior_window: PRIOR_WINDOW,
            train_frac: 0.6,
            valid_frac: 0.2,
            train_end: None,
            valid_end: None,
        }
    }
}

impl DataConfig {
    pub fn prepare(&self) -> Result<PrepareConfig> {
        let split = match (self.train_end, self.valid_end) {
            (Some(train_end), Some(valid_end)) => SplitSpec::Dates { train_end, valid_end },
            (None, None) => SplitSpec::Fractions {
                train: self.train_frac,
                valid: self.valid_frac,
            },
            _ => return Err(Error::Config("set both train_end and valid_end, or neither".into())),
        };
        Ok(PrepareConfig {
            lookback: self.lookback,
            prior_window: self.prior_window,
            split,
        })
    }
}

/// Everything a run needs, with a flat `key = value` text form. Width
/// fields that follow from the data (lookback, feature and prior counts,
/// code width in stage 2) are filled in when models are built.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub spatial: SpatialConfig,
    pub temporal: TemporalConfig,
    pub train: TrainConfig,
    pub backtest: BacktestConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            spatial: SpatialConfig::new(20, 0, 0),
            temporal: TemporalConfig::new(20, 0, 0, 0),
            train: TrainConfig::default(),
            backtest: BacktestConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn format_value(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
display_value!(usize, u64, f32, f64);

impl ConfigValue for Option<NaiveDate> {
    fn parse_value(s: &str) -> Option<Self> {
        if s.is_empty() || s == "none" {
            return Some(None);
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().map(Some)
    }
    fn format_value(&self) -> String {
        self.map_or("none".into(), |d| d.format("%Y-%m-%d").to_string())
    }
}

impl ConfigValue for Vec<u64> {
    fn parse_value(s: &str) -> Option<Self> {
        s.split(',').map(|p| p.trim().parse().ok()).collect()
    }
    fn format_value(&self) -> String {
        self.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    }
}

fn parse<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse_value(value).ok_or_else(|| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl RunConfig {
            /// Every recognised key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse(key, value)?,)*
                    _ => return Err(Error::Usage(format!(
                        "unknown config key `{key}`; valid keys: {}", Self::KEYS.join(", ")
                    ))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.format_value())),*]
            }
        }
    };
}

config_keys! {
    "lookback" => data.lookback;
    "prior_window" => data.prior_window;
    "train_frac" => data.train_frac;
    "valid_frac" => data.valid_frac;
    "train_end" => data.train_end;
    "valid_end" => data.valid_end;
    "d_s" => spatial.d_s;
    "spatial_heads" => spatial.heads;
    "spatial_d_ff" => spatial.d_ff;
    "spatial_dropout" => spatial.dropout;
    "codebook_size" => spatial.codebook_size;
    "dec_hidden" => spatial.dec_hidden;
    "dec_t0" => spatial.dec_t0;
    "aux_hidden" => spatial.aux_hidden;
    "lambda_commit" => spatial.lambda_commit;
    "lambda_contra" => spatial.lambda_contra;
    "lambda_pred" => spatial.lambda_pred;
    "tau" => spatial.tau;
    "ema_decay" => spatial.ema_decay;
    "dead_threshold" => spatial.dead_threshold;
    "dead_patience" => spatial.dead_patience;
    "d_t" => temporal.d_t;
    "temporal_heads" => temporal.heads;
    "temporal_d_ff" => temporal.d_ff;
    "temporal_dropout" => temporal.dropout;
    "trend_window" => temporal.trend_window;
    "n_experts" => temporal.n_experts;
    "top_k" => temporal.top_k;
    "d_moe" => temporal.d_moe;
    "lambda_balance" => temporal.lambda_balance;
    "lambda_reg" => temporal.lambda_reg;
    "lr" => train.lr;
    "weight_decay" => train.weight_decay;
    "max_epochs" => train.max_epochs;
    "clip_norm" => train.clip_norm;
    "patience" => train.patience;
    "lr_floor" => train.lr_floor;
    "codebook_lr_scale" => train.codebook_lr_scale;
    "seeds" => train.seeds;
    "k_port" => backtest.k_port;
    "n_drop" => backtest.n_drop;
    "buy_bps" => backtest.buy_bps;
    "sell_bps" => backtest.sell_bps;
    "syn_stocks" => synthetic.n_stocks;
    "syn_dates" => synthetic.n_dates;
    "syn_clusters" => synthetic.n_clusters;
    "syn_snr" => synthetic.snr;
    "syn_factors" => synthetic.n_factors;
    "syn_features" => synthetic.n_features;
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Ingest {
            file: origin.into(),
            line: no + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Per-market pairs: heads, experts, top-k and balance weight.
    pub fn apply_market(&mut self, market: &str) -> Result<()> {
        let (heads, m_e, k, bal) = match market {
            "csi-style" => (2, 2, 1, 1e-2),
            "sp-style" => (4, 8, 4, 1e-3),
            _ => {
                return Err(Error::Usage(format!(
                    "unknown market `{market}`; use csi-style or sp-style"
                )))
            }
        };
        self.temporal.heads = heads;
        self.spatial.heads = heads;
        self.temporal.n_experts = m_e;
        self.temporal.top_k = k;
        self.temporal.lambda_balance = bal;
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (k, v) in parse_kv(text, origin)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Spatial model settings for a panel of the given widths.
    pub fn spatial_for(&self, n_features: usize, n_priors: usize) -> SpatialConfig {
        SpatialConfig {
            lookback: self.data.lookback,
            n_features,
            n_priors,
            ..self.spatial.clone()
        }
    }

    pub fn temporal_for(&self, n_features: usize, n_priors: usize) -> TemporalConfig {
        TemporalConfig {
            lookback: self.data.lookback,
            n_features,
            n_priors,
            d_s: self.spatial.d_s,
            ..self.temporal.clone()
        }
    }

    /// Checks everything that does not depend on the panel.
    pub fn validate(&self) -> Result<()> {
        self.data.prepare()?;
        self.train.validate()?;
        self.backtest.validate()?;
        self.spatial_for(1, 1).validate()?;
        self.temporal_for(1, 1).validate()?;
        Ok(())
    }

    /// Small model suited to a laptop-scale synthetic run.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.spatial.d_s = 32;
        c.spatial.d_ff = 64;
        c.spatial.codebook_size = 64;
        c.spatial.dec_hidden = 32;
        c.spatial.aux_hidden = 32;
        c.temporal.d_t = 32;
        c.temporal.d_ff = 64;
        c.temporal.d_moe = 32;
        c.train.lr = 1e-3;
        c.train.max_epochs = 6;
        c.train.patience = 3;
        c.train.seeds = vec![0];
        c.backtest.k_port = 30;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut c = RunConfig::desk();
        c.data.train_end = NaiveDate::from_ymd_opt(2016, 3, 1);
        c.data.valid_end = NaiveDate::from_ymd_opt(2016, 9, 1);
        c.train.seeds = vec![3, 1];
        let text = c.to_text();
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        let mut back = RunConfig::default();
        back.apply_text(&text, "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_map(&c.to_map()).unwrap(), c);
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\nlr = 0.5 # inline\n  top_k=2\n", "mem").unwrap();
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.temporal.top_k, 2);
        assert!(matches!(c.set("nope", "1"), Err(Error::Usage(_))));
        assert!(matches!(c.set("lr", "fast"), Err(Error::Config(_))));
        let err = c.apply_text("lr 0.1\n", "x.conf").unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 1, .. }));
    }

    #[test]
    fn defaults_validate_and_markets_switch_routing() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        let mut c = RunConfig::default();
        c.apply_market("sp-style").unwrap();
        assert_eq!((c.temporal.heads, c.temporal.n_experts, c.temporal.top_k), (4, 8, 4));
        assert_eq!(c.temporal.lambda_balance, 1e-3);
        c.validate().unwrap();
        assert!(c.apply_market("moon").is_err());
        c.train.patience = 99;
        assert!(c.validate().is_err());
    }
}
