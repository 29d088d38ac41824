//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "PVQCKPT1"
//! version   u32      1
//! meta_len  u64      length of the JSON metadata
//! meta      JSON     stage, epoch, seed, widths, config map, rng state
//! n_records u32
//! record*   u16 name length, UTF-8 name, u8 rank, rank × u64 dims,
//!           prod(dims) × f64 values (row-major)
//! ```
//!
//! Record names are `spatial/<param>`, `temporal/<param>`,
//! `spatial/ema.usage`, `spatial/ema.dead_streak` and `meta/history`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use serde_json::{json, Value};

use super::config::RunConfig;
use crate::diffcore::{ModelRng, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::spatial::SpatialModel;
use crate::temporal::TemporalModel;

pub const MAGIC: &[u8; 8] = b"PVQCKPT1";
pub const VERSION: u32 = 1;

/// Position of the training random stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ModelRng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ModelRng {
        let mut r = ModelRng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: u8,
    /// Epoch whose parameters are stored (the best one).
    pub epoch: usize,
    pub seed: u64,
    pub config: RunConfig,
    pub n_features: usize,
    pub n_priors: usize,
    pub spatial: SpatialModel,
    pub temporal: Option<TemporalModel>,
    pub rng: RngState,
    /// Validation criterion per completed epoch.
    pub history: Vec<f64>,
}

/// Seed of the stage-2 model initialisation, kept apart from stage 1.
pub fn temporal_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn push_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: impl Iterator<Item = f64>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_store(out: &mut Vec<u8>, prefix: &str, store: &ParamStore) {
    for p in store.iter() {
        let values = p.value.data().iter().map(|&v| v as f64);
        push_record(out, &format!("{prefix}/{}", p.name), p.value.shape(), values);
    }
}

fn fill_store(store: &mut ParamStore, prefix: &str, records: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
    for p in store.params_mut() {
        let key = format!("{prefix}/{}", p.name);
        let (shape, values) = records.remove(&key).ok_or_else(|| corrupt(format!("missing record {key}")))?;
        if shape != p.value.shape() {
            return Err(corrupt(format!(
                "record {key} has shape {shape:?}, model expects {:?}",
                p.value.shape()
            )));
        }
        p.value = Tensor::new(shape, values.into_iter().map(|v| v as Real).collect());
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = json!({
            "stage": self.stage,
            "epoch": self.epoch,
            "seed": self.seed,
            "n_features": self.n_features,
            "n_priors": self.n_priors,
            "config": self.config.to_map(),
            "rng": {
                "seed": self.rng.seed.iter().map(|b| format!("{b:02x}")).collect::<String>(),
                "stream": self.rng.stream,
                "word_pos": self.rng.word_pos.to_string(),
            },
        });
        let meta = serde_json::to_vec(&meta).expect("metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let n_records = self.spatial.store.len()
            + self.temporal.as_ref().map_or(0, |t| t.store.len())
            + 3;
        out.extend_from_slice(&(n_records as u32).to_le_bytes());
        push_store(&mut out, "spatial", &self.spatial.store);
        let ema = &self.spatial.ema;
        push_record(&mut out, "spatial/ema.usage", &[ema.usage.len()], ema.usage.iter().copied());
        push_record(
            &mut out,
            "spatial/ema.dead_streak",
            &[ema.dead_streak.len()],
            ema.dead_streak.iter().map(|&s| s as f64),
        );
        if let Some(t) = &self.temporal {
            push_store(&mut out, "temporal", &t.store);
        }
        push_record(&mut out, "meta/history", &[self.history.len()], self.history.iter().copied());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: Value =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(format!("bad metadata: {e}")))?;
        let n_records = r.u32()?;
        let mut records = BTreeMap::new();
        for _ in 0..n_records {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("record name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            records.insert(name, (shape, values));
        }
        if r.pos != buf.len() {
            return Err(corrupt("trailing bytes after the last record"));
        }

        let field = |k: &str| meta.get(k).ok_or_else(|| corrupt(format!("metadata lacks `{k}`")));
        let num = |k: &str| field(k)?.as_u64().ok_or_else(|| corrupt(format!("metadata `{k}` is not an integer")));
        let stage = num("stage")? as u8;
        let epoch = num("epoch")? as usize;
        let seed = num("seed")?;
        let n_features = num("n_features")? as usize;
        let n_priors = num("n_priors")? as usize;
        let map: BTreeMap<String, String> = serde_json::from_value(field("config")?.clone())
            .map_err(|e| corrupt(format!("bad config map: {e}")))?;
        let config = RunConfig::from_map(&map)?;
        let rng = field("rng")?;
        let hex = rng["seed"].as_str().ok_or_else(|| corrupt("rng seed missing"))?;
        let mut rseed = [0u8; 32];
        if hex.len() != 64 {
            return Err(corrupt("rng seed must be 32 bytes"));
        }
        for (i, b) in rseed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| corrupt("rng seed is not hex"))?;
        }
        let rng = RngState {
            seed: rseed,
            stream: rng["stream"].as_u64().ok_or_else(|| corrupt("rng stream missing"))?,
            word_pos: rng["word_pos"]
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| corrupt("rng position missing"))?,
        };

        let mut spatial = SpatialModel::new(config.spatial_for(n_features, n_priors), seed)?;
        fill_store(&mut spatial.store, "spatial", &mut records)?;
        let k = spatial.cfg.codebook_size;
        let take_vec = |records: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>, key: &str, len: usize| {
            let (shape, v) = records.remove(key).ok_or_else(|| corrupt(format!("missing record {key}")))?;
            if shape != [len] {
                return Err(corrupt(format!("record {key} has shape {shape:?}")));
            }
            Ok(v)
        };
        spatial.ema.usage = take_vec(&mut records, "spatial/ema.usage", k)?;
        spatial.ema.dead_streak = take_vec(&mut records, "spatial/ema.dead_streak", k)?
            .into_iter()
            .map(|v| v as usize)
            .collect();
        let temporal = if stage >= 2 {
            let mut t = TemporalModel::new(config.temporal_for(n_features, n_priors), temporal_seed(seed))?;
            fill_store(&mut t.store, "temporal", &mut records)?;
            Some(t)
        } else {
            None
        };
        let hist_len = records.get("meta/history").map_or(0, |r| r.1.len());
        let history = take_vec(&mut records, "meta/history", hist_len)?;
        if let Some(extra) = records.keys().next() {
            return Err(corrupt(format!("unexpected record {extra}")));
        }
        Ok(Checkpoint {
            stage,
            epoch,
            seed,
            config,
            n_features,
            n_priors,
            spatial,
            temporal,
            rng,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
