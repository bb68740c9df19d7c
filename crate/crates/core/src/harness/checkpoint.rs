//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSSR1"  version:u8  config_len:u64  config JSON
//! record_count:u32
//! record*: name_len:u32 name rank:u32 dims:u64*rank values:f64*prod(dims)
//! ```
//!
//! Parameters are stored under their graph names; score statistics under
//! names starting with `__stats.`.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::scoring::{Calibration, ScoreStats};
use crate::tensor::{Scalar, Tensor};

use super::config::TrainConfig;
use super::model::Model;

pub const MAGIC: &[u8; 5] = b"CSSR1";
pub const VERSION: u8 = 1;
const STATS_PREFIX: &str = "__stats.";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Record {
    fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Self {
        Record {
            name: name.into(),
            dims,
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: Vec<Record>,
    pub stats: Option<ScoreStats>,
}

fn stats_records(s: &ScoreStats) -> Vec<Record> {
    let (m, d) = (s.num_classes, s.feature_dim);
    let name = |n: &str| format!("{STATS_PREFIX}{n}");
    let mut out = vec![
        Record::new(name("mu"), vec![m, d], s.mu.concat()),
        Record::new(name("mu_tilde"), vec![m, d], s.mu_tilde.concat()),
        Record::new(name("gram"), vec![m, d, d], s.gram_templates.concat()),
        Record::new(name("gram_power"), vec![1], vec![f64::from(s.gram_power)]),
        Record::new(name("weights"), vec![3], s.weights.to_vec()),
        Record::new(
            name("empty_classes"),
            vec![s.empty_classes.len()],
            s.empty_classes.iter().map(|&c| c as f64).collect(),
        ),
    ];
    if let Some(c) = &s.calibration {
        out.push(Record::new(name("calibration"), vec![2, 3], [c.means, c.stds].concat()));
    }
    if let Some(t) = s.threshold {
        out.push(Record::new(name("threshold"), vec![1], vec![t]));
    }
    out
}

fn stats_from_records(records: &[Record]) -> Result<Option<ScoreStats>> {
    let get = |n: &str| records.iter().find(|r| r.name == format!("{STATS_PREFIX}{n}"));
    let Some(mu) = get("mu") else {
        if let Some(stray) = records.first() {
            return Err(Error::Mismatch {
                field: stray.name.clone(),
                detail: "statistics record without class means".into(),
            });
        }
        return Ok(None);
    };
    let require = |n: &str, dims: &[usize]| -> Result<&Record> {
        let r = get(n).ok_or_else(|| Error::Mismatch {
            field: format!("{STATS_PREFIX}{n}"),
            detail: "missing".into(),
        })?;
        if r.dims != dims {
            return Err(Error::Mismatch {
                field: r.name.clone(),
                detail: format!("expected dims {dims:?}, found {:?}", r.dims),
            });
        }
        Ok(r)
    };
    let [m, d] = mu.dims[..] else {
        return Err(Error::Mismatch {
            field: mu.name.clone(),
            detail: format!("expected rank 2, found dims {:?}", mu.dims),
        });
    };
    let rows = |r: &Record, width: usize| r.values.chunks(width).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let mu_tilde = require("mu_tilde", &[m, d])?;
    let gram = require("gram", &[m, d, d])?;
    let power = require("gram_power", &[1])?.values[0];
    let weights = require("weights", &[3])?;
    let empty = get("empty_classes").map(|r| r.values.iter().map(|&v| v as usize).collect()).unwrap_or_default();
    let calibration = match get("calibration") {
        Some(_) => {
            let c = require("calibration", &[2, 3])?;
            Some(Calibration {
                means: [c.values[0], c.values[1], c.values[2]],
                stds: [c.values[3], c.values[4], c.values[5]],
            })
        }
        None => None,
    };
    let threshold = match get("threshold") {
        Some(_) => Some(require("threshold", &[1])?.values[0]),
        None => None,
    };
    Ok(Some(ScoreStats {
        num_classes: m,
        feature_dim: d,
        mu: rows(mu, d),
        mu_tilde: rows(mu_tilde, d),
        gram_templates: rows(gram, d * d),
        gram_power: power as u32,
        calibration,
        weights: [weights.values[0], weights.values[1], weights.values[2]],
        threshold,
        empty_classes: empty,
    }))
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, stats: Option<&ScoreStats>) -> Self {
        let params = model
            .graph()
            .params()
            .iter()
            .map(|p| Record::new(p.name.clone(), p.value.shape().to_vec(), p.value.to_f64_vec()))
            .collect();
        Checkpoint {
            config: model.config().clone(),
            params,
            stats: stats.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let config = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        let stats = self.stats.as_ref().map(stats_records).unwrap_or_default();
        out.extend_from_slice(&((self.params.len() + stats.len()) as u32).to_le_bytes());
        for r in self.params.iter().chain(&stats) {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, not a checkpoint file".into(),
            });
        }
        let version = r.take(1, "version")?[0];
        if version != VERSION {
            return Err(Error::Format {
                offset: MAGIC.len() as u64,
                message: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let config_len = r.u64("config length")? as usize;
        let config_at = r.pos;
        let config: TrainConfig = serde_json::from_slice(r.take(config_len, "config")?).map_err(|e| Error::Format {
            offset: config_at as u64,
            message: format!("config: {e}"),
        })?;
        let count = r.u32("record count")? as usize;
        let (mut params, mut stats) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name_len = r.u32("record name length")? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(name_len, "record name")?.to_vec()).map_err(|_| Error::Format {
                offset: name_at as u64,
                message: "record name is not UTF-8".into(),
            })?;
            let rank = r.u32("record rank")? as usize;
            let dims = (0..rank).map(|_| r.u64("record dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.saturating_mul(8), &format!("values of `{name}`"))?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let rec = Record::new(name, dims, values);
            if rec.name.starts_with(STATS_PREFIX) {
                stats.push(rec);
            } else {
                params.push(rec);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes after the last record", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            config,
            params,
            stats: stats_from_records(&stats)?,
        })
    }

    /// Rebuild the model, requiring every parameter to be present with the
    /// right shape.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::new(self.config.clone())?;
        let graph = model.graph_mut();
        let names: Vec<String> = graph.params().iter().map(|p| p.name.clone()).collect();
        for name in &names {
            let rec = self.params.iter().find(|r| &r.name == name).ok_or_else(|| Error::Mismatch {
                field: name.clone(),
                detail: "parameter missing from checkpoint".into(),
            })?;
            let id = graph.param_id(name).expect("listed above");
            if rec.dims != graph.param_value(id).shape() {
                return Err(Error::Mismatch {
                    field: name.clone(),
                    detail: format!("model expects {:?}, checkpoint has {:?}", graph.param_value(id).shape(), rec.dims),
                });
            }
            graph.set_param(id, Tensor::from_f64(rec.dims.clone(), &rec.values)?)?;
        }
        if let Some(extra) = self.params.iter().find(|r| !names.contains(&r.name)) {
            return Err(Error::Mismatch {
                field: extra.name.clone(),
                detail: "checkpoint parameter not present in the model".into(),
            });
        }
        if let Some(s) = &self.stats {
            if s.num_classes != self.config.head.num_classes || s.feature_dim != self.config.backbone.feature_dim {
                return Err(Error::Mismatch {
                    field: format!("{STATS_PREFIX}mu"),
                    detail: format!(
                        "statistics for {} classes of width {}, model has {} of width {}",
                        s.num_classes, s.feature_dim, self.config.head.num_classes, self.config.backbone.feature_dim
                    ),
                });
            }
        }
        Ok(model)
    }

    /// Reject when the stored configuration differs from `expected`, naming
    /// the first differing field (e.g. `head.latent_dim`).
    pub fn check_config(&self, expected: &TrainConfig) -> Result<()> {
        let a = serde_json::to_value(expected)?;
        let b = serde_json::to_value(&self.config)?;
        match first_difference(&a, &b, String::new()) {
            None => Ok(()),
            Some((field, want, got)) => Err(Error::Mismatch {
                field,
                detail: format!("expected {want}, checkpoint has {got}"),
            }),
        }
    }
}

fn first_difference(a: &Value, b: &Value, path: String) -> Option<(String, String, String)> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match y.get(k) {
                    Some(vb) => {
                        if let Some(d) = first_difference(va, vb, sub) {
                            return Some(d);
                        }
                    }
                    None => return Some((sub, va.to_string(), "nothing".into())),
                }
            }
            y.keys()
                .find(|k| !x.contains_key(*k))
                .map(|k| (if path.is_empty() { k.clone() } else { format!("{path}.{k}") }, "nothing".into(), y[k].to_string()))
        }
        _ if a != b => Some((path, a.to_string(), b.to_string())),
        _ => None,
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: expected {n} bytes, {left} remain (file length {})",
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, stats: Option<&ScoreStats>, path: &Path) -> Result<()> {
    fs::write(path, Checkpoint::from_model(model, stats).to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, Option<ScoreStats>)> {
    let ckpt = Checkpoint::from_bytes(&fs::read(path)?)?;
    Ok((ckpt.to_model()?, ckpt.stats))
}
