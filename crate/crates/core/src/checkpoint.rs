//! Sectioned binary checkpoint container.
//!
//! Layout (little-endian): magic `MLRCKPT\0`, `u32` version, `u32` entry
//! count, then entries of `u8` kind, `u16` name length, UTF-8 name and a
//! kind-specific payload:
//!
//! | kind | payload |
//! |------|---------|
//! | 1 tensor | `u32` rank, `rank × u64` dims, `f64` data |
//! | 2 u64 | `u64` |
//! | 3 f64 | `f64` |
//! | 4 text | `u32` length, UTF-8 bytes |
//! | 5 u128 | `u128` |

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::objective::FocalLossConfig;
use crate::optim::{Moments, OptimizerState};
use crate::pipeline::Model;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::train::{epoch_stream, EarlyStopState, TrainState};

pub const MAGIC: &[u8; 8] = b"MLRCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    U64(u64),
    F64(f64),
    Text(String),
    U128(u128),
}

/// Ordered collection of named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: BTreeMap<String, Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

impl Container {
    pub fn insert(&mut self, name: impl Into<String>, e: Entry) {
        self.entries.insert(name.into(), e);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            let kind: u8 = match e {
                Entry::Tensor(_) => 1,
                Entry::U64(_) => 2,
                Entry::F64(_) => 3,
                Entry::Text(_) => 4,
                Entry::U128(_) => 5,
            };
            out.push(kind);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match e {
                Entry::Tensor(t) => {
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::U64(v) => out.extend_from_slice(&v.to_le_bytes()),
                Entry::F64(v) => out.extend_from_slice(&v.to_le_bytes()),
                Entry::Text(s) => {
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
                Entry::U128(v) => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(&fail)? != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(&fail)?;
        if version != VERSION {
            return Err(fail(format!("checkpoint version {version} is not supported (expected {VERSION})")));
        }
        let count = r.u32().map_err(&fail)?;
        let mut c = Container::default();
        for _ in 0..count {
            let kind = r.u8().map_err(&fail)?;
            let len = r.u16().map_err(&fail)? as usize;
            let name = String::from_utf8(r.take(len).map_err(&fail)?.to_vec()).map_err(|e| fail(e.to_string()))?;
            let e = match kind {
                1 => {
                    let rank = r.u32().map_err(&fail)? as usize;
                    let mut shape = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        shape.push(r.u64().map_err(&fail)? as usize);
                    }
                    let n: usize = shape.iter().product();
                    if n.checked_mul(8).is_none_or(|b| b > bytes.len()) {
                        return Err(fail(format!("tensor {name} larger than file")));
                    }
                    let data = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>().map_err(&fail)?;
                    Entry::Tensor(Tensor::new(&shape, data)?)
                }
                2 => Entry::U64(r.u64().map_err(&fail)?),
                3 => Entry::F64(r.f64().map_err(&fail)?),
                4 => {
                    let n = r.u32().map_err(&fail)? as usize;
                    let s = r.take(n).map_err(&fail)?.to_vec();
                    Entry::Text(String::from_utf8(s).map_err(|e| fail(e.to_string()))?)
                }
                5 => Entry::U128(u128::from_le_bytes(r.array().map_err(&fail)?)),
                k => return Err(fail(format!("unknown entry kind {k} for {name}"))),
            };
            c.entries.insert(name, e);
        }
        if r.pos != bytes.len() {
            return Err(fail("trailing bytes after last entry".into()));
        }
        Ok(c)
    }

    fn missing(&self, name: &str) -> Error {
        Error::Format {
            path: Default::default(),
            msg: format!("checkpoint entry {name} missing or of the wrong kind"),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.get(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            _ => Err(self.missing(name)),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.entries.get(name) {
            Some(Entry::U64(v)) => Ok(*v),
            _ => Err(self.missing(name)),
        }
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        match self.entries.get(name) {
            Some(Entry::F64(v)) => Ok(*v),
            _ => Err(self.missing(name)),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.entries.get(name) {
            Some(Entry::Text(v)) => Ok(v),
            _ => Err(self.missing(name)),
        }
    }

    pub fn u128(&self, name: &str) -> Result<u128> {
        match self.entries.get(name) {
            Some(Entry::U128(v)) => Ok(*v),
            _ => Err(self.missing(name)),
        }
    }
}

/// Everything needed to evaluate a model or continue its training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub state: TrainState,
}

impl Checkpoint {
    /// RNG state the next epoch will start from.
    pub fn rng_state(&self) -> RngState {
        epoch_stream(self.config.seed, self.state.epoch + 1).state()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.insert("config", Entry::Text(self.config.to_toml()));
        for (name, _, t) in self.model.params() {
            c.insert(format!("param.{name}"), Entry::Tensor(Tensor::from_vec_unchecked(t.shape(), t.data().to_vec())));
        }
        let opt = &self.state.optimizer;
        c.insert("optim.step", Entry::U64(opt.step));
        for (name, m) in &opt.moments {
            c.insert(format!("optim.m.{name}"), Entry::Tensor(Tensor::from_vec_unchecked(&[m.m.len()], m.m.clone())));
            c.insert(format!("optim.v.{name}"), Entry::Tensor(Tensor::from_vec_unchecked(&[m.v.len()], m.v.clone())));
        }
        c.insert("train.epoch", Entry::U64(self.state.epoch as u64));
        let es = &self.state.early;
        c.insert("early.best_auc", Entry::F64(es.best_auc));
        c.insert("early.best_epoch", Entry::U64(es.best_epoch as u64));
        c.insert("early.since_improvement", Entry::U64(es.since_improvement as u64));
        c.insert("early.min_epochs", Entry::U64(es.min_epochs as u64));
        c.insert("early.patience", Entry::U64(es.patience as u64));
        c.insert("focal.gamma", Entry::F64(self.state.focal.gamma));
        let alpha = &self.state.focal.alpha;
        c.insert("focal.alpha", Entry::Tensor(Tensor::from_vec_unchecked(&[alpha.len()], alpha.clone())));
        let rng = self.rng_state();
        c.insert("rng.seed", Entry::U64(rng.seed));
        c.insert("rng.stream_id", Entry::U64(rng.stream_id));
        c.insert("rng.counter", Entry::U128(rng.counter));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = RunConfig::from_toml_with_overrides(c.text("config")?, &[])?;
        let mut model = Model::build(&config.model_spec(), config.seed)?;
        for p in model.params_mut() {
            let saved = c.tensor(&format!("param.{}", p.name))?;
            if saved.shape() != p.tensor.shape() {
                return Err(Error::shape("checkpoint param", saved.shape(), p.tensor.shape()));
            }
            p.tensor.data_mut().copy_from_slice(saved.data());
        }
        let mut optimizer = OptimizerState::new(config.optimizer());
        optimizer.step = c.u64("optim.step")?;
        for name in c.entries.keys() {
            if let Some(p) = name.strip_prefix("optim.m.") {
                optimizer.moments.insert(
                    p.to_string(),
                    Moments {
                        m: c.tensor(name)?.data().to_vec(),
                        v: c.tensor(&format!("optim.v.{p}"))?.data().to_vec(),
                    },
                );
            }
        }
        let early = EarlyStopState {
            best_auc: c.f64("early.best_auc")?,
            best_epoch: c.u64("early.best_epoch")? as usize,
            since_improvement: c.u64("early.since_improvement")? as usize,
            min_epochs: c.u64("early.min_epochs")? as usize,
            patience: c.u64("early.patience")? as usize,
        };
        let focal = FocalLossConfig {
            gamma: c.f64("focal.gamma")?,
            alpha: c.tensor("focal.alpha")?.data().to_vec(),
        };
        let state = TrainState {
            optimizer,
            epoch: c.u64("train.epoch")? as usize,
            early,
            focal,
        };
        let ck = Self { config, model, state };
        let rng = RngState {
            seed: c.u64("rng.seed")?,
            stream_id: c.u64("rng.stream_id")?,
            counter: c.u128("rng.counter")?,
        };
        if rng != ck.rng_state() {
            return Err(Error::Format {
                path: Default::default(),
                msg: "stored RNG state does not match seed and epoch".into(),
            });
        }
        Ok(ck)
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_container().encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c = Container::decode(&bytes, path)?;
        Self::from_container(&c).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            e => e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let mut c = Container::default();
        c.insert("t", Entry::Tensor(Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()));
        c.insert("n", Entry::U64(7));
        c.insert("x", Entry::F64(f64::NEG_INFINITY));
        c.insert("s", Entry::Text("mode = \"molre\"".into()));
        c.insert("w", Entry::U128(u128::MAX - 3));
        let bytes = c.encode();
        let back = Container::decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = Container::default().encode();
        bytes[8] = 9;
        let err = Container::decode(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn truncation_rejected() {
        let mut c = Container::default();
        c.insert("n", Entry::U64(7));
        let bytes = c.encode();
        assert!(Container::decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(Container::decode(b"nope", Path::new("x")).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut cfg = RunConfig::default();
        cfg.feature_dim = 8;
        cfg.classes = 3;
        cfg.experts = 2;
        cfg.rank = 2;
        cfg.router_hidden = 4;
        let mut model = Model::build(&cfg.model_spec(), 5).unwrap();
        for p in model.params_mut() {
            for (i, v) in p.tensor.data_mut().iter_mut().enumerate() {
                *v = (i as f64 * 0.37).sin();
            }
        }
        cfg.seed = 5;
        let mut state = TrainState::new(&cfg, &[vec![1, 0, 0], vec![0, 1, 0]]).unwrap();
        state.epoch = 3;
        state.optimizer.step = 11;
        state.optimizer.moments.insert("head.w".into(), Moments { m: vec![0.1, 0.2], v: vec![0.3, 0.4] });
        let ck = Checkpoint { config: cfg, model, state };
        let c = ck.to_container();
        let back = Checkpoint::from_container(&Container::decode(&c.encode(), Path::new("m")).unwrap()).unwrap();
        assert_eq!(back.state, ck.state);
        assert_eq!(back.to_container(), c);
    }
}
