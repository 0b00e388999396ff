//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "GTENCKPT" | version u32 | config_len u64 | config text
//! epoch u64 | lr f64 | best_err f64 | stale u64
//! rng seed [u8; 32] | rng stream u64 | rng word_pos u128
//! param_count u64 | records… | buffer_count u64 | records…
//! sha256 of everything above
//! ```
//!
//! A record is `name_len u32 | name | rank u32 | extents u64… | f64…`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::model::{Model, ModelConfig};
use super::sgd::SgdState;
use super::train::{TrainConfig, TrainState, Trainer};
use crate::config::{parse_kv, to_text, KvMap};
use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GTENCKPT";
pub const VERSION: u32 = 1;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical `key=value` text of the model and training configs.
    pub config: String,
    pub epoch: u64,
    pub lr: f64,
    pub best_err: f64,
    pub stale: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub params: Vec<(String, Tensor<f64>)>,
    pub momentum: Vec<(String, Tensor<f64>)>,
}

fn put_records(out: &mut Vec<u8>, records: &[(String, Tensor<f64>)]) {
    out.extend((records.len() as u64).to_le_bytes());
    for (name, t) in records {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend((e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("record runs past the end at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }

    fn records(&mut self) -> Result<Vec<(String, Tensor<f64>)>> {
        let count = self.usize()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = self.string(len)?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
                return Err(Error::Format(format!("{name}: tensor data runs past the end")));
            }
            let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        out.extend((self.config.len() as u64).to_le_bytes());
        out.extend(self.config.as_bytes());
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.lr.to_le_bytes());
        out.extend(self.best_err.to_le_bytes());
        out.extend(self.stale.to_le_bytes());
        out.extend(self.rng_seed);
        out.extend(self.rng_stream.to_le_bytes());
        out.extend(self.rng_word_pos.to_le_bytes());
        put_records(&mut out, &self.params);
        put_records(&mut out, &self.momentum);
        let digest = Sha256::digest(&out);
        out.extend(digest);
        out
    }

    /// Checks magic, version, then checksum, before parsing anything else.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32().map_err(|_| Error::Checksum("file truncated".into()))?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < r.pos + DIGEST {
            return Err(Error::Checksum("file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum("stored digest does not match contents".into()));
        }
        let mut r = Reader { buf: body, pos: r.pos };
        let len = r.usize()?;
        let config = r.string(len)?;
        let ck = Checkpoint {
            config,
            epoch: r.u64()?,
            lr: r.f64()?,
            best_err: r.f64()?,
            stale: r.u64()?,
            rng_seed: r.array()?,
            rng_stream: r.u64()?,
            rng_word_pos: u128::from_le_bytes(r.array()?),
            params: r.records()?,
            momentum: r.records()?,
        };
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn config_map(&self) -> Result<KvMap> {
        Ok(parse_kv(&self.config)?.into_iter().collect())
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, ck.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Canonical config text for a model/training pair.
pub fn config_text(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut kv = KvMap::new();
    model.to_kv(&mut kv);
    train.to_kv(&mut kv);
    to_text(&kv)
}

fn check_records(what: &str, want: &[(&str, &[usize])], got: &[(String, Tensor<f64>)]) -> Result<()> {
    if want.len() != got.len() {
        return Err(Error::Format(format!(
            "{what}: expected {} records, found {}",
            want.len(),
            got.len()
        )));
    }
    for ((wn, ws), (gn, gt)) in want.iter().zip(got) {
        if wn != gn || *ws != gt.shape() {
            return Err(Error::Format(format!(
                "{what}: expected {wn} {ws:?}, found {gn} {:?}",
                gt.shape()
            )));
        }
    }
    Ok(())
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        let names: Vec<String> = self.model.params.iter().map(|p| p.name.clone()).collect();
        Checkpoint {
            config: config_text(&self.model.cfg, &self.cfg),
            epoch: self.state.epoch as u64,
            lr: self.state.lr,
            best_err: self.state.best_err,
            stale: self.state.stale as u64,
            rng_seed: self.state.rng.get_seed(),
            rng_stream: self.state.rng.get_stream(),
            rng_word_pos: self.state.rng.get_word_pos(),
            params: names
                .iter()
                .cloned()
                .zip(self.model.params.iter().map(|p| p.value.clone()))
                .collect(),
            momentum: names.into_iter().zip(self.sgd.buffers.iter().cloned()).collect(),
        }
    }

    /// Replaces parameters, buffers, and schedule state. Everything is
    /// validated first, so an error leaves the trainer untouched.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let want: Vec<(&str, &[usize])> = self
            .model
            .params
            .iter()
            .map(|p| (p.name.as_str(), p.value.shape()))
            .collect();
        check_records("parameters", &want, &ck.params)?;
        check_records("momentum", &want, &ck.momentum)?;
        let epoch = usize::try_from(ck.epoch).map_err(|_| Error::Format("epoch overflows usize".into()))?;
        let mut rng = ChaCha8Rng::from_seed(ck.rng_seed);
        rng.set_stream(ck.rng_stream);
        rng.set_word_pos(ck.rng_word_pos);

        for (p, (_, t)) in self.model.params.iter_mut().zip(&ck.params) {
            p.value = t.clone();
        }
        self.sgd = SgdState {
            buffers: ck.momentum.iter().map(|(_, t)| t.clone()).collect(),
        };
        self.state = TrainState {
            epoch,
            lr: ck.lr,
            best_err: ck.best_err,
            stale: ck.stale as usize,
            rng,
        };
        Ok(())
    }

    /// Rebuilds a trainer from a checkpoint's own configuration.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kv = ck.config_map()?;
        let model_cfg = ModelConfig::from_kv(&kv)?;
        let train_cfg = TrainConfig::from_kv(&kv)?;
        let mut t = Trainer::new(Model::new(model_cfg, train_cfg.seed)?, train_cfg)?;
        t.restore(ck)?;
        Ok(t)
    }
}
