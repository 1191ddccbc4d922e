//! Single-file checkpoint archive.
//!
//! Layout (little endian):
//!
//! ```text
//! b"MMTTSCK1"
//! u64 len, config as TOML
//! u64 len, metadata as JSON
//! u32 count, then per tensor: u32 name len, name, u32 rows, u32 cols, f64 × rows·cols
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Optimizer moments are stored as ordinary tensors under `adam.<tag>.m/<param>`
//! and `adam.<tag>.v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MMTTSCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            config,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key).and_then(Value::as_u64)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?} missing")))
    }

    /// Copies every parameter of `store` under its own name.
    pub fn insert_params(&mut self, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.tensors.insert(name.to_string(), t.clone());
        }
    }

    /// Overwrites every parameter of `store` from the archive; all must be present with matching shapes.
    pub fn load_params(&self, store: &mut ParamStore) -> Result<()> {
        self.load_params_filtered(store, |_| true, true).map(|_| ())
    }

    /// Loads the parameters whose names satisfy `keep`. With `strict = false`
    /// absent names are skipped; shape mismatches are always errors.
    pub fn load_params_filtered(
        &self,
        store: &mut ParamStore,
        keep: impl Fn(&str) -> bool,
        strict: bool,
    ) -> Result<usize> {
        let ids: Vec<_> = store.ids().collect();
        let mut loaded = 0;
        for id in ids {
            let name = store.name(id).to_string();
            if !keep(&name) {
                continue;
            }
            match self.tensors.get(&name) {
                Some(t) => {
                    let p = store.get_mut(id);
                    if p.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!(
                            "{name}: stored shape {:?}, model expects {:?}",
                            t.shape(),
                            p.shape()
                        )));
                    }
                    *p = t.clone();
                    loaded += 1;
                }
                None if strict => return Err(Error::Checkpoint(format!("parameter {name:?} missing"))),
                None => {}
            }
        }
        Ok(loaded)
    }

    pub fn insert_adam(&mut self, tag: &str, opt: &Adam, store: &ParamStore) {
        self.set_meta(&format!("adam.{tag}.step"), opt.steps());
        for (i, m, v) in opt.moments() {
            let name = store.name(crate::autograd::ParamId(i));
            self.tensors.insert(format!("adam.{tag}.m/{name}"), m.clone());
            self.tensors.insert(format!("adam.{tag}.v/{name}"), v.clone());
        }
    }

    /// Restores moments saved by [`Checkpoint::insert_adam`]; returns false when none were saved.
    pub fn restore_adam(&self, tag: &str, opt: &mut Adam, store: &ParamStore) -> Result<bool> {
        let Some(step) = self.meta_u64(&format!("adam.{tag}.step")) else {
            return Ok(false);
        };
        let mut moments = Vec::new();
        for (id, name, p) in store.iter() {
            let m = self.tensors.get(&format!("adam.{tag}.m/{name}"));
            let v = self.tensors.get(&format!("adam.{tag}.v/{name}"));
            if let (Some(m), Some(v)) = (m, v) {
                if m.shape() != p.shape() || v.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!("{name}: optimizer moment shape mismatch")));
                }
                moments.push((id.index(), m.clone(), v.clone()));
            }
        }
        opt.restore(step, moments, store.len());
        Ok(true)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let cfg = self.config.to_toml_string();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        let meta = serde_json::to_string(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let cfg_len = r.u64()? as usize;
        let cfg_text = r.str(cfg_len)?;
        let config = ModelConfig::from_toml_str(cfg_text)?;
        let meta_len = r.u64()? as usize;
        let meta: BTreeMap<String, Value> = serde_json::from_str(r.str(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = r.str(nl)?.to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, Tensor::from_vec(rows, cols, data));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { config, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write then rename so a crash never leaves a truncated checkpoint behind.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::AdamConfig;

    fn sample() -> (Checkpoint, ParamStore) {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::from_fn(2, 3, |r, c| r as f64 - c as f64 * 0.5));
        store.add("b", Tensor::row_vector(&[f64::MIN_POSITIVE, -0.0, 1e300]));
        let mut ck = Checkpoint::new(ModelConfig::toy());
        ck.insert_params(&store);
        ck.set_meta("stage", "stage1");
        ck.set_meta("step", 42u64);
        (ck, store)
    }

    #[test]
    fn round_trip_is_exact() {
        let (ck, _) = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta_u64("step"), Some(42));
        assert_eq!(back.meta_str("stage"), Some("stage1"));
    }

    #[test]
    fn corruption_and_truncation_are_rejected() {
        let (ck, _) = sample();
        let mut bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }

    #[test]
    fn load_params_checks_names_and_shapes() {
        let (ck, store) = sample();
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(2, 3));
        other.add("b", Tensor::zeros(1, 3));
        ck.load_params(&mut other).unwrap();
        assert_eq!(other.get(other.id("a.w").unwrap()), store.get(store.id("a.w").unwrap()));

        let mut wrong = ParamStore::new();
        wrong.add("a.w", Tensor::zeros(3, 2));
        assert!(ck.load_params(&mut wrong).is_err());

        let mut extra = ParamStore::new();
        extra.add("c", Tensor::zeros(1, 1));
        assert!(ck.load_params(&mut extra).is_err());
        assert_eq!(ck.load_params_filtered(&mut extra, |_| true, false).unwrap(), 0);
    }

    #[test]
    fn adam_state_round_trips() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row_vector(&[1.0, -2.0]));
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        let step = |store: &mut ParamStore, opt: &mut Adam| {
            let grads = {
                let mut g = Graph::new(store);
                let x = g.param(w);
                let sq = g.mul(x, x);
                let l = g.sum(sq);
                g.backward(l).into_param_grads(store)
            };
            opt.step(store, &grads);
        };
        step(&mut store, &mut opt);
        let mut ck = Checkpoint::new(ModelConfig::toy());
        ck.insert_params(&store);
        ck.insert_adam("main", &opt, &store);
        let ck = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();

        let mut store2 = ParamStore::new();
        store2.add("w", Tensor::zeros(1, 2));
        ck.load_params(&mut store2).unwrap();
        let mut opt2 = Adam::new(AdamConfig::with_lr(0.1));
        assert!(ck.restore_adam("main", &mut opt2, &store2).unwrap());
        assert!(!ck.restore_adam("other", &mut opt2.clone(), &store2).unwrap());

        step(&mut store, &mut opt);
        step(&mut store2, &mut opt2);
        assert_eq!(store.get(w), store2.get(w));
    }
}
