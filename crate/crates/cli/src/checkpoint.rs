//! VAPI checkpoint files.
//!
//! Layout, all little-endian. Strings are a u16 byte length followed by
//! UTF-8 bytes. Tables are a u32 entry count followed by entries sorted by
//! name, so a given state has exactly one encoding.
//!
//! ```text
//! magic        4 bytes  "VAPI"
//! version      u32      1
//! stage        string   "tok-pretrain" | "ar-pretrain" | "posttrain"
//! method       string   "" outside post-training
//! config_hash  32 bytes SHA-256 of the stage-relevant config
//! step         u64
//! counters     table of (name, u64)
//! rngs         table of (name, seed u64, stream u64, word_pos u128)
//! tensors      table of (path, ndim u32, ndim x u64 dims, f64 payload)
//! ```
//!
//! Tensor paths are namespaced: `tok/...`, `ar/...`, `opt/m/...`, `opt/v/...`.

use anyhow::{bail, ensure, Context, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use vapi_core::num::{AdamW, RngState};
use vapi_core::{ParamStore, SeededRng, Tensor};

pub const MAGIC: &[u8; 4] = b"VAPI";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub method: String,
    pub config_hash: [u8; 32],
    pub step: u64,
    pub counters: BTreeMap<String, u64>,
    pub rngs: BTreeMap<String, RngState>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(stage: &str, method: &str, config_hash: [u8; 32], step: u64) -> Self {
        Self {
            stage: stage.into(),
            method: method.into(),
            config_hash,
            step,
            counters: BTreeMap::new(),
            rngs: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (path, t) in store.iter() {
            self.tensors.insert(format!("{prefix}/{path}"), t.clone());
        }
    }

    /// Every tensor under `prefix/`, with the prefix stripped.
    pub fn store(&self, prefix: &str) -> ParamStore {
        let lead = format!("{prefix}/");
        let mut out = ParamStore::new();
        for (path, t) in self.tensors.range(lead.clone()..) {
            let Some(rest) = path.strip_prefix(&lead) else { break };
            out.insert(rest, t.clone());
        }
        out
    }

    /// Loads the tensors under `prefix/` over `store`, which must have
    /// exactly the same paths and shapes.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let saved = self.store(prefix);
        ensure!(
            saved.paths().eq(store.paths()),
            "checkpoint tensors under `{prefix}` do not match the configured model"
        );
        for (path, t) in store.iter_mut() {
            let s = saved.get(path).unwrap();
            ensure!(s.shape() == t.shape(), "tensor {prefix}/{path} has shape {:?}, expected {:?}", s.shape(), t.shape());
            *t = s.clone();
        }
        Ok(())
    }

    pub fn put_optimizer(&mut self, opt: &AdamW) {
        self.put_store("opt/m", &opt.m);
        self.put_store("opt/v", &opt.v);
        self.counters.insert("opt.t".into(), opt.t);
    }

    pub fn load_optimizer(&self, opt: &mut AdamW) -> Result<()> {
        self.load_store("opt/m", &mut opt.m)?;
        self.load_store("opt/v", &mut opt.v)?;
        opt.t = self.counter("opt.t")?;
        Ok(())
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters.get(name).copied().with_context(|| format!("checkpoint has no counter `{name}`"))
    }

    pub fn put_rng(&mut self, name: &str, rng: &SeededRng) {
        self.rngs.insert(name.into(), rng.state());
    }

    pub fn rng(&self, name: &str) -> Result<SeededRng> {
        self.rngs.get(name).map(|s| SeededRng::from_state(*s)).with_context(|| format!("checkpoint has no rng `{name}`"))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut w, &self.stage);
        put_str(&mut w, &self.method);
        w.extend_from_slice(&self.config_hash);
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        for (k, v) in &self.counters {
            put_str(&mut w, k);
            w.extend_from_slice(&v.to_le_bytes());
        }
        w.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for (k, s) in &self.rngs {
            put_str(&mut w, k);
            w.extend_from_slice(&s.seed.to_le_bytes());
            w.extend_from_slice(&s.stream.to_le_bytes());
            w.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        w.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (k, t) in &self.tensors {
            put_str(&mut w, k);
            w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(4)? == MAGIC, "not a VAPI checkpoint");
        let version = r.u32()?;
        ensure!(version == VERSION, "unsupported checkpoint version {version}");
        let stage = r.string()?;
        let method = r.string()?;
        let config_hash = r.take(32)?.try_into().unwrap();
        let step = r.u64()?;
        let mut ck = Checkpoint::new(&stage, &method, config_hash, step);
        for _ in 0..r.u32()? {
            let k = r.string()?;
            ck.counters.insert(k, r.u64()?);
        }
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let (seed, stream) = (r.u64()?, r.u64()?);
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            ck.rngs.insert(k, RngState { seed, stream, word_pos });
        }
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).context("tensor too large")?;
            let payload = r.take(n.checked_mul(8).context("tensor too large")?)?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(anyhow::Error::from)?;
            ck.tensors.insert(k, t);
        }
        ensure!(r.pos == bytes.len(), "trailing bytes after checkpoint");
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("vapi.tmp");
        std::fs::write(&tmp, self.encode()).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::decode(&bytes).with_context(|| format!("in {}", path.display()))
    }

    pub fn check_hash(&self, expected: &[u8; 32], what: &str) -> Result<()> {
        if &self.config_hash != expected {
            bail!(
                "config hash mismatch for {what} checkpoint: saved {}, current config {}",
                hex(&self.config_hash),
                hex(expected)
            );
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn step_file(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:06}.vapi"))
}

/// The periodic checkpoint with the highest step in `dir`, if any.
pub fn latest(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let step = name.strip_prefix("ckpt-").and_then(|s| s.strip_suffix(".vapi")).and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    let len = u16::try_from(s.len()).expect("names are short");
    w.extend_from_slice(&len.to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).context("truncated checkpoint")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        Ok(std::str::from_utf8(self.take(n)?).context("non-UTF-8 name")?.to_owned())
    }
}
