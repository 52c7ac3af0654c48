//! Binary checkpoints of a [`TrainState`].

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;
use crate::tpp::Vocabulary;
use crate::train::{TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"EVCK";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 8;

fn checksum(bytes: &[u8]) -> [u8; CHECKSUM_LEN] {
    let d = Sha256::digest(bytes);
    let mut out = [0; CHECKSUM_LEN];
    out.copy_from_slice(&d[..CHECKSUM_LEN]);
    out
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn store(&mut self, s: &ParamStore) {
        self.u64(s.len() as u64);
        for e in s.entries() {
            self.str(&e.name);
            self.tensor(&e.value);
        }
    }

    fn adam(&mut self, a: &Adam) {
        self.u64(a.step);
        for t in a.m.iter().chain(&a.v) {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n as usize > self.buf.len() {
            return Err(corrupt("implausible length"));
        }
        Ok(n as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| corrupt("implausible shape"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(&shape, data))
    }

    /// Overwrites `store` values, requiring identical names and shapes.
    fn store_into(&mut self, store: &mut ParamStore) -> Result<()> {
        let n = self.len()?;
        if n != store.len() {
            return Err(corrupt(format!(
                "expected {} parameters, found {n}",
                store.len()
            )));
        }
        for e in store.entries_mut() {
            let name = self.str()?;
            let t = self.tensor()?;
            if name != e.name || t.shape() != e.value.shape() {
                return Err(corrupt(format!(
                    "parameter `{name}` does not match `{}`",
                    e.name
                )));
            }
            e.value = t;
        }
        Ok(())
    }

    fn adam_into(&mut self, a: &mut Adam) -> Result<()> {
        a.step = self.u64()?;
        for t in a.m.iter_mut().chain(a.v.iter_mut()) {
            let r = self.tensor()?;
            if r.shape() != t.shape() {
                return Err(corrupt("optimizer state shape mismatch"));
            }
            *t = r;
        }
        Ok(())
    }
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u64(state.model.cfg.hash());
    w.u64(state.step as u64);
    w.str(&state.cfg.to_kv());
    w.str(&state.vocab.symbols().join("\n"));
    w.store(&state.model.gen_store);
    w.store(&state.model.critic_store);
    w.adam(&state.opt_g);
    w.adam(&state.opt_d);
    w.u64(state.speaker_means.len() as u64);
    for (name, v) in &state.speaker_means {
        w.str(name);
        w.tensor(v);
    }
    let sum = checksum(&w.0);
    w.0.extend_from_slice(&sum);
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if checksum(body) != sum {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let hash = r.u64()?;
    let step = r.u64()? as usize;
    let cfg = TrainConfig::from_kv(&r.str()?).map_err(|e| corrupt(e.to_string()))?;
    let vocab = Vocabulary::from_table(r.str()?.split('\n').map(str::to_string).collect())
        .map_err(|e| corrupt(e.to_string()))?;
    let model_cfg = cfg.model_config(vocab.len());
    if model_cfg.hash() != hash {
        return Err(corrupt("stored config does not match its hash"));
    }
    let model = Model::new(model_cfg, cfg.seed).map_err(|e| corrupt(e.to_string()))?;
    let mut state = TrainState::from_model(model, cfg, vocab);
    state.step = step;
    r.store_into(&mut state.model.gen_store)?;
    r.store_into(&mut state.model.critic_store)?;
    r.adam_into(&mut state.opt_g)?;
    r.adam_into(&mut state.opt_d)?;
    for _ in 0..r.len()? {
        let name = r.str()?;
        state.speaker_means.insert(name, r.tensor()?);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(state)
}

pub fn save(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(state))?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint that must have been trained with `expected`.
pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<TrainState> {
    let state = load(path)?;
    let found = state.model.cfg.hash();
    if found != expected.hash() {
        return Err(Error::ConfigHashMismatch {
            expected: expected.hash(),
            found,
        });
    }
    Ok(state)
}
