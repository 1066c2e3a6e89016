//! The `PGAN` checkpoint container: magic, version u16, u32 metadata length
//! and JSON metadata, u32 tensor count, then per tensor a u32 name length,
//! the UTF-8 name, dtype tag u8, rank u8, u32 dims and little-endian data.

use std::path::Path;

use diffcomp::{Adam, DType, ParamStore, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PGAN";
pub const VERSION: u16 = 1;

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot carry 128 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Invalid(format!("checkpoint rng state: bad {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `captioner`, `textenc`, `classifier` or `stage1`..`stage3`.
    pub kind: String,
    pub stage: u8,
    /// Completed epochs, and batches completed inside the current one.
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub step: u64,
    pub config: TrainConfig,
    pub config_digest: String,
    pub rng: Option<RngState>,
    pub metrics: serde_json::Value,
    /// Architecture facts needed to rebuild the networks.
    pub model: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, path: &Path, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::format(path, format!("truncated checkpoint ({what})")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8], path: &Path, what: &str) -> Result<usize> {
    let b = take(bytes, 4, path, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

fn u32_len(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Invalid(format!("{what} too large for the checkpoint format")))
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(meta.len(), "metadata")?);
        out.extend_from_slice(&meta);
        out.extend_from_slice(&u32_len(self.tensors.len(), "tensor count")?);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&u32_len(name.len(), "tensor name")?);
            out.extend_from_slice(name.as_bytes());
            out.push(f32::DTYPE.tag());
            out.push(u8::try_from(t.rank()).map_err(|_| Error::Invalid(format!("`{name}` has too many axes")))?);
            for &d in t.shape() {
                out.extend_from_slice(&u32_len(d, "dimension")?);
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut rest = bytes;
        if take(&mut rest, 4, path, "magic")? != MAGIC {
            return Err(Error::format(path, "bad checkpoint magic"));
        }
        let v = take(&mut rest, 2, path, "version")?;
        let version = u16::from_le_bytes([v[0], v[1]]);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let meta_len = take_u32(&mut rest, path, "metadata length")?;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut rest, meta_len, path, "metadata")?)
            .map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))?;
        let count = take_u32(&mut rest, path, "tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = take_u32(&mut rest, path, "name length")?;
            let name = String::from_utf8(take(&mut rest, name_len, path, "name")?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let head = take(&mut rest, 2, path, "tensor header")?;
            let dtype = DType::from_tag(head[0])
                .ok_or_else(|| Error::format(path, format!("`{name}`: unknown dtype tag {}", head[0])))?;
            if dtype != DType::F32 {
                return Err(Error::format(path, format!("`{name}`: only float32 tensors are stored")));
            }
            let rank = head[1] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(take_u32(&mut rest, path, "dimension")?);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut rest, numel * dtype.size(), path, "tensor data")?;
            let data = raw.chunks_exact(4).map(f32::read_le).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::format(path, format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if !rest.is_empty() {
            return Err(Error::format(path, "trailing bytes after tensor table"));
        }
        Ok(Self {
            meta,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("pgan.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds every entry of `store` under `prefix`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (_, e) in store.entries() {
            self.tensors.push((format!("{prefix}{}", e.name), e.value.clone()));
        }
    }

    /// Fills every entry of `store` from tensors saved under `prefix`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.entries().map(|(id, e)| (id, e.name.clone())).collect();
        for (id, name) in ids {
            let key = format!("{prefix}{name}");
            let t = self
                .get(&key)
                .ok_or_else(|| Error::Missing(format!("tensor `{key}` in {} checkpoint", self.meta.kind)))?;
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    pub fn put_adam(&mut self, prefix: &str, adam: &Adam<f32>, store: &ParamStore<f32>) {
        for (name, t) in adam.state_tensors(store) {
            self.tensors.push((format!("{prefix}{name}"), t));
        }
    }

    pub fn load_adam(&self, prefix: &str, adam: &mut Adam<f32>, store: &ParamStore<f32>, steps: u64) -> Result<()> {
        adam.load_state(store, steps, |name| self.get(&format!("{prefix}{name}")).cloned())?;
        Ok(())
    }

    /// Fails unless the checkpoint is of the expected kind.
    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.meta.kind == kind {
            Ok(())
        } else {
            Err(Error::format(
                path,
                format!("expected a {kind} checkpoint, found {}", self.meta.kind),
            ))
        }
    }

    pub fn model_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .model
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Missing(format!("model field `{key}` in {} checkpoint", self.meta.kind)))
    }
}

/// Hex SHA-256 over every name, shape and value of a store.
pub fn store_digest<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (_, e) in store.entries() {
        h.update(e.name.as_bytes());
        for &d in e.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in e.value.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    hex::encode(h.finalize())
}
