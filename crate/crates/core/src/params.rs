//! Named parameter storage, gradients, initialization and checkpoints.
//!
//! Checkpoint layout (all integers `u64` little-endian):
//!
//! ```text
//! "MKGD1" | count | { name_len | name (UTF-8) | rank | shape[rank] | values (f64 LE) }*
//! ```
//!
//! Optimizer state rides in the same container under the `/adam/` prefix.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MKGD1";
const ADAM_PREFIX: &str = "/adam/";

/// Ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Adds a new entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn snapshot(&self) -> ParamStore {
        self.clone()
    }

    /// Restores every value from `snap`, which must have the same layout.
    pub fn restore(&mut self, snap: &ParamStore) -> Result<()> {
        if !self.same_layout(snap) {
            return Err(Error::contract("snapshot layout differs from store"));
        }
        self.entries.clone_from(&snap.entries);
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    /// True when every value matches bit for bit.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.same_layout(other)
            && self.entries.values().zip(other.entries.values()).all(|(a, b)| {
                a.values()
                    .iter()
                    .zip(b.values())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn init_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), values)?)
    }

    /// Xavier-uniform over a `[fan_out, fan_in]` matrix.
    pub fn init_xavier(&mut self, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<()> {
        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        self.init_uniform(name, shape, bound, rng)
    }
}

/// Gradient map keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    entries: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            entries: store
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `self += scale * other`, adding any entries `self` lacks.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) -> Result<()> {
        for (name, g) in &other.entries {
            match self.entries.get_mut(name) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(Error::Dimension {
                            op: "grad_accumulate",
                            lhs: mine.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in mine.values_mut().iter_mut().zip(g.values()) {
                        *a += scale * b;
                    }
                }
                None => {
                    let mut t = g.clone();
                    t.values_mut().iter_mut().for_each(|v| *v *= scale);
                    self.entries.insert(name.clone(), t);
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.entries.values_mut() {
            t.values_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries.values().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the
    /// pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}

/// Serializes parameters (and optionally Adam state) into checkpoint bytes.
pub fn encode_checkpoint(store: &ParamStore, adam: Option<&AdamState>) -> Vec<u8> {
    let mut entries: Vec<(String, &Tensor)> =
        store.iter().map(|(n, t)| (n.clone(), t)).collect();
    let adam_entries = adam.map(|a| a.to_entries()).unwrap_or_default();
    for (n, t) in &adam_entries {
        entries.push((format!("{ADAM_PREFIX}{n}"), t));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u64(&mut buf, entries.len() as u64);
    for (name, t) in entries {
        put_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        put_u64(&mut buf, t.rank() as u64);
        for &d in t.shape() {
            put_u64(&mut buf, d as u64);
        }
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Inverse of [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8], rng_seed: u64) -> Result<(ParamStore, Option<AdamState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = r.u64()? as usize;
    let mut store = ParamStore::new(rng_seed);
    let mut adam = Vec::new();
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = r.u64()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        match name.strip_prefix(ADAM_PREFIX) {
            Some(rest) => adam.push((rest.to_string(), t)),
            None => store.insert(name, t)?,
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let adam = if adam.is_empty() {
        None
    } else {
        Some(AdamState::from_entries(adam)?)
    };
    Ok((store, adam))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, adam: Option<&AdamState>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store, adam))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Option<AdamState>)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, 0)
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
