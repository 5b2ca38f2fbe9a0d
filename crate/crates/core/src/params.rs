//! Named parameter storage, optimizer state, and the `TTTL` container format.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! b"TTTL"  magic
//! u32      format version (1)
//! u32      entry count
//! per entry, in lexicographic name order:
//!   u32    name length in bytes, then the UTF-8 name
//!   u32    rank, then one u32 per extent
//!   f32    product(extents) raw values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"TTTL";
pub const CONTAINER_VERSION: u32 = 1;

/// Per-parameter optimizer state. Buffers always have the parameter's length.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum OptState<T> {
    #[default]
    Fresh,
    Momentum(Vec<T>),
    Adam { m: Vec<T>, v: Vec<T>, step: u64 },
}

/// Parameters keyed by name, iterated in lexicographic order.
///
/// Cloning copies values and optimizer state, so stepping a clone never
/// touches the original.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    values: BTreeMap<String, Tensor<T>>,
    state: BTreeMap<String, OptState<T>>,
}

/// Biases, normalization parameters, positional embeddings and the learned
/// tokens are never weight-decayed.
pub fn exempt_from_decay(name: &str) -> bool {
    name.ends_with(".bias")
        || name.contains("norm")
        || name.ends_with("pos_embed")
        || name.ends_with("_token")
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            values: BTreeMap::new(),
            state: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.state.remove(&name);
        self.values.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.values.get(name)
    }

    /// Panics with the missing name; models look up their own parameters.
    pub fn expect(&self, name: &str) -> &Tensor<T> {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.values.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    /// Count of scalars in entries whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Optimizer state of `name`; `None` until an optimizer has stepped it.
    pub fn state(&self, name: &str) -> Option<&OptState<T>> {
        self.state.get(name)
    }

    pub(crate) fn value_and_state_mut(&mut self, name: &str) -> Option<(&mut Tensor<T>, &mut OptState<T>)> {
        let value = self.values.get_mut(name)?;
        let state = self.state.entry(name.to_string()).or_default();
        Some((value, state))
    }

    /// Drops all optimizer state.
    pub fn reset_state(&mut self) {
        self.state.clear();
    }

    /// Entries whose names start with `prefix`, optimizer state included.
    pub fn subset(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for (k, v) in &self.values {
            if k.starts_with(prefix) {
                out.values.insert(k.clone(), v.clone());
                if let Some(s) = self.state.get(k) {
                    out.state.insert(k.clone(), s.clone());
                }
            }
        }
        out
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: &Self) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
            match other.state.get(k) {
                Some(s) => {
                    self.state.insert(k.clone(), s.clone());
                }
                None => {
                    self.state.remove(k);
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            values: self
                .values
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            state: BTreeMap::new(),
        }
    }

    /// SHA-256 over names, shapes and value bits, hex encoded. Optimizer state
    /// is excluded; see [`ParamSet::state_digest`].
    pub fn digest(&self) -> String {
        self.digest_prefix("")
    }

    /// Digest restricted to entries under `prefix`.
    pub fn digest_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for &e in v.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Digest of the optimizer state buffers.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, s) in &self.state {
            h.update(k.as_bytes());
            let bufs: Vec<&Vec<T>> = match s {
                OptState::Fresh => {
                    h.update([0u8]);
                    vec![]
                }
                OptState::Momentum(v) => {
                    h.update([1u8]);
                    vec![v]
                }
                OptState::Adam { m, v, step } => {
                    h.update([2u8]);
                    h.update(step.to_le_bytes());
                    vec![m, v]
                }
            };
            for b in bufs {
                for &x in b {
                    h.update(x.as_f64().to_bits().to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&u32_of(self.values.len(), "entry count")?.to_le_bytes())?;
        for (name, t) in &self.values {
            w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&u32_of(t.rank(), "rank")?.to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&u32_of(e, "extent")?.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &x in t.data() {
                buf.extend_from_slice(&(x.to_f32().unwrap_or(f32::NAN)).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CONTAINER_MAGIC {
            return Err(Error::Format("bad magic, expected TTTL".into()));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut out = Self::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?;
            let data: Vec<T> = raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("entry `{name}`: {e}")))?;
            if out.values.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated container: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub(crate) map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Gradients { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor<T>) {
        self.map.insert(name.into(), g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Removes every gradient whose name starts with `prefix`.
    pub fn discard_prefix(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    /// Adds `w·other` into `self`, inserting missing entries.
    pub fn add_scaled(&mut self, other: &Gradients<T>, w: T) {
        for (k, g) in &other.map {
            match self.map.get_mut(k) {
                Some(mine) => {
                    for (a, &b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += w * b;
                    }
                }
                None => {
                    self.map.insert(k.clone(), g.map(|v| v * w));
                }
            }
        }
    }

    /// Global ℓ2 norm across all entries.
    pub fn norm(&self) -> T {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }
}
