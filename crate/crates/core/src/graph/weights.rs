//! Named weight tensors, deterministic initialisation and the `SDWT` file
//! format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "SDWT" | u32 version=1 | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 ndim | ndim x u32 dims | f32 data...
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::HashMap;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{GraphError, ModelGraph};
use crate::rng::SplitMix64;

const MAGIC: &[u8; 4] = b"SDWT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("bad magic: not an SDWT weight file")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    BadVersion(u32),
    #[error("unexpected end of data")]
    Truncated,
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("tensor '{0}' has too many elements to store")]
    TooLarge(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// What a weight slot holds, which decides how it is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    ConvWeight { fan_in: usize },
    ConvBias { fan_in: usize },
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl SlotKind {
    pub fn trainable(self) -> bool {
        !matches!(self, SlotKind::BnMean | SlotKind::BnVar)
    }
}

/// A slot demanded by the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: SlotKind,
}

/// Qualified name of a conv unit inside layer `layer`.
pub(crate) fn unit_prefix(layer: usize, unit: &str) -> String {
    if unit.is_empty() {
        format!("model.{layer}")
    } else {
        format!("model.{layer}.{unit}")
    }
}

impl ModelGraph {
    /// Every weight slot in graph order.
    pub fn weight_slots(&self) -> Vec<SlotSpec> {
        let mut slots = Vec::new();
        for (i, layer) in self.layers().iter().enumerate() {
            for u in layer.kind.conv_units() {
                let prefix = unit_prefix(i, &u.name);
                let fan_in = u.cin * u.k * u.k;
                if u.bn {
                    slots.push(SlotSpec {
                        name: format!("{prefix}.conv.weight"),
                        shape: vec![u.cout, u.cin, u.k, u.k],
                        kind: SlotKind::ConvWeight { fan_in },
                    });
                    for (suffix, kind) in [
                        ("weight", SlotKind::BnGamma),
                        ("bias", SlotKind::BnBeta),
                        ("running_mean", SlotKind::BnMean),
                        ("running_var", SlotKind::BnVar),
                    ] {
                        slots.push(SlotSpec {
                            name: format!("{prefix}.bn.{suffix}"),
                            shape: vec![u.cout],
                            kind,
                        });
                    }
                } else {
                    slots.push(SlotSpec {
                        name: format!("{prefix}.weight"),
                        shape: vec![u.cout, u.cin, u.k, u.k],
                        kind: SlotKind::ConvWeight { fan_in },
                    });
                    slots.push(SlotSpec {
                        name: format!("{prefix}.bias"),
                        shape: vec![u.cout],
                        kind: SlotKind::ConvBias { fan_in },
                    });
                }
            }
        }
        slots
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<WeightEntry>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<(), WeightFileError> {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor '{name}' data does not match its shape"
        );
        if self.index.contains_key(&name) {
            return Err(WeightFileError::DuplicateName(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(WeightEntry { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut WeightEntry> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All-zero trainable weights; BN running variance set to 1.
    pub fn zeros(graph: &ModelGraph) -> Self {
        let mut store = WeightStore::new();
        for slot in graph.weight_slots() {
            let len = slot.shape.iter().product();
            let value = if slot.kind == SlotKind::BnVar { 1.0 } else { 0.0 };
            store
                .insert(slot.name, slot.shape, vec![value; len])
                .expect("graph slots are unique");
        }
        store
    }

    /// Checks that every slot of `graph` is present with the right shape and
    /// that nothing else is stored.
    pub fn check_against(&self, graph: &ModelGraph) -> Result<(), GraphError> {
        let slots = graph.weight_slots();
        for slot in &slots {
            let entry = self
                .get(&slot.name)
                .ok_or_else(|| GraphError::MissingSlot(slot.name.clone()))?;
            if entry.shape != slot.shape {
                return Err(GraphError::SlotShape {
                    name: slot.name.clone(),
                    expected: slot.shape.clone(),
                    actual: entry.shape.clone(),
                });
            }
        }
        if self.entries.len() != slots.len() {
            let wanted: std::collections::HashSet<&str> = slots.iter().map(|s| s.name.as_str()).collect();
            if let Some(extra) = self.entries.iter().find(|e| !wanted.contains(e.name.as_str())) {
                return Err(GraphError::UnexpectedSlot(extra.name.clone()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WeightFileError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| WeightFileError::TooLarge(e.name.clone()))?;
            let ndim = u8::try_from(e.shape.len()).map_err(|_| WeightFileError::TooLarge(e.name.clone()))?;
            buf.extend_from_slice(&name_len.to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(ndim);
            for &d in &e.shape {
                let d = u32::try_from(d).map_err(|_| WeightFileError::TooLarge(e.name.clone()))?;
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightFileError> {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(WeightFileError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(WeightFileError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(WeightFileError::BadVersion(version));
        }
        let count = r.u32()?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| WeightFileError::BadName)?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| WeightFileError::TooLarge(name.clone()))?;
            let data = r
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(name, shape, data)?;
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(WeightFileError::Checksum { stored, computed });
        }
        if r.pos != bytes.len() {
            return Err(WeightFileError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFileError> {
        let end = self.pos.checked_add(n).ok_or(WeightFileError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(WeightFileError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WeightFileError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WeightFileError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<(), WeightFileError> {
    std::fs::write(path, store.to_bytes()?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore, WeightFileError> {
    WeightStore::from_bytes(&std::fs::read(path)?)
}

/// Fills every slot in graph order from one SplitMix64 stream. Conv weights
/// and biases are uniform in `[-b, b]` with `b = sqrt(1 / fan_in)`; batch
/// norm starts as the identity (gamma 1, beta 0, mean 0, var 1).
pub fn init_weights(graph: &ModelGraph, seed: u64) -> WeightStore {
    let mut rng = SplitMix64::new(seed);
    let mut store = WeightStore::new();
    for slot in graph.weight_slots() {
        let len: usize = slot.shape.iter().product();
        let data = match slot.kind {
            SlotKind::ConvWeight { fan_in } | SlotKind::ConvBias { fan_in } => {
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..len)
                    .map(|_| ((2.0 * rng.next_f64() - 1.0) * bound) as f32)
                    .collect()
            }
            SlotKind::BnGamma | SlotKind::BnVar => vec![1.0; len],
            SlotKind::BnBeta | SlotKind::BnMean => vec![0.0; len],
        };
        store
            .insert(slot.name, slot.shape, data)
            .expect("graph slots are unique");
    }
    store
}
