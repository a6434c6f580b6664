//! Object and dense memory. Entries are generic over the handle type so the
//! same state can live inside a graph (`Var`) or between graphs (`Tensor`).

use clickvos_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjMemMode {
    /// Only the first frame's object tokens are ever used.
    FirstOnly,
    /// Object tokens of every processed frame are kept.
    #[default]
    All,
}

impl std::str::FromStr for ObjMemMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_only" => Ok(Self::FirstOnly),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown object memory mode {s:?} (expected first_only or all)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryFlags {
    pub objmem: ObjMemMode,
    pub dense: bool,
}

impl Default for MemoryFlags {
    fn default() -> Self {
        Self {
            objmem: ObjMemMode::All,
            dense: true,
        }
    }
}

/// Key tokens `z` and their identity-tagged values `z_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry<H> {
    pub z: H,
    pub z_id: H,
    pub rows: usize,
}

impl<H> MemoryEntry<H> {
    fn map<K>(&self, f: &mut impl FnMut(&H) -> K) -> MemoryEntry<K> {
        MemoryEntry {
            z: f(&self.z),
            z_id: f(&self.z_id),
            rows: self.rows,
        }
    }
}

/// One token per id (background first).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<H> {
    pub entry: MemoryEntry<H>,
    pub ids: Vec<u8>,
    /// Set for ids with no cell in the pooled mask; their tokens are zero.
    pub absent: Vec<bool>,
}

/// One token per feature cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTokens<H> {
    pub entry: MemoryEntry<H>,
    /// Majority label per cell.
    pub labels: Vec<u8>,
}

/// Sizes after a memory update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MemoryTrace {
    pub frame: usize,
    pub object_slots: usize,
    pub object_rows: usize,
    pub dense_slots: usize,
    pub key_rows: usize,
    pub value_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState<H> {
    pub flags: MemoryFlags,
    pub object: Vec<TokenSet<H>>,
    pub dense_first: Option<DenseTokens<H>>,
    pub dense_prev: Option<DenseTokens<H>>,
    frames: usize,
}

impl<H> MemoryState<H> {
    /// Memory seeded with the click tokens.
    pub fn new(flags: MemoryFlags, points: TokenSet<H>) -> Self {
        Self {
            flags,
            object: vec![points],
            dense_first: None,
            dense_prev: None,
            frames: 0,
        }
    }

    /// Frames committed so far.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Commits frame `frames() + 1`. In `All` mode the first frame's pooled
    /// tokens take the click tokens' slot and later frames are appended.
    /// The first dense slot is written once; the previous slot holds the
    /// latest frame from the second frame on.
    pub fn update(&mut self, pooled: TokenSet<H>, dense: DenseTokens<H>) {
        self.frames += 1;
        if self.flags.objmem == ObjMemMode::All {
            if self.frames == 1 {
                self.object[0] = pooled;
            } else {
                self.object.push(pooled);
            }
        }
        if self.flags.dense {
            if self.frames == 1 {
                self.dense_first = Some(dense);
            } else {
                self.dense_prev = Some(dense);
            }
        }
    }

    pub fn dense_slots(&self) -> usize {
        self.dense_first.is_some() as usize + self.dense_prev.is_some() as usize
    }

    /// Entries in key/value order: object slots oldest first, then dense first, then dense previous.
    pub fn entries(&self) -> Vec<&MemoryEntry<H>> {
        let mut out: Vec<&MemoryEntry<H>> = self.object.iter().map(|t| &t.entry).collect();
        out.extend(self.dense_first.iter().map(|d| &d.entry));
        out.extend(self.dense_prev.iter().map(|d| &d.entry));
        out
    }

    pub fn trace(&self) -> MemoryTrace {
        let rows: usize = self.entries().iter().map(|e| e.rows).sum();
        MemoryTrace {
            frame: self.frames,
            object_slots: self.object.len(),
            object_rows: self.object.iter().map(|t| t.entry.rows).sum(),
            dense_slots: self.dense_slots(),
            key_rows: rows,
            value_rows: rows,
        }
    }

    pub fn map<K>(&self, mut f: impl FnMut(&H) -> K) -> MemoryState<K> {
        MemoryState {
            flags: self.flags,
            object: self
                .object
                .iter()
                .map(|t| TokenSet {
                    entry: t.entry.map(&mut f),
                    ids: t.ids.clone(),
                    absent: t.absent.clone(),
                })
                .collect(),
            dense_first: self.dense_first.as_ref().map(|d| DenseTokens {
                entry: d.entry.map(&mut f),
                labels: d.labels.clone(),
            }),
            dense_prev: self.dense_prev.as_ref().map(|d| DenseTokens {
                entry: d.entry.map(&mut f),
                labels: d.labels.clone(),
            }),
            frames: self.frames,
        }
    }
}

impl MemoryState<Var> {
    /// Keys and values stacked row-wise.
    pub fn keys_values(&self, g: &mut Graph) -> Result<(Var, Var)> {
        let entries = self.entries();
        let keys: Vec<Var> = entries.iter().map(|e| e.z).collect();
        let values: Vec<Var> = entries.iter().map(|e| e.z_id).collect();
        let k = if keys.len() == 1 { keys[0] } else { g.concat(&keys, 0)? };
        let v = if values.len() == 1 { values[0] } else { g.concat(&values, 0)? };
        Ok((k, v))
    }

    pub fn materialize(&self, g: &Graph) -> MemoryState<Tensor> {
        self.map(|&v| Tensor::new(g.shape(v).to_vec(), g.value(v).to_vec()).expect("graph values match shapes"))
    }
}

impl MemoryState<Tensor> {
    /// Places the stored tokens into `g` as constants.
    pub fn bind(&self, g: &mut Graph) -> MemoryState<Var> {
        self.map(|t| g.constant(t.clone()))
    }

    /// Stacked keys and values as plain buffers.
    pub fn stacked(&self) -> (Vec<f64>, Vec<f64>) {
        let mut k = Vec::new();
        let mut v = Vec::new();
        for e in self.entries() {
            k.extend_from_slice(e.z.data());
            v.extend_from_slice(e.z_id.data());
        }
        (k, v)
    }
}
