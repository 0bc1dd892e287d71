//! Named parameter storage with a frozen/trainable partition.
//!
//! Every tensor in a model is created through a [`ParamStore`]. Modules get
//! detached handles to frozen entries, so those never take part in
//! backpropagation; trainable entries and buffers hand out the tracked
//! [`Var`] tensor. Initial values are drawn from
//! an RNG seeded by `(seed, name)`, so a parameter's initial value does not
//! depend on the order in which modules are built.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKind {
    /// Base weight; never updated.
    Frozen,
    /// Updated by the optimizer.
    Trainable,
    /// Non-gradient state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
}

impl Init {
    /// Kaiming-style uniform init for a layer with `fan_in` inputs.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    kind: ParamKind,
}

impl Entry {
    fn kind(&self) -> ParamKind {
        self.kind
    }

    /// Frozen entries hand out detached views so no gradient is tracked,
    /// while still sharing storage with the store.
    fn handle(&self) -> Tensor {
        match self.kind {
            ParamKind::Frozen => self.var.as_tensor().detach(),
            ParamKind::Trainable | ParamKind::Buffer => self.var.as_tensor().clone(),
        }
    }

    fn tensor(&self) -> &Tensor {
        self.var.as_tensor()
    }
}

/// The exact `{frozen, trainable}` split of a model's parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamPartition {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
    pub buffers: BTreeSet<String>,
}

impl ParamPartition {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }
}

pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    entries: BTreeMap<String, Entry>,
    /// Tensors read from a checkpoint that no module has claimed yet.
    pending: HashMap<String, Tensor>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .field("entries", &self.entries.len())
            .field("pending", &self.pending.len())
            .finish()
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            device: Device::Cpu,
            entries: BTreeMap::new(),
            pending: HashMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Returns the named parameter, creating it on first use.
    ///
    /// A tensor loaded from a checkpoint takes precedence over `init`; its
    /// shape must match `shape` exactly.
    pub fn get_or_init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        kind: ParamKind,
    ) -> Result<Tensor> {
        if let Some(entry) = self.entries.get(name) {
            if entry.tensor().dims() != shape {
                return Err(Error::shape(format!(
                    "parameter {name}: stored shape {:?} vs requested {:?}",
                    entry.tensor().dims(),
                    shape
                )));
            }
            return Ok(entry.handle());
        }
        let tensor = match self.pending.remove(name) {
            Some(t) => {
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                        t.dims(),
                        shape
                    )));
                }
                t.to_dtype(self.dtype)?
            }
            None => self.sample(name, shape, init)?,
        };
        let entry = Entry {
            var: Var::from_tensor(&tensor)?,
            kind,
        };
        let out = entry.handle();
        self.entries.insert(name.to_string(), entry);
        Ok(out)
    }

    /// Like [`get_or_init`](Self::get_or_init) but returns the underlying
    /// variable; only valid for trainable parameters and buffers.
    pub fn get_var(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        kind: ParamKind,
    ) -> Result<Var> {
        if kind == ParamKind::Frozen {
            return Err(Error::config(format!("{name}: frozen parameters have no Var")));
        }
        self.get_or_init(name, shape, init, kind)?;
        let entry = &self.entries[name];
        match entry.kind {
            ParamKind::Frozen => Err(Error::config(format!("{name} is frozen"))),
            _ => Ok(entry.var.clone()),
        }
    }

    fn sample(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::config(format!("normal init for {name}: {e}")))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform { bound } => {
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::config(format!("uniform init for {name}: {e}")))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(Entry::tensor)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(Entry::kind)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overwrites a parameter's value in place (tests and checkpoint restore).
    pub fn set(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        match self.entries.get_mut(name) {
            None => Err(Error::config(format!("unknown parameter {name}"))),
            Some(entry) => {
                if entry.tensor().dims() != value.dims() {
                    return Err(Error::shape(format!(
                        "set {name}: {:?} vs {:?}",
                        entry.tensor().dims(),
                        value.dims()
                    )));
                }
                entry.var.set(&value)?;
                Ok(())
            }
        }
    }

    /// Reclassifies every trainable parameter under `prefix` as frozen.
    ///
    /// Modules built before the call keep their tracked handles, so gradients
    /// may still be computed for these tensors; the optimizer never sees them.
    pub fn freeze_prefix(&mut self, prefix: &str) -> Result<usize> {
        let mut count = 0;
        for (name, entry) in self.entries.iter_mut() {
            if name.starts_with(prefix) && entry.kind == ParamKind::Trainable {
                entry.kind = ParamKind::Frozen;
                count += 1;
            }
        }
        Ok(count)
    }

    pub fn partition(&self) -> ParamPartition {
        let mut p = ParamPartition::default();
        for (name, entry) in &self.entries {
            let set = match entry.kind() {
                ParamKind::Frozen => &mut p.frozen,
                ParamKind::Trainable => &mut p.trainable,
                ParamKind::Buffer => &mut p.buffers,
            };
            set.insert(name.clone());
        }
        p
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind() == ParamKind::Trainable)
            .map(|e| e.tensor().elem_count())
            .sum()
    }

    /// SHA-256 of each frozen tensor's little-endian f32 bytes.
    pub fn frozen_checksums(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (name, entry) in &self.entries {
            if entry.kind == ParamKind::Frozen {
                out.insert(name.clone(), tensor_digest(entry.tensor())?);
            }
        }
        Ok(out)
    }

    pub fn checksum(&self, name: &str) -> Result<Option<String>> {
        self.get(name).map(tensor_digest).transpose()
    }

    /// Number of checkpoint tensors that no module has claimed.
    pub fn unclaimed(&self) -> Vec<String> {
        let mut v: Vec<_> = self.pending.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.tensor().clone()))
            .collect()
    }

    /// Queues tensors (typically from a checkpoint) to be claimed by
    /// [`get_or_init`](Self::get_or_init) during model construction.
    pub fn preload(&mut self, tensors: HashMap<String, Tensor>) {
        self.pending.extend(tensors);
    }

    /// Writes every parameter plus `metadata` to a single safetensors file.
    pub fn save(
        &self,
        path: &Path,
        extra: &BTreeMap<String, Tensor>,
        metadata: HashMap<String, String>,
    ) -> Result<()> {
        let mut all: Vec<(String, Tensor)> = self
            .entries
            .iter()
            .map(|(n, e)| Ok((n.clone(), e.tensor().to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        for (n, t) in extra {
            all.push((n.clone(), t.to_dtype(DType::F32)?));
        }
        safetensors::serialize_to_file(all, Some(metadata), path)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
    }
}

pub fn tensor_digest(t: &Tensor) -> Result<String> {
    let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Reads a safetensors file written by [`ParamStore::save`].
pub fn load_checkpoint_file(
    path: &Path,
) -> Result<(HashMap<String, Tensor>, HashMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((tensors, metadata))
}
