//! Named parameter storage, initialisers and checkpoint files.
//!
//! A checkpoint is a [`container`](crate::tensor::container) whose manifest
//! lists every parameter with its shape and byte offset, followed by f64
//! tensor records in registration order.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{container, record_len, DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether L2 weight decay applies (weights yes; biases and norm gains no).
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, decay });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Total scalar count, optionally restricted to names with a prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    /// Copies values for every name present in `other` with a matching shape.
    /// Returns how many parameters were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.id(&p.name).map(|id| other.get(id)) {
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        self.save_with_config(path, config_hash, None)
    }

    /// Like [`save`](Self::save), embedding a JSON config in the manifest.
    pub fn save_with_config(
        &self,
        path: &Path,
        config_hash: &str,
        config: Option<serde_json::Value>,
    ) -> Result<()> {
        let mut records = Vec::new();
        let mut entries = Vec::with_capacity(self.params.len());
        for p in &self.params {
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: records.len() as u64,
                decay: p.decay,
            });
            p.value.write_record(&mut records, DType::F64)?;
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash.to_string(),
            config,
            params: entries,
        };
        container::write(path, &manifest, &records)
    }

    pub fn load(path: &Path) -> Result<(ParamStore, CheckpointManifest)> {
        let (manifest, records): (CheckpointManifest, Vec<u8>) = container::read(path)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::CorruptFile(format!(
                "unexpected checkpoint format {}",
                manifest.format
            )));
        }
        let mut store = ParamStore::new();
        let mut expected_offset = 0u64;
        for e in &manifest.params {
            if e.offset != expected_offset {
                return Err(Error::CorruptFile(format!("offset mismatch for {}", e.name)));
            }
            let start = e.offset as usize;
            let slice = records
                .get(start..)
                .ok_or_else(|| Error::CorruptFile(format!("{} past end of file", e.name)))?;
            let t = Tensor::read_record(&mut &slice[..])?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::CorruptFile(format!("shape mismatch for {}", e.name)));
            }
            expected_offset += record_len(&e.shape, DType::F64) as u64;
            store.add(e.name.clone(), t, e.decay)?;
        }
        if expected_offset as usize != records.len() {
            return Err(Error::CorruptFile("trailing bytes after records".into()));
        }
        Ok((store, manifest))
    }
}

pub const CHECKPOINT_FORMAT: &str = "coattn-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub params: Vec<ManifestEntry>,
}

impl CheckpointManifest {
    /// Scalars listed in the manifest under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }
}

/// Parameters recorded on a tape for one forward pass.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps vars given in registration order, e.g. inputs of a gradient check.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients in registration order, zeros where none flowed.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

/// He-normal: `N(0, 2/fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Xavier-uniform: `U(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-a..a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        s.add("a.weight", he_normal(&[3, 4], 3, &mut rng), true).unwrap();
        s.add("a.bias", Tensor::zeros([4]), false).unwrap();
        s.add("b.weight", xavier_uniform(&[4, 2], 4, 2, &mut rng), true)
            .unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.add("a.bias", Tensor::zeros([1]), false).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let s = store();
        s.save(&path, "abc123").unwrap();
        let (back, manifest) = ParamStore::load(&path).unwrap();
        assert_eq!(manifest.config_hash, "abc123");
        assert_eq!(manifest.count(""), s.count(""));
        assert_eq!(manifest.count("a."), 16);
        for (p, q) in s.params().iter().zip(back.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.decay, q.decay);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.value), bits(&q.value));
        }
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        store().save(&path, "h").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::CorruptFile(_))));
        std::fs::write(&path, &bytes[..4]).unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn he_normal_has_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = he_normal(&[200, 100], 50, &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "{var}");
    }
}
