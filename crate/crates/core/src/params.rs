//! Named parameters, normalization buffers, and the checkpoint format.
//!
//! A checkpoint is a JSON header followed by raw little-endian `f64` values:
//!
//! ```text
//! magic "CGCKPT01" | u64 LE header length | header JSON | f64 LE payload
//! ```
//!
//! The header lists every parameter and running-statistics buffer with its
//! name, shape, and element offset into the payload, plus free-form metadata
//! (the resolved configuration and its hash).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{RunningStats, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CGCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(usize);

/// Which part of the model owns a parameter. Used for learning-rate groups
/// and ablation parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Fpn,
    DensityHead,
    DensityBranch,
    RepresentationBranch,
    PointHead,
}

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±gain·sqrt(6 / fan_in)`.
    FanInUniform { fan_in: usize, gain: f64 },
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<(String, RunningStats)>,
    by_name: BTreeMap<String, ParamId>,
}

/// 64-bit FNV-1a, used to derive per-parameter RNG streams from names.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Its initial values depend only on
    /// `seed` and `name`, so models that differ in which modules exist still
    /// share identical initial weights for the modules they have in common.
    pub fn register(&mut self, name: &str, group: ParamGroup, shape: &[usize], init: Init, seed: u64) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::FanInUniform { fan_in, gain } => {
                let bound = gain * (6.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
                (0..numel).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        let tensor = Tensor::new(shape, data).expect("positive shape").with_requires_grad(true);
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            tensor,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn register_buffer(&mut self, name: &str, channels: usize) -> BufferId {
        assert!(self.buffers.iter().all(|(n, _)| n != name), "duplicate buffer {name}");
        self.buffers.push((name.to_string(), RunningStats::identity(channels)));
        BufferId(self.buffers.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut RunningStats {
        &mut self.buffers[id.0].1
    }

    pub fn buffers(&self) -> &[(String, RunningStats)] {
        &self.buffers
    }

    /// Number of scalar parameters in the given groups.
    pub fn count(&self, groups: &[ParamGroup]) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Sets every gradient slot to zeros.
    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Adds the gradients held by the tape's parameter leaves. Call once per
    /// [`Tape::backward`].
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            self.params[id.0].tensor.accumulate_grad(g);
        }
    }

    /// Flat copy of all parameter and buffer values, in registration order.
    pub fn snapshot(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in &self.params {
            out.extend_from_slice(p.tensor.data());
        }
        for (_, b) in &self.buffers {
            out.extend_from_slice(&b.mean);
            out.extend_from_slice(&b.var);
        }
        out
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file, metadata)?;
        file.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write, metadata: serde_json::Value) -> Result<()> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for p in &self.params {
            entries.push(HeaderEntry {
                name: p.name.clone(),
                kind: EntryKind::Param,
                shape: p.tensor.shape().to_vec(),
                offset,
            });
            offset += p.tensor.numel();
        }
        for (name, b) in &self.buffers {
            entries.push(HeaderEntry {
                name: name.clone(),
                kind: EntryKind::RunningStats,
                shape: vec![2, b.channels()],
                offset,
            });
            offset += 2 * b.channels();
        }
        let header = Header {
            total: offset,
            entries,
            metadata,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in self.snapshot() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Loads values into an already-registered store of identical layout.
    /// Returns the header metadata.
    pub fn load(&mut self, path: &Path) -> Result<serde_json::Value> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        self.read_from(&mut file)
    }

    pub fn read_from(&mut self, r: &mut impl Read) -> Result<serde_json::Value> {
        let (header, values) = read_checkpoint(r)?;
        let expected_params = self.params.len();
        if header.entries.len() != expected_params + self.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} entries, model expects {}",
                header.entries.len(),
                expected_params + self.buffers.len()
            )));
        }
        for (i, e) in header.entries.iter().enumerate() {
            let (name, shape): (&str, Vec<usize>) = if i < expected_params {
                let p = &self.params[i];
                (&p.name, p.tensor.shape().to_vec())
            } else {
                let (n, b) = &self.buffers[i - expected_params];
                (n, vec![2, b.channels()])
            };
            if e.name != name || e.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "entry {i}: checkpoint has {} {:?}, model expects {name} {shape:?}",
                    e.name, e.shape
                )));
            }
            let n: usize = shape.iter().product();
            let src = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("entry {} out of payload bounds", e.name)))?;
            if i < expected_params {
                self.params[i].tensor.data_mut().copy_from_slice(src);
            } else {
                let b = &mut self.buffers[i - expected_params].1;
                let c = b.channels();
                b.mean.copy_from_slice(&src[..c]);
                b.var.copy_from_slice(&src[c..]);
            }
        }
        Ok(header.metadata)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Param,
    RunningStats,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    total: usize,
    entries: Vec<HeaderEntry>,
    metadata: serde_json::Value,
}

fn read_checkpoint(r: &mut impl Read) -> Result<(Header, Vec<f64>)> {
    let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(bad)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(bad)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != header.total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header declares {} values",
            payload.len(),
            header.total
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

/// Reads only the metadata block of a checkpoint.
pub fn read_checkpoint_metadata(path: &Path) -> Result<serde_json::Value> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(read_checkpoint(&mut file)?.0.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("a", ParamGroup::Backbone, &[2, 3], Init::FanInUniform { fan_in: 3, gain: 1.0 }, 7);
        s.register("b", ParamGroup::PointHead, &[4], Init::Ones, 7);
        s.register_buffer("bn", 3);
        s
    }

    #[test]
    fn init_depends_on_seed_and_name_only() {
        let a = store();
        let mut other = ParamStore::new();
        other.register("z", ParamGroup::Fpn, &[5], Init::Zeros, 7);
        let id = other.register("a", ParamGroup::Backbone, &[2, 3], Init::FanInUniform { fan_in: 3, gain: 1.0 }, 7);
        assert_eq!(a.tensor(a.id("a").unwrap()).data(), other.tensor(id).data());
        let bound = (6.0f64 / 3.0).sqrt();
        assert!(a.tensor(a.id("a").unwrap()).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut a = store();
        a.buffer_mut(BufferId(0)).mean[1] = 0.25;
        let mut bytes = Vec::new();
        a.write_to(&mut bytes, serde_json::json!({"hash": "abc"})).unwrap();
        // header length prefix then JSON
        assert_eq!(&bytes[..8], MAGIC);
        let mut b = store();
        b.tensor_mut(b.id("b").unwrap()).data_mut()[0] = -3.0;
        let meta = b.read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(meta["hash"], "abc");
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn layout_mismatch_is_a_checkpoint_error() {
        let a = store();
        let mut bytes = Vec::new();
        a.write_to(&mut bytes, serde_json::Value::Null).unwrap();
        let mut other = ParamStore::new();
        other.register("a", ParamGroup::Backbone, &[3, 2], Init::Zeros, 0);
        assert!(matches!(other.read_from(&mut bytes.as_slice()), Err(Error::Checkpoint(_))));
        assert!(matches!(store().read_from(&mut &bytes[..20]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn counts_by_group() {
        let s = store();
        assert_eq!(s.count(&[ParamGroup::Backbone]), 6);
        assert_eq!(s.count(&[ParamGroup::Backbone, ParamGroup::PointHead]), 10);
    }
}
