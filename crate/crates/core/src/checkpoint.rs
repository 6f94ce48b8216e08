//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FNFM" | u32 version | u32 n_components | u8 component codes
//! | u32 config_len | config JSON bytes | u64 seed
//! | u32 n_tensors | per tensor: u32 name_len, name, u32 ndim, u32 dims, f32 values
//! | SHA-256 of everything before it (32 bytes)
//! ```
//!
//! Weights are trained in 64-bit and stored as 32-bit: saving rounds each
//! value to the nearest `f32`, loading widens it exactly. A loaded model
//! therefore saves back to identical bytes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::Adapter;
use crate::classifier::{ClassifierConfig, ClassifierModel};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::params::ParamStore;
use crate::pretrain::ReconstructionHead;
use crate::signal::NormalizationSpec;
use crate::tensor::Initializer;

pub const MAGIC: &[u8; 4] = b"FNFM";
pub const FORMAT_VERSION: u32 = 1;
const NORMALIZATION_TENSOR: &str = "normalization";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Encoder,
    ChannelAttention,
    Decoder,
    Adapter,
    NormalizationSpec,
}

impl Component {
    fn code(self) -> u8 {
        match self {
            Component::Encoder => 0,
            Component::ChannelAttention => 1,
            Component::Decoder => 2,
            Component::Adapter => 3,
            Component::NormalizationSpec => 4,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Component::Encoder,
            1 => Component::ChannelAttention,
            2 => Component::Decoder,
            3 => Component::Adapter,
            4 => Component::NormalizationSpec,
            _ => return Err(Error::Format(format!("unknown checkpoint component code {c}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Raw checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub components: Vec<Component>,
    /// Config snapshot as JSON text.
    pub config: String,
    pub seed: u64,
    pub tensors: Vec<TensorRecord>,
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
            .ok_or_else(|| Error::Corruption("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Corruption(e.to_string()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, self.components.len())?;
        out.extend(self.components.iter().map(|c| c.code()));
        put_u32(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(Error::shape(format!("tensor {} has shape {:?}", t.name, t.shape)));
            }
            put_u32(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len())?;
            for &d in &t.shape {
                put_u32(&mut out, d)?;
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corruption("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let n = r.u32()? as usize;
        let components = r.take(n)?.iter().map(|&c| Component::from_code(c)).collect::<Result<_>>()?;
        let config = r.string()?;
        let seed = r.u64()?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(1 << 16));
        for _ in 0..n_tensors {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let values = r
                .take(numel.checked_mul(4).ok_or_else(|| Error::Corruption("tensor too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(TensorRecord { name, shape, values });
        }
        if r.pos != body.len() {
            return Err(Error::Corruption("trailing bytes after tensor records".into()));
        }
        Ok(Checkpoint {
            components,
            config,
            seed,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    fn require(&self, needed: &[Component], kind: &str) -> Result<()> {
        if needed.iter().any(|c| !self.components.contains(c)) {
            return Err(Error::ManifestType {
                expected: kind.to_string(),
                found: self.components.iter().map(|c| format!("{c:?}")).collect(),
            });
        }
        Ok(())
    }

    fn push_store(&mut self, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push(TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.values().iter().map(|&v| v as f32).collect(),
            });
        }
    }

    fn push_normalization(&mut self, spec: &NormalizationSpec) {
        self.tensors.push(TensorRecord {
            name: NORMALIZATION_TENSOR.into(),
            shape: vec![spec.len(), 6],
            values: spec.to_rows().iter().map(|&v| v as f32).collect(),
        });
    }

    fn record(&self, name: &str) -> Result<&TensorRecord> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }

    /// Overwrites every tensor of `store` from the records of the same name.
    fn fill_store(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let rec = self.record(&name)?;
            store.set_values(&name, &rec.shape, rec.values.iter().map(|&v| f64::from(v)).collect())?;
        }
        Ok(())
    }

    fn normalization(&self) -> Result<NormalizationSpec> {
        let rec = self.record(NORMALIZATION_TENSOR)?;
        NormalizationSpec::from_rows(&rec.values.iter().map(|&v| f64::from(v)).collect::<Vec<_>>())
    }

    fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_str(&self.config)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderSnapshot {
    encoder: EncoderConfig,
}

/// A pretrained encoder with its reconstruction head.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub encoder: Encoder,
    pub head: ReconstructionHead,
    pub normalization: NormalizationSpec,
    pub seed: u64,
}

impl EncoderState {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            components: vec![Component::Encoder, Component::NormalizationSpec],
            config: serde_json::to_string(&EncoderSnapshot {
                encoder: self.encoder.config,
            })?,
            seed: self.seed,
            tensors: Vec::new(),
        };
        ck.push_store(self.encoder.params());
        ck.push_store(&self.head.params);
        ck.push_normalization(&self.normalization);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.require(&[Component::Encoder, Component::NormalizationSpec], "encoder")?;
        let snap: EncoderSnapshot = ck.config_as()?;
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(ck.seed));
        let mut encoder = Encoder::with_initializer(snap.encoder, &mut init)?;
        let mut head = ReconstructionHead::new(snap.encoder.d_model, snap.encoder.input_channels, &mut init);
        ck.fill_store(encoder.params_mut())?;
        ck.fill_store(&mut head.params)?;
        Ok(EncoderState {
            encoder,
            head,
            normalization: ck.normalization()?,
            seed: ck.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSnapshot {
    encoder: EncoderConfig,
    classifier: ClassifierConfig,
}

/// A trained ensemble member with the normalization it was trained under.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub model: ClassifierModel,
    pub classifier: ClassifierConfig,
    pub normalization: NormalizationSpec,
}

impl ModelState {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            components: vec![
                Component::Encoder,
                Component::ChannelAttention,
                Component::Decoder,
                Component::NormalizationSpec,
            ],
            config: serde_json::to_string(&ModelSnapshot {
                encoder: self.model.encoder.config,
                classifier: self.classifier,
            })?,
            seed: self.model.seed,
            tensors: Vec::new(),
        };
        ck.push_store(self.model.encoder.params());
        ck.push_store(&self.model.channel.params);
        ck.push_store(&self.model.decoder.params);
        ck.push_normalization(&self.normalization);
        Ok(ck)
    }

    /// The loaded model is fully frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.require(
            &[
                Component::Encoder,
                Component::ChannelAttention,
                Component::Decoder,
                Component::NormalizationSpec,
            ],
            "classifier",
        )?;
        let snap: ModelSnapshot = ck.config_as()?;
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(ck.seed));
        let mut encoder = Encoder::with_initializer(snap.encoder, &mut init)?;
        ck.fill_store(encoder.params_mut())?;
        let mut model = ClassifierModel::new(encoder, &snap.classifier, &mut init, ck.seed)?;
        ck.fill_store(&mut model.channel.params)?;
        ck.fill_store(&mut model.decoder.params)?;
        model.freeze();
        Ok(ModelState {
            model,
            classifier: snap.classifier,
            normalization: ck.normalization()?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterSnapshot {
    c_new: usize,
    c_model: usize,
    hidden: usize,
}

/// A trained adapter with the normalization fitted on its training trials.
#[derive(Debug, Clone)]
pub struct AdapterState {
    pub adapter: Adapter,
    pub normalization: NormalizationSpec,
    pub seed: u64,
}

impl AdapterState {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let a = &self.adapter;
        let mut ck = Checkpoint {
            components: vec![Component::Adapter, Component::NormalizationSpec],
            config: serde_json::to_string(&AdapterSnapshot {
                c_new: a.c_new,
                c_model: a.c_model,
                hidden: a.hidden,
            })?,
            seed: self.seed,
            tensors: Vec::new(),
        };
        ck.push_store(&a.params);
        ck.push_normalization(&self.normalization);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.require(&[Component::Adapter, Component::NormalizationSpec], "adapter")?;
        let snap: AdapterSnapshot = ck.config_as()?;
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(ck.seed));
        let mut adapter = Adapter::new(snap.c_new, snap.c_model, snap.hidden, &mut init)?;
        ck.fill_store(&mut adapter.params)?;
        adapter.params.set_trainable(false);
        Ok(AdapterState {
            adapter,
            normalization: ck.normalization()?,
            seed: ck.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
