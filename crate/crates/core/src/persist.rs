//! Files: atomic writes, search checkpoints and the trained-model format.
//!
//! Model layout (little endian): magic `BNASMDL1`, `u32` header length,
//! JSON header, then one payload per header entry in order. Dense entries
//! are raw `f32`s. Packed entries hold their amplitudes as `f32`s followed
//! by `ceil(n/8)` bytes of sign bits (bit set means `+1`, LSB first).
//! Batch-norm running means and variances follow as `f32`s.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitops::{fit_amplitude, BinarizeConfig, BinarizeMode, PackedBits};
use crate::error::{Error, Location, Result};
use crate::genotype::Genotype;
use crate::nn::{NetworkConfig, ParamKind};
use crate::search::SearchState;
use crate::tensor::Tensor;
use crate::train::FinalNet;

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`, so readers see either the old or the new contents.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a search mid-iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchCheckpoint {
    pub version: u32,
    pub seed: u64,
    /// Serialized search-relevant configuration; a resume must match it.
    pub fingerprint: String,
    pub state: SearchState,
    pub backend: serde_json::Value,
}

impl SearchCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::state(format!("checkpoint: {e}")))?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ck: SearchCheckpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            location: Location::Line(e.line()),
            message: format!("checkpoint: {e}"),
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::state(format!("checkpoint version {} is not supported", ck.version)));
        }
        Ok(ck)
    }
}

const MODEL_MAGIC: &[u8; 8] = b"BNASMDL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Storage {
    Dense,
    Packed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub storage: Storage,
    /// Number of amplitudes in a packed entry.
    pub amplitudes: usize,
}

impl ModelEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Bytes this entry occupies in the payload.
    pub fn byte_len(&self) -> usize {
        match self.storage {
            Storage::Dense => 4 * self.numel(),
            Storage::Packed => 4 * self.amplitudes + self.numel().div_ceil(8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub genotype: String,
    pub network: NetworkConfig,
    pub binarize: Option<BinarizeConfig>,
    pub entries: Vec<ModelEntry>,
    pub bn_channels: Vec<usize>,
}

impl ModelHeader {
    /// Payload bytes taken by convolution kernels and their amplitudes.
    pub fn conv_weight_bytes(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.kind, ParamKind::Conv | ParamKind::BinaryConv | ParamKind::Amplitude))
            .map(ModelEntry::byte_len)
            .sum()
    }
}

fn amplitude_for(model: &FinalNet, weight_name: &str, value: &Tensor<f32>, cfg: BinarizeConfig) -> Result<Vec<f32>> {
    if cfg.mode == BinarizeMode::PcnnAmp {
        let amp_name = format!("{}.amp", weight_name.trim_end_matches(".weight"));
        if let Some(p) = model.net.store.params().iter().find(|p| p.name == amp_name) {
            return Ok(p.value.data().iter().map(|a| a.max(0.0)).collect());
        }
    }
    fit_amplitude(value, cfg.granularity)
}

/// Serializes a trained model; binarized kernels are stored as bits.
pub fn encode_model(model: &FinalNet) -> Result<(ModelHeader, Vec<u8>)> {
    let store = &model.net.store;
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for p in store.params() {
        let packed = match (p.kind, model.net.binarize) {
            (ParamKind::BinaryConv, Some(cfg)) => Some(amplitude_for(model, &p.name, &p.value, cfg)?),
            _ => None,
        };
        let entry = ModelEntry {
            name: p.name.clone(),
            kind: p.kind,
            shape: p.value.shape().to_vec(),
            storage: if packed.is_some() { Storage::Packed } else { Storage::Dense },
            amplitudes: packed.as_ref().map_or(0, Vec::len),
        };
        match packed {
            Some(amps) => {
                amps.iter().for_each(|a| payload.extend_from_slice(&a.to_le_bytes()));
                let bits = PackedBits::pack(p.value.data());
                let bytes: Vec<u8> = bits.words.iter().flat_map(|w| w.to_le_bytes()).collect();
                payload.extend_from_slice(&bytes[..bits.byte_len()]);
            }
            None => p.value.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
        }
        entries.push(entry);
    }
    for s in store.stats() {
        for v in s.mean.iter().chain(&s.var) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = ModelHeader {
        genotype: model.genotype.to_text(),
        network: model.net.config.clone(),
        binarize: model.net.binarize,
        entries,
        bn_channels: store.stats().iter().map(|s| s.mean.len()).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::state(format!("model header: {e}")))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok((header, out))
}

pub fn save_model(model: &FinalNet, path: &Path) -> Result<ModelHeader> {
    let (header, bytes) = encode_model(model)?;
    write_atomic(path, &bytes)?;
    Ok(header)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::at_offset(self.bytes.len() as u64, format!("model file truncated, {n} more bytes expected")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

/// Parses a model file. Packed kernels are restored as `A ⊙ D`, which
/// binarizes back to the same signs and amplitudes.
pub fn decode_model(bytes: &[u8]) -> Result<(ModelHeader, FinalNet)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::at_offset(0, "not a model file"));
    }
    let len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
    let header: ModelHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::at_offset(12 + e.column() as u64, format!("model header: {e}")))?;
    let genotype = Genotype::parse(&header.genotype)?;
    let mut model = FinalNet::build(&genotype, header.network.clone(), header.binarize, &mut ChaCha8Rng::seed_from_u64(0))?;
    let store = &mut model.net.store;
    if store.len() != header.entries.len() || store.stats().len() != header.bn_channels.len() {
        return Err(Error::at_offset(12, "model header does not match its genotype"));
    }
    for (p, e) in store.params_mut().iter_mut().zip(&header.entries) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::at_offset(12, format!("entry {} does not match parameter {}", e.name, p.name)));
        }
        let values = match e.storage {
            Storage::Dense => r.f32s(e.numel())?,
            Storage::Packed => {
                let amps = r.f32s(e.amplitudes)?;
                let n = e.numel();
                if amps.is_empty() || n % amps.len() != 0 {
                    return Err(Error::at_offset(r.pos as u64, format!("entry {} has {} amplitudes", e.name, amps.len())));
                }
                let bits = r.take(n.div_ceil(8))?;
                let group = n / amps.len();
                (0..n).map(|i| if bits[i / 8] >> (i % 8) & 1 == 1 { amps[i / group] } else { -amps[i / group] }).collect()
            }
        };
        p.value.data_mut().copy_from_slice(&values);
    }
    for s in store.stats_mut() {
        let c = s.mean.len();
        s.mean = r.f32s(c)?;
        s.var = r.f32s(c)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::at_offset(r.pos as u64, "trailing bytes after model payload"));
    }
    Ok((header, model))
}

pub fn load_model(path: &Path) -> Result<(ModelHeader, FinalNet)> {
    decode_model(&fs::read(path)?)
}

