//! Single-file training checkpoints with a JSON config sidecar.
//!
//! Layout: 8-byte magic `CLAFCKPT`, u64 LE header length, JSON header, then
//! the tensor blob. The header indexes every tensor (name, dtype, byte
//! offset, element count) and carries the non-tensor state: iteration,
//! loader and FA RNG streams, pseudo-label histogram, evaluation history and
//! the full effective config with its hash. Tensors cover online parameters
//! and buffers, the f64 EMA shadow and EMA buffers, SGD momentum, and the
//! class memory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::LoaderState;
use crate::error::{ClafError, Result};
use crate::evaluation::EvalRecord;
use crate::memory::MemoryEntry;
use crate::nn::Parameters;
use crate::pseudo_label::ClassHistogram;
use crate::rng::StreamRng;
use crate::trainer::Trainer;

const MAGIC: &[u8; 8] = b"CLAFCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub iteration: usize,
    pub config_hash: String,
    pub config: RunConfig,
    pub labeled_counts: Vec<usize>,
    pub loader: LoaderState,
    pub fa_rng: StreamRng,
    pub fa_totals: Vec<u64>,
    pub histogram: ClassHistogram,
    pub memory_lens: Vec<usize>,
    pub records: Vec<EvalRecord>,
    pub tensors: Vec<TensorEntry>,
}

enum Blob<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
    OwnedF32(Vec<f32>),
}

struct Writer<'a> {
    entries: Vec<TensorEntry>,
    blobs: Vec<Blob<'a>>,
    offset: u64,
}

impl<'a> Writer<'a> {
    fn add(&mut self, name: String, blob: Blob<'a>) {
        let (dtype, len, width) = match &blob {
            Blob::F32(v) => (DType::F32, v.len(), 4),
            Blob::OwnedF32(v) => (DType::F32, v.len(), 4),
            Blob::F64(v) => (DType::F64, v.len(), 8),
        };
        self.entries.push(TensorEntry {
            name,
            dtype,
            offset: self.offset,
            len: len as u64,
        });
        self.offset += (len * width) as u64;
        self.blobs.push(blob);
    }
}

/// Sidecar path holding the effective config as JSON.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn save(
    path: &Path,
    trainer: &Trainer,
    loader: &LoaderState,
    labeled_counts: &[usize],
    records: &[EvalRecord],
) -> Result<()> {
    let mut w = Writer {
        entries: Vec::new(),
        blobs: Vec::new(),
        offset: 0,
    };
    let model = &trainer.model;
    for p in model.online_params() {
        w.add(format!("online/{}", p.name), Blob::F32(&p.value));
    }
    for b in model.encoder.buffers() {
        w.add(format!("online_buffer/{}", b.name), Blob::F32(&b.value));
    }
    for (s, p) in model.ema_shadow().iter().zip(model.ema_params()) {
        w.add(format!("ema/{}", p.name), Blob::F64(s));
    }
    for b in model.ema.encoder.buffers() {
        w.add(format!("ema_buffer/{}", b.name), Blob::F32(&b.value));
    }
    for (i, m) in trainer.optimizer.momentum_buffers.iter().enumerate() {
        w.add(format!("momentum/{i}"), Blob::F32(m));
    }
    for k in 0..trainer.memory.num_classes() {
        let entries = trainer.memory.entries(k);
        let feats: Vec<f32> = entries.iter().flat_map(|e| e.feature.iter().copied()).collect();
        let embs: Vec<f32> = entries.iter().flat_map(|e| e.embedding.iter().copied()).collect();
        let conf: Vec<f32> = entries.iter().map(|e| e.confidence).collect();
        let aug: Vec<f32> = entries.iter().map(|e| if e.augmented { 1.0 } else { 0.0 }).collect();
        w.add(format!("memory/{k}/feature"), Blob::OwnedF32(feats));
        w.add(format!("memory/{k}/embedding"), Blob::OwnedF32(embs));
        w.add(format!("memory/{k}/confidence"), Blob::OwnedF32(conf));
        w.add(format!("memory/{k}/augmented"), Blob::OwnedF32(aug));
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        iteration: trainer.iter,
        config_hash: trainer.config.hash(),
        config: trainer.config.clone(),
        labeled_counts: labeled_counts.to_vec(),
        loader: loader.clone(),
        fa_rng: trainer.fa_rng.clone(),
        fa_totals: trainer.fa_totals.clone(),
        histogram: trainer.histogram.clone(),
        memory_lens: trainer.memory.fill(),
        records: records.to_vec(),
        tensors: w.entries,
    };

    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for blob in &w.blobs {
            match blob {
                Blob::F32(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
                Blob::OwnedF32(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
                Blob::F64(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
            }
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    std::fs::write(sidecar_path(path), trainer.config.to_json_string()?)?;
    Ok(())
}

/// A checkpoint read back from disk.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    blob: Vec<u8>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| ClafError::Checkpoint(format!("{} is truncated", path.display())))?;
        if &magic != MAGIC {
            return Err(ClafError::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| ClafError::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(ClafError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        Ok(Self { header, blob })
    }

    fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ClafError::Checkpoint(format!("missing tensor `{name}`")))
    }

    fn bytes(&self, e: &TensorEntry, width: usize) -> Result<&[u8]> {
        let start = e.offset as usize;
        let end = start + e.len as usize * width;
        self.blob
            .get(start..end)
            .ok_or_else(|| ClafError::Checkpoint(format!("tensor `{}` out of bounds", e.name)))
    }

    pub fn f32(&self, name: &str) -> Result<Vec<f32>> {
        let e = self.entry(name)?;
        if e.dtype != DType::F32 {
            return Err(ClafError::Checkpoint(format!("`{name}` is not f32")));
        }
        Ok(self
            .bytes(e, 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64(&self, name: &str) -> Result<Vec<f64>> {
        let e = self.entry(name)?;
        if e.dtype != DType::F64 {
            return Err(ClafError::Checkpoint(format!("`{name}` is not f64")));
        }
        Ok(self
            .bytes(e, 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn fill(&self, name: &str, dst: &mut [f32]) -> Result<()> {
        let v = self.f32(name)?;
        if v.len() != dst.len() {
            return Err(ClafError::Checkpoint(format!(
                "`{name}` has {} values, model expects {}",
                v.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(&v);
        Ok(())
    }

    /// Rebuilds the trainer. `expected` (when given) must hash equal to the
    /// stored config.
    pub fn restore_trainer(&self, expected: Option<&RunConfig>) -> Result<Trainer> {
        let h = &self.header;
        if let Some(cfg) = expected {
            if cfg.hash() != h.config_hash {
                return Err(ClafError::ConfigMismatch {
                    stored: h.config_hash.clone(),
                    actual: cfg.hash(),
                });
            }
        }
        if h.config.hash() != h.config_hash {
            return Err(ClafError::Checkpoint("stored config does not match its hash".into()));
        }
        let mut tr = Trainer::new(h.config.clone(), &h.labeled_counts)?;
        for p in tr.model.online_params_mut() {
            let name = format!("online/{}", p.name);
            self.fill(&name, &mut p.value)?;
        }
        for b in tr.model.encoder.buffers_mut() {
            let name = format!("online_buffer/{}", b.name);
            self.fill(&name, &mut b.value)?;
        }
        let shadow = tr
            .model
            .ema_params()
            .iter()
            .map(|p| self.f64(&format!("ema/{}", p.name)))
            .collect::<Result<Vec<_>>>()?;
        tr.model.ema.set_shadow(shadow)?;
        for b in tr.model.ema.encoder.buffers_mut() {
            let name = format!("ema_buffer/{}", b.name);
            self.fill(&name, &mut b.value)?;
        }
        let n_momentum = h.tensors.iter().filter(|t| t.name.starts_with("momentum/")).count();
        tr.optimizer.momentum_buffers = (0..n_momentum)
            .map(|i| self.f32(&format!("momentum/{i}")))
            .collect::<Result<_>>()?;
        let fd = tr.memory.feature_dim();
        let ed = tr.memory.embedding_dim();
        let mut queues = Vec::with_capacity(h.memory_lens.len());
        for (k, &n) in h.memory_lens.iter().enumerate() {
            let feats = self.f32(&format!("memory/{k}/feature"))?;
            let embs = self.f32(&format!("memory/{k}/embedding"))?;
            let conf = self.f32(&format!("memory/{k}/confidence"))?;
            let aug = self.f32(&format!("memory/{k}/augmented"))?;
            if feats.len() != n * fd || embs.len() != n * ed || conf.len() != n || aug.len() != n {
                return Err(ClafError::Checkpoint(format!("memory tensors for class {k} are inconsistent")));
            }
            queues.push(
                (0..n)
                    .map(|i| MemoryEntry {
                        feature: feats[i * fd..(i + 1) * fd].to_vec(),
                        embedding: embs[i * ed..(i + 1) * ed].to_vec(),
                        confidence: conf[i],
                        augmented: aug[i] != 0.0,
                    })
                    .collect(),
            );
        }
        tr.memory.restore(queues)?;
        tr.histogram = h.histogram.clone();
        tr.fa_rng = h.fa_rng.clone();
        tr.fa_totals = h.fa_totals.clone();
        tr.iter = h.iteration;
        Ok(tr)
    }
}
