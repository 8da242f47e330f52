//! Checkpoint directory: `checkpoint.json` (layout, config, counters) and
//! `weights.bin` (little-endian f32: parameters, then optimizer moments).

use std::fs;
use std::path::{Path, PathBuf};

use dacdet_core::model::{DetectorModel, ParamSet};
use dacdet_core::optim::{Optimizer, OptimizerKind};
use dacdet_core::tensor::Shape;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "checkpoint.json";
pub const WEIGHTS_NAME: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f32 elements.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m_offset: usize,
    v_offset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ExperimentConfig,
    step: u64,
    epoch: usize,
    tensors: Vec<TensorEntry>,
    optimizer: OptimizerEntry,
    n_floats: usize,
    sha256: String,
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub model: DetectorModel<f32>,
    pub optimizer: Optimizer<f32>,
}

/// Accepts the checkpoint directory or the path of its manifest.
pub fn resolve(path: &Path) -> PathBuf {
    if path.file_name().is_some_and(|n| n == MANIFEST_NAME) {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut floats: Vec<f32> = Vec::with_capacity(3 * ck.model.params.num_scalars());
    let mut tensors = Vec::new();
    for p in ck.model.params.iter() {
        tensors.push(TensorEntry { name: p.name.clone(), shape: p.shape.dims().to_vec(), offset: floats.len() });
        floats.extend_from_slice(&p.data);
    }
    let m_offset = floats.len();
    ck.optimizer.m.iter().for_each(|m| floats.extend_from_slice(m));
    let v_offset = (ck.optimizer.kind == OptimizerKind::Adam).then(|| {
        let at = floats.len();
        ck.optimizer.v.iter().for_each(|v| floats.extend_from_slice(v));
        at
    });
    let bytes: Vec<u8> = floats.iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: ck.config.clone(),
        step: ck.step,
        epoch: ck.epoch,
        tensors,
        optimizer: OptimizerEntry { kind: ck.optimizer.kind, lr: ck.optimizer.lr, t: ck.optimizer.t, m_offset, v_offset },
        n_floats: floats.len(),
        sha256: hex(&bytes),
    };
    let wpath = dir.join(WEIGHTS_NAME);
    fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let dir = resolve(path);
    let mpath = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::corrupt(MANIFEST_NAME, e))?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch { what: "checkpoint", found, supported: CHECKPOINT_FORMAT_VERSION });
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| Error::corrupt(MANIFEST_NAME, e))?;
    m.config.validate()?;

    let wpath = dir.join(WEIGHTS_NAME);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    if bytes.len() != 4 * m.n_floats {
        return Err(Error::corrupt(
            WEIGHTS_NAME,
            format!("expected {} bytes, found {}", 4 * m.n_floats, bytes.len()),
        ));
    }
    if hex(&bytes) != m.sha256 {
        return Err(Error::corrupt(WEIGHTS_NAME, "checksum mismatch"));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let slice = |offset: usize, len: usize, what: &str| -> Result<Vec<f32>> {
        floats
            .get(offset..offset + len)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| Error::ManifestIntegrity(format!("{what} extends past the end of {WEIGHTS_NAME}")))
    };

    let mut params = ParamSet::new();
    let mut lens = Vec::new();
    for t in &m.tensors {
        let shape = Shape::new(&t.shape).map_err(|e| Error::ManifestIntegrity(format!("tensor {}: {e}", t.name)))?;
        params.push(t.name.clone(), shape, slice(t.offset, shape.numel(), &t.name)?);
        lens.push(shape.numel());
    }
    let model = DetectorModel::from_params(m.config.model.clone(), params)
        .map_err(|e| Error::ManifestIntegrity(e.to_string()))?;

    let moments = |start: usize, what: &str| -> Result<Vec<Vec<f32>>> {
        let mut at = start;
        lens.iter()
            .map(|&n| {
                let s = slice(at, n, what);
                at += n;
                s
            })
            .collect()
    };
    let o = &m.optimizer;
    let optimizer = Optimizer {
        kind: o.kind,
        lr: o.lr,
        t: o.t,
        m: moments(o.m_offset, "first moment")?,
        v: match (o.kind, o.v_offset) {
            (OptimizerKind::Adam, Some(at)) => moments(at, "second moment")?,
            (OptimizerKind::Sgd, None) => Vec::new(),
            _ => return Err(Error::ManifestIntegrity("optimizer moments do not match its kind".into())),
        },
    };
    optimizer.check(&model.params).map_err(|e| Error::ManifestIntegrity(e.to_string()))?;
    Ok(Checkpoint { config: m.config, step: m.step, epoch: m.epoch, model, optimizer })
}
