//! Binary checkpoints: magic, a length-prefixed JSON header, then raw
//! little-endian f32 tensors (parameters followed by momentum buffers).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::TrainError;
use crate::nn::optim::Sgd;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NNCKPT\x00\x01";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    /// Epochs completed when the checkpoint was taken.
    epoch: usize,
    config: ExperimentConfig,
    params: Vec<TensorEntry>,
    velocity: Vec<TensorEntry>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config: ExperimentConfig,
    pub params: Vec<(String, Tensor)>,
    pub velocity: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(epoch: usize, config: &ExperimentConfig, params: &ParamStore, sgd: &Sgd) -> Self {
        let mut out = Self {
            epoch,
            config: config.clone(),
            params: Vec::new(),
            velocity: Vec::new(),
        };
        for id in params.ids() {
            let name = params.name(id).to_string();
            if let Some(v) = sgd.velocity(id) {
                out.velocity.push((name.clone(), v.clone()));
            }
            out.params.push((name, params.get(id).clone()));
        }
        out
    }

    /// Writes parameters and momentum into a model built from the same config.
    pub fn restore(&self, params: &mut ParamStore, sgd: &mut Sgd) -> Result<(), TrainError> {
        if self.params.len() != params.len() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        let lookup = |params: &ParamStore, name: &str, t: &Tensor| {
            let id = params
                .find(name)
                .ok_or_else(|| TrainError::Checkpoint(format!("unknown tensor {name}")))?;
            if params.get(id).shape() != t.shape() {
                return Err(TrainError::Checkpoint(format!(
                    "{name}: shape {:?} does not match model {:?}",
                    t.shape(),
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        for (name, t) in &self.params {
            let id = lookup(params, name, t)?;
            params.set(id, t.clone());
        }
        for (name, t) in &self.velocity {
            let id = lookup(params, name, t)?;
            sgd.set_velocity(id, t.clone());
        }
        Ok(())
    }
}

fn ck_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes via a temporary sibling and renames, so a failed write never
/// leaves a truncated file under the final name.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), TrainError> {
    let entries = |v: &[(String, Tensor)]| {
        v.iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    };
    let header = Header {
        epoch: ck.epoch,
        config: ck.config.clone(),
        params: entries(&ck.params),
        velocity: entries(&ck.velocity),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ck_err(path, e))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * ck.params.iter().map(|(_, t)| t.len()).sum::<usize>() * 2);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in ck.params.iter().chain(&ck.velocity) {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ck_err(path, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    let written = fs::File::create(&tmp).and_then(|mut f| {
        f.write_all(&buf)?;
        f.sync_all()
    });
    if let Err(e) = written {
        let _ = fs::remove_file(&tmp);
        return Err(ck_err(path, e));
    }
    fs::rename(&tmp, path).map_err(|e| ck_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ck_err(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ck_err(path, "not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).unwrap_or_default();
    if hlen > body.len() {
        return Err(ck_err(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| ck_err(path, e))?;
    let mut data = &body[hlen..];
    let mut take = |entries: Vec<TensorEntry>| -> Result<Vec<(String, Tensor)>, TrainError> {
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let n: usize = e.shape.iter().product();
            if data.len() < 4 * n {
                return Err(ck_err(path, format!("truncated payload at {}", e.name)));
            }
            let vals = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[4 * n..];
            out.push((e.name, Tensor::from_vec(&e.shape, vals)));
        }
        Ok(out)
    };
    let params = take(header.params)?;
    let velocity = take(header.velocity)?;
    if !data.is_empty() {
        return Err(ck_err(path, "trailing bytes after payload"));
    }
    header.config.validate()?;
    Ok(Checkpoint {
        epoch: header.epoch,
        config: header.config,
        params,
        velocity,
    })
}

/// Pointer to the newest checkpoint of a run, with the files it superseded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatestCheckpoint {
    pub epoch: usize,
    pub path: PathBuf,
    pub lineage: Vec<PathBuf>,
}

impl LatestCheckpoint {
    pub const FILE: &'static str = "latest.json";

    pub fn load(dir: &Path) -> Result<Option<Self>, TrainError> {
        let p = dir.join(Self::FILE);
        match fs::read_to_string(&p) {
            Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| ck_err(&p, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ck_err(&p, e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        let p = dir.join(Self::FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| ck_err(&p, e))?;
        fs::write(&p, text).map_err(|e| ck_err(&p, e))
    }
}
