//! Checkpoint files.
//!
//! Layout: the magic `ARCAPS01`; a little-endian `u64` byte length followed
//! by UTF-8 metadata text (the model configuration lines plus
//! `checkpoint.*` training state); then one record per stored tensor: `u64`
//! name length, name bytes, `u64` rank, `rank` `u64` extents and the values
//! as little-endian `f32`. Records run to the end of the file in store order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use arcaps_core::model::{ArCapsNet, ModelConfig};
use arcaps_core::params::ParameterStore;
use arcaps_core::tensor::Tensor;

use crate::config;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ARCAPS01";

/// Training progress stored next to the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Validation accuracy of this parameter set, if it was scored.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub state: TrainState,
    pub params: ParameterStore<f32>,
}

impl Checkpoint {
    pub fn network(&self) -> Result<ArCapsNet> {
        Ok(ArCapsNet::new(self.model.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = config::model_to_text(&self.model);
        let _ = writeln!(meta, "checkpoint.step = {}", self.state.step);
        let _ = writeln!(meta, "checkpoint.epoch = {}", self.state.epoch);
        if let Some(a) = self.state.val_accuracy {
            let _ = writeln!(meta, "checkpoint.val_accuracy = {a}");
        }
        let mut out = Vec::with_capacity(MAGIC.len() + meta.len() + 4 * self.params.count_trainable());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for e in self.params.entries() {
            out.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.dims().len() as u64).to_le_bytes());
            for &d in e.value.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses checkpoint bytes; `path` only labels errors. The stored tensors
    /// must match the architecture described by the metadata.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format(path, "not a checkpoint: bad magic at offset 0"));
        }
        let meta_len = r.u64()? as usize;
        let meta_at = r.pos;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::format(path, format!("metadata at offset {meta_at} is not UTF-8")))?;
        let (model_text, state) = split_meta(meta, path)?;
        let model = config::model_from_text(&model_text)
            .map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        let net = ArCapsNet::new(model.clone())?;
        let mut params = ParameterStore::new();
        let specs = net.param_specs();
        let mut k = 0;
        while !r.done() {
            let at = r.pos;
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, format!("tensor name at offset {at} is not UTF-8")))?
                .to_string();
            let rank = r.u64()? as usize;
            if rank > 8 {
                return Err(Error::format(path, format!("tensor {name} at offset {at} has rank {rank}")));
            }
            let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let spec = specs.get(k).filter(|s| s.name == name && s.dims == dims).ok_or_else(|| {
                Error::format(
                    path,
                    format!("tensor {name} {dims:?} at offset {at} does not fit the stored model configuration"),
                )
            })?;
            let n: usize = dims.iter().product();
            let raw = r.take(4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(&name, spec.kind, Tensor::from_vec(&dims, data)?)?;
            k += 1;
        }
        net.check_params(&params)
            .map_err(|e| Error::format(path, format!("incomplete checkpoint: {e}")))?;
        Ok(Checkpoint { model, state, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn split_meta(meta: &str, path: &Path) -> Result<(String, TrainState)> {
    let mut model = String::new();
    let mut state = TrainState::default();
    for line in meta.lines() {
        let Some(rest) = line.strip_prefix("checkpoint.") else {
            model.push_str(line);
            model.push('\n');
            continue;
        };
        let (key, value) = rest
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::format(path, format!("malformed metadata line `{line}`")))?;
        let bad = || Error::format(path, format!("bad metadata value in `{line}`"));
        match key {
            "step" => state.step = value.parse().map_err(|_| bad())?,
            "epoch" => state.epoch = value.parse().map_err(|_| bad())?,
            "val_accuracy" => state.val_accuracy = Some(value.parse().map_err(|_| bad())?),
            _ => return Err(Error::format(path, format!("unknown metadata key checkpoint.{key}"))),
        }
    }
    Ok((model, state))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.path,
                format!("truncated at offset {}: {n} more bytes expected", self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
