//! Binary checkpoints of a trajectory state.
//!
//! Layout: 8-byte magic `TRAJCKPT`, `u32` format version (LE), `u64` header
//! length (LE), a JSON header, then the flat parameters followed by the
//! optimizer's first and second buffers, all as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::{NetSpec, ParamSet};
use crate::plan::DataSource;
use crate::scalar::Scalar;
use crate::train::{OptState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"TRAJCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub net: NetSpec,
    pub config: TrainConfig,
    pub step: usize,
    pub base_seed: u64,
    pub data: Option<DataSource>,
    pub param_count: usize,
    pub first_len: usize,
    pub second_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: ParamSet<T>,
    pub opt: OptState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(
        params: ParamSet<T>,
        opt: OptState<T>,
        config: TrainConfig,
        base_seed: u64,
        data: Option<DataSource>,
    ) -> Self {
        let header = CheckpointHeader {
            net: params.spec.clone(),
            config,
            step: opt.step,
            base_seed,
            data,
            param_count: params.n_params(),
            first_len: opt.first.len(),
            second_len: opt.second.len(),
        };
        Checkpoint { header, params, opt }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let n = self.header.param_count + self.header.first_len + self.header.second_len;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let body = self.params.values().chain(&self.opt.first).chain(&self.opt.second);
        for v in body {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, msg: String| LabError::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(fail(0, "missing TRAJCKPT magic".into()));
        }
        if bytes.len() < 20 {
            return Err(fail(bytes.len(), "truncated preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(fail(8, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(12, format!("header length {hlen} runs past end of file")))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[20..body_start]).map_err(|e| fail(20, format!("bad header: {e}")))?;
        if header.param_count != header.net.n_params() {
            return Err(fail(
                20,
                format!(
                    "header claims {} parameters, network has {}",
                    header.param_count,
                    header.net.n_params()
                ),
            ));
        }
        let n = header.param_count + header.first_len + header.second_len;
        let expected = body_start + 8 * n;
        if bytes.len() != expected {
            return Err(fail(
                bytes.len().min(expected),
                format!("expected {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let mut vals = bytes[body_start..]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())));
        let flat: Vec<T> = vals.by_ref().take(header.param_count).collect();
        let first: Vec<T> = vals.by_ref().take(header.first_len).collect();
        let second: Vec<T> = vals.collect();
        let params = ParamSet::from_flat(&header.net, &flat)?;
        let opt = OptState {
            step: header.step,
            first,
            second,
        };
        Ok(Checkpoint { header, params, opt })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| LabError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
