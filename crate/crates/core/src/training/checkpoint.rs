//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SEGDBCKP" | u32 version | u64 header length | header JSON
//! u64 array count | per array: u64 length, f32 values
//! ```
//!
//! Arrays are the flat model parameters, then the backbone optimiser's first
//! and second moments, then the bias head optimiser's moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loss::ClassWeights;
use super::optim::Adam;
use super::trainer::EpochLog;
use crate::error::{Error, Result};
use crate::metrics::CategoryMap;
use crate::model::{fork_at, BackboneSpec, BiasHeadSpec, SegmentationModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGDBCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub backbone: BackboneSpec,
    pub bias_head: BiasHeadSpec,
    pub fork_index: usize,
    pub grl_scale: f64,
    pub epochs_completed: usize,
    pub val_seg_loss: f64,
    pub config: TrainConfig,
    pub class_weights: ClassWeights,
    pub class_names: Vec<String>,
    pub categories: CategoryMap,
    pub ignore_id: u8,
    pub logs: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    steps: u64,
    tensors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FileHeader {
    header: CheckpointHeader,
    backbone_optimizer: OptimizerHeader,
    head_optimizer: OptimizerHeader,
}

/// A full training state: enough to run inference or to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    pub backbone_optimizer: Adam,
    pub head_optimizer: Adam,
}

impl Checkpoint {
    /// Rebuilds the network described by the header with the stored weights.
    pub fn model(&self) -> Result<SegmentationModel<f32>> {
        let h = &self.header;
        let mut model = fork_at(&h.backbone, h.fork_index, h.bias_head, h.grl_scale, h.config.seed)?;
        model.load_flat_params(&self.params)?;
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.header.backbone.num_classes
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (bm, bv) = self.backbone_optimizer.state();
        let (hm, hv) = self.head_optimizer.state();
        let file_header = FileHeader {
            header: self.header.clone(),
            backbone_optimizer: OptimizerHeader {
                steps: self.backbone_optimizer.steps,
                tensors: bm.len(),
            },
            head_optimizer: OptimizerHeader {
                steps: self.head_optimizer.steps,
                tensors: hm.len(),
            },
        };
        let json = serde_json::to_vec(&file_header)?;
        let arrays: Vec<&[f32]> = std::iter::once(self.params.as_slice())
            .chain(bm.iter().chain(bv).chain(hm).chain(hv).map(Vec::as_slice))
            .collect();
        let mut out = Vec::with_capacity(json.len() + 4 * self.params.len() * 3 + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
        for a in arrays {
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let json_len = read_len(&mut r)?;
        let mut json = vec![0u8; json_len];
        read_exact(&mut r, &mut json)?;
        let fh: FileHeader = serde_json::from_slice(&json)?;
        let count = read_len(&mut r)?;
        let expected = 1 + 2 * fh.backbone_optimizer.tensors + 2 * fh.head_optimizer.tensors;
        if count != expected {
            return Err(Error::Checkpoint(format!("expected {expected} arrays, found {count}")));
        }
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_len(&mut r)?;
            if len.saturating_mul(4) > r.len() {
                return Err(Error::Checkpoint("truncated array".into()));
            }
            let (data, rest) = r.split_at(len * 4);
            arrays.push(
                data.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect::<Vec<f32>>(),
            );
            r = rest;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        let mut it = arrays.into_iter();
        let params = it.next().expect("count checked");
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
        let nb = fh.backbone_optimizer.tensors;
        let nh = fh.head_optimizer.tensors;
        let (bm, bv, hm, hv) = (take(nb), take(nb), take(nh), take(nh));
        let ckpt = Checkpoint {
            header: fh.header,
            params,
            backbone_optimizer: Adam::from_state(fh.backbone_optimizer.steps, bm, bv)?,
            head_optimizer: Adam::from_state(fh.head_optimizer.steps, hm, hv)?,
        };
        // Fails early on a header/parameter mismatch.
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_len(r: &mut &[u8]) -> Result<usize> {
    usize::try_from(u64::from_le_bytes(read_array(r)?))
        .map_err(|_| Error::Checkpoint("length does not fit in memory".into()))
}
