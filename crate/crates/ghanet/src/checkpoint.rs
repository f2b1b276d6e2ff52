//! Checkpoint files.
//!
//! ```text
//! "GHCK" | u32 version | u32 n | n bytes of JSON metadata
//!        | u32 entries | per entry: u32 name_len, name, u32 rank, rank × u32 dims, f32 data
//! ```
//!
//! Entries appear in parameter creation order. Metadata carries the model
//! and training configuration, interval boundaries, the gene selection and
//! the gene standardization fitted on the training split.

use std::path::Path;

use ghanet_core::data::{Binning, CATEGORY_COUNT};
use ghanet_core::genes::GeneSelection;
use ghanet_core::model::{Model, ModelConfig};
use ghanet_core::train::{EpochLoss, Standardization, TrainConfig, TrainedModel};
use ghanet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::bytes::{put_f32s, put_u32, Reader};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: &str = "GHCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub binning: Binning,
    pub selection: Option<GeneSelection>,
    /// Ids of the retained genes, per category.
    pub retained_gene_ids: Option<[Vec<String>; CATEGORY_COUNT]>,
    pub standardization: Option<Standardization>,
    pub loss_trace: Vec<EpochLoss>,
    /// Fold index when trained inside a cross-validation split.
    pub fold: Option<usize>,
    pub train_patients: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(
        trained: &TrainedModel,
        train: &TrainConfig,
        gene_ids: &[Vec<String>; CATEGORY_COUNT],
        fold: Option<usize>,
        train_patients: Vec<String>,
    ) -> Self {
        let retained_gene_ids = trained.selection.as_ref().map(|s| {
            std::array::from_fn(|c| s.retained[c].iter().map(|&j| gene_ids[c][j].clone()).collect())
        });
        Checkpoint {
            meta: CheckpointMeta {
                model: trained.model.config().clone(),
                train: train.clone(),
                binning: trained.binning.clone(),
                selection: trained.selection.clone(),
                retained_gene_ids,
                standardization: trained.standardization.clone(),
                loss_trace: trained.loss_trace.clone(),
                fold,
                train_patients,
            },
            model: trained.model.clone(),
        }
    }

    pub fn trained(&self) -> TrainedModel {
        TrainedModel {
            model: self.model.clone(),
            binning: self.meta.binning.clone(),
            selection: self.meta.selection.clone(),
            standardization: self.meta.standardization.clone(),
            loss_trace: self.meta.loss_trace.clone(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Invalid(e.to_string()))?;
        let params = self.model.params();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        put_u32(&mut out, VERSION);
        put_u32(&mut out, len32(meta.len())?);
        out.extend_from_slice(&meta);
        put_u32(&mut out, len32(params.len())?);
        for (name, value) in params.iter() {
            put_u32(&mut out, len32(name.len())?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, len32(value.shape().len())?);
            for &d in value.shape() {
                put_u32(&mut out, len32(d)?);
            }
            put_f32s(&mut out, value.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::Version {
                found: version,
                supported: VERSION,
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.offset();
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes).map_err(|e| FormatError::Invalid {
            offset: meta_at,
            what: "metadata",
            message: e.to_string(),
        })?;
        let mut model = Model::new(meta.model.clone(), 0).map_err(|e| FormatError::Invalid {
            offset: meta_at,
            what: "model configuration",
            message: e.to_string(),
        })?;
        let count_at = r.offset();
        let count = r.u32("entry count")? as usize;
        let ids: Vec<_> = model.params().ids().collect();
        if count != ids.len() {
            return Err(FormatError::Invalid {
                offset: count_at,
                what: "entry count",
                message: format!("{count} entries, the configured model has {}", ids.len()),
            });
        }
        for id in ids {
            let at = r.offset();
            let name_len = r.u32("entry name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "entry name")?).map_err(|_| FormatError::Invalid {
                offset: at + 4,
                what: "entry name",
                message: "not UTF-8".into(),
            })?;
            let rank = r.u32("entry rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("entry dimension")? as usize);
            }
            let expected = model.params().get(id);
            if name != model.params().name(id) || shape != expected.shape() {
                return Err(FormatError::Invalid {
                    offset: at,
                    what: "entry",
                    message: format!(
                        "found {name} {shape:?}, the configured model expects {} {:?}",
                        model.params().name(id),
                        expected.shape()
                    ),
                });
            }
            let numel = expected.numel();
            let data = r.f32s(numel, "entry data")?;
            *model.params_mut().get_mut(id) = Tensor::new(shape, data).expect("shape checked above");
        }
        r.finish()?;
        Ok(Checkpoint { meta, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|e| Error::format(path, e))
    }
}

fn len32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Invalid(format!("{n} does not fit a u32 length field")))
}
