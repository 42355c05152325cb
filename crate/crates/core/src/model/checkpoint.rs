//! Self-describing text checkpoints: a magic line followed by one JSON
//! document holding the config, normalization statistics, and every named
//! parameter array.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ForecastModel, ModelConfig};
use crate::artifact::write_atomic;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &str = "MSMAMBA-CKPT-v1";

#[derive(Serialize, Deserialize)]
struct NamedParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Body {
    config: ModelConfig,
    normalization: Option<NormStats>,
    params: Vec<NamedParam>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ForecastModel,
    pub store: ParamStore,
    pub normalization: Option<NormStats>,
}

impl Checkpoint {
    pub fn new(model: ForecastModel, store: ParamStore, normalization: Option<NormStats>) -> Self {
        Checkpoint { model, store, normalization }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut params = Vec::with_capacity(self.store.len());
        for id in self.store.ids() {
            let t = self.store.get(id);
            if !t.is_finite() {
                return Err(Error::Numeric(format!("parameter {} is not finite", self.store.name(id))));
            }
            params.push(NamedParam {
                name: self.store.name(id).to_string(),
                shape: t.shape().to_vec(),
                values: t.to_vec(),
            });
        }
        let body = Body {
            config: self.model.config.clone(),
            normalization: self.normalization.clone(),
            params,
        };
        let mut out = format!("{CHECKPOINT_MAGIC}\n").into_bytes();
        serde_json::to_writer(&mut out, &body).map_err(|e| Error::Data(format!("encoding checkpoint: {e}")))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::Data("checkpoint is not UTF-8".into()))?;
        let (magic, rest) = text.split_once('\n').unwrap_or((text, ""));
        if magic.trim_end() != CHECKPOINT_MAGIC {
            return Err(Error::Data(format!("not a checkpoint: expected header {CHECKPOINT_MAGIC}")));
        }
        let body: Body = serde_json::from_str(rest).map_err(|e| Error::Data(format!("malformed checkpoint: {e}")))?;
        let (model, mut store) = ForecastModel::new(body.config, 0)?;
        if body.params.len() != store.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameter tensors, config expects {}",
                body.params.len(),
                store.len()
            )));
        }
        let mut seen = vec![false; store.len()];
        for p in body.params {
            let id = store
                .find(&p.name)
                .ok_or_else(|| Error::Data(format!("unexpected parameter {}", p.name)))?;
            if seen[id.0] {
                return Err(Error::Data(format!("duplicate parameter {}", p.name)));
            }
            seen[id.0] = true;
            let t = Tensor::new(p.shape, p.values).map_err(|e| Error::Data(format!("parameter {}: {e}", p.name)))?;
            store.set(id, t).map_err(|e| Error::Data(format!("parameter {}: {e}", p.name)))?;
        }
        if let Some(norm) = &body.normalization {
            if norm.mean.len() != model.config.variates || norm.std.len() != model.config.variates {
                return Err(Error::Data("normalization statistics do not match the variate count".into()));
            }
        }
        Ok(Checkpoint {
            model,
            store,
            normalization: body.normalization,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
