use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, HtsVaeModel, Net};
use crate::data::MinMaxNormalizer;
use crate::embedding::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, ParamTensor};

pub const CHECKPOINT_FORMAT: &str = "tasgen-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub normalizer: MinMaxNormalizer,
    pub seed: u64,
    pub params: BTreeMap<String, ParamTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &HtsVaeModel) -> Result<Self> {
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config.clone(),
            normalizer: model.normalizer.clone(),
            seed: model.seed,
            params: model.params.snapshot()?,
        })
    }

    pub fn into_model(self) -> Result<HtsVaeModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                self.format
            )));
        }
        self.config.validate()?;
        let params = ParamStore::from_snapshot(&self.params)?;
        Net::bind(&params, &self.config, true)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match architecture: {e}")))?;
        Ok(HtsVaeModel {
            config: self.config,
            params,
            normalizer: self.normalizer,
            seed: self.seed,
        })
    }
}

pub fn save_checkpoint(model: &HtsVaeModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_model(model)?)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<HtsVaeModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ckpt.into_model()
}

/// `epoch,objective,lr,wall_time`
pub fn write_metrics_csv(trace: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,objective,lr,wall_time\n");
    for m in trace {
        out.push_str(&format!(
            "{},{:?},{:?},{:.3}\n",
            m.epoch, m.objective, m.lr, m.wall_time
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
