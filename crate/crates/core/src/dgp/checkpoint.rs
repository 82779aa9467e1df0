use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{DgpModel, NormalizerState, Topology};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub topology: Topology,
    pub params: Vec<ParamEntry>,
    pub normalizers: Vec<NormalizerState>,
    pub seed: u64,
    /// Free-form description of the training data (e.g. standardization).
    #[serde(default)]
    pub data: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn from_model(model: &DgpModel, data: Option<serde_json::Value>) -> Self {
        let params = model
            .params
            .iter()
            .map(|(name, m)| ParamEntry { name: name.to_string(), rows: m.rows(), cols: m.cols(), data: m.data().to_vec() })
            .collect();
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            topology: model.topology().clone(),
            params,
            normalizers: model.normalizers.clone(),
            seed: model.seed,
            data,
        }
    }

    pub fn into_model(self) -> Result<DgpModel> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut params = ParamSet::new();
        for e in self.params {
            params.insert(e.name, Matrix::from_vec(e.rows, e.cols, e.data)?);
        }
        DgpModel::from_parts(self.topology, params, self.normalizers, self.seed)
    }
}

/// Writes JSON to a sibling temp file and renames it over `path`.
pub fn save_checkpoint(model: &DgpModel, path: &Path, data: Option<serde_json::Value>) -> Result<()> {
    let json = serde_json::to_vec_pretty(&Checkpoint::from_model(model, data))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&json)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DgpModel, Option<serde_json::Value>)> {
    let bytes = fs::read(path)?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)?;
    let data = ck.data.clone();
    Ok((ck.into_model()?, data))
}
