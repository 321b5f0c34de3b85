//! Model checkpoints: a JSON index describing the layers plus one `.tsr`
//! file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tsr, write_tsr};
use crate::model::{LayerDesc, ModelGraph};
use crate::tensor::{Real, Tensor};
use crate::train::TrainConfig;

pub const INDEX_FILE: &str = "checkpoint.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub dims: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub format_version: u32,
    pub dtype: String,
    pub layers: Vec<LayerDesc>,
    pub config: Option<TrainConfig>,
    /// Completed training epochs.
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint<T: Real>(
    dir: &Path,
    model: &ModelGraph<T>,
    config: Option<&TrainConfig>,
    epoch: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    for (info, values) in model.params() {
        let file = format!("{}.tsr", info.name);
        write_tsr(
            dir.join(&file),
            &Tensor::from_vec(info.dims, values.to_vec())?,
        )?;
        params.push(ParamEntry {
            name: info.name,
            file,
            dims: info.dims,
        });
    }
    let index = CheckpointIndex {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        layers: model.descs(),
        config: config.cloned(),
        epoch,
        params,
    };
    fs::write(
        dir.join(INDEX_FILE),
        serde_json::to_string_pretty(&index)? + "\n",
    )?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<CheckpointIndex> {
    Ok(serde_json::from_str(&fs::read_to_string(
        dir.join(INDEX_FILE),
    )?)?)
}

/// Loads a checkpoint into precision `T`, converting stored values if needed.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(ModelGraph<T>, Option<TrainConfig>)> {
    let index = read_index(dir)?;
    if index.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            index.format_version
        )));
    }
    let mut model = ModelGraph::<T>::from_descs(&index.layers)?;
    let names: Vec<String> = model.params().into_iter().map(|(i, _)| i.name).collect();
    if names.len() != index.params.len() {
        return Err(Error::Format(
            "checkpoint parameter list does not match its layers".into(),
        ));
    }
    for ((slot, name), entry) in model
        .params_mut()
        .into_iter()
        .zip(&names)
        .zip(&index.params)
    {
        if &entry.name != name {
            return Err(Error::Format(format!(
                "expected parameter `{name}`, found `{}`",
                entry.name
            )));
        }
        let t: Tensor<T> = read_tsr(dir.join(&entry.file))?;
        if t.len() != slot.len() {
            return Err(Error::Format(format!(
                "parameter `{name}` has {} values, expected {}",
                t.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(t.data());
    }
    Ok((model, index.config))
}
