//! Saving and loading models: a named-tensor checkpoint (parameters plus the
//! frozen metadata statistics) and a TOML config beside it.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use netfound_core::tokenizer::META_WIDTH;
use netfound_tensor::{read_checkpoint, write_checkpoint, ParamSet, Tensor};

use crate::{Model, ModelConfig, ModelError, NormStats};

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

/// Path of the config written next to a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

/// Parameters and normalization statistics as one tensor set.
pub fn to_tensors(model: &Model<f32>) -> ParamSet<f32> {
    let mut all = model.params.clone();
    let f = |xs: [f64; META_WIDTH]| Tensor::from_vec(&[META_WIDTH], xs.map(|x| x as f32).to_vec()).expect("k");
    all.insert(NORM_MEAN, f(model.norm.mean));
    all.insert(NORM_STD, f(model.norm.std));
    all
}

pub fn from_tensors(config: ModelConfig, all: &ParamSet<f32>) -> Result<Model<f32>, ModelError> {
    let stat = |name: &str| -> Result<[f64; META_WIDTH], ModelError> {
        let t = all.by_name(name).ok_or_else(|| ModelError::MissingParam(name.into()))?;
        if t.len() != META_WIDTH {
            return Err(ModelError::Data(format!("{name} must have {META_WIDTH} entries")));
        }
        Ok(std::array::from_fn(|i| t.data()[i] as f64))
    };
    let norm = NormStats {
        mean: stat(NORM_MEAN)?,
        std: stat(NORM_STD)?,
    };
    let mut params = ParamSet::new();
    for (_, name, t) in all.iter() {
        if name != NORM_MEAN && name != NORM_STD {
            params.insert(name, t.clone());
        }
    }
    Model::from_parts(config, params, norm)
}

/// Writes `<path>` (tensors) and `<path>.toml` (config).
pub fn save_model(model: &Model<f32>, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &to_tensors(model))?;
    std::fs::write(config_path(path), model.config.to_toml())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model<f32>, ModelError> {
    let config = ModelConfig::load(&config_path(path))?;
    let all = read_checkpoint(BufReader::new(File::open(path)?))?;
    from_tensors(config, &all)
}
