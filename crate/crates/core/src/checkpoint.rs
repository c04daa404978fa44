//! Parameter archives (safetensors) with a JSON sidecar.
//!
//! `<name>.safetensors` holds every parameter and buffer under its dotted
//! name and records the architecture hash in its header metadata.
//! `<name>.json` holds the model config, epoch, validation metrics and the
//! hash of the data manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rtcan_tensor::Scalar;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::data::PreprocessConfig;
use crate::error::{io_err, Error, Result};
use crate::metrics::ReportJson;
use crate::model::pretrained::tensor_from_view;
use crate::model::{Model, ModelConfig};
use crate::util::sha256_hex;

const HASH_KEY: &str = "config_hash";

/// Hash of the fields that determine the parameter set. Initialization
/// seed and pretrained source do not count.
pub fn config_hash(config: &ModelConfig) -> String {
    let arch = ModelConfig {
        init_seed: 0,
        pretrained_backbone: false,
        pretrained_path: None,
        ..config.clone()
    };
    sha256_hex(serde_json::to_string(&arch).expect("plain struct").as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub val_metrics: Option<ReportJson>,
    pub data_manifest_hash: String,
    pub dtype: String,
    /// Input pipeline the weights were trained with.
    pub preprocess: PreprocessConfig,
}

pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

fn dtype_of<T: Scalar>() -> Dtype {
    match T::DTYPE {
        "F64" => Dtype::F64,
        _ => Dtype::F32,
    }
}

/// Write the archive and its sidecar. Output is byte-stable for equal inputs.
pub fn save<T: Scalar>(
    model: &Model<T>,
    path: &Path,
    epoch: usize,
    val_metrics: Option<ReportJson>,
    data_manifest_hash: &str,
    preprocess: &PreprocessConfig,
) -> Result<CheckpointMeta> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let hash = config_hash(&model.config);
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params
        .iter()
        .map(|(_, name, _, t)| {
            let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            (name.to_string(), t.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(n, s, b)| Ok((n.as_str(), TensorView::new(dtype_of::<T>(), s.clone(), b).map_err(st_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let info = Some([(HASH_KEY.to_string(), hash.clone())].into_iter().collect());
    let bytes = safetensors::serialize(views, &info).map_err(st_err)?;
    fs::write(path, bytes).map_err(io_err(path))?;

    let meta = CheckpointMeta {
        config: model.config.clone(),
        config_hash: hash,
        epoch,
        val_metrics,
        data_manifest_hash: data_manifest_hash.to_string(),
        dtype: T::DTYPE.to_string(),
        preprocess: preprocess.clone(),
    };
    let side = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(&side, json).map_err(io_err(&side))?;
    Ok(meta)
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))
}

/// Rebuild the model recorded in the sidecar and restore every tensor.
pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let meta = read_meta(path)?;
    if config_hash(&meta.config) != meta.config_hash {
        return Err(Error::ArchitectureMismatch(format!(
            "{}: sidecar config does not match its recorded hash",
            path.display()
        )));
    }
    let config = ModelConfig {
        pretrained_backbone: false,
        pretrained_path: None,
        ..meta.config.clone()
    };
    let mut model = Model::<T>::new(&config)?;
    restore(&mut model, path, &meta.config_hash)?;
    model.config = meta.config.clone();
    Ok((model, meta))
}

/// Load a checkpoint that must have been produced by `expected`'s architecture.
pub fn load_expecting<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<(Model<T>, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let want = config_hash(expected);
    if meta.config_hash != want {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint {} was built for config hash {}, expected {}",
            path.display(),
            meta.config_hash,
            want
        )));
    }
    load(path)
}

fn restore<T: Scalar>(model: &mut Model<T>, path: &Path, hash: &str) -> Result<()> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let st = SafeTensors::deserialize(&bytes).map_err(st_err)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(st_err)?;
    let recorded = header.metadata().as_ref().and_then(|m| m.get(HASH_KEY)).cloned();
    if recorded.as_deref() != Some(hash) {
        return Err(Error::ArchitectureMismatch(format!(
            "{}: archive hash {:?} differs from sidecar hash {hash}",
            path.display(),
            recorded
        )));
    }
    if st.len() != model.params.len() {
        return Err(Error::ArchitectureMismatch(format!(
            "{}: archive holds {} tensors, model has {}",
            path.display(),
            st.len(),
            model.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let view = st
            .tensor(&name)
            .map_err(|_| Error::ArchitectureMismatch(format!("archive lacks `{name}`")))?;
        let value = tensor_from_view::<T>(&name, &view)?;
        if value.shape() != model.params.get(id).shape() {
            return Err(Error::ArchitectureMismatch(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                value.shape(),
                model.params.get(id).shape()
            )));
        }
        model.params.set(id, value)?;
    }
    Ok(())
}
