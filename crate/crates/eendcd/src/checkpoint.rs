//! Model checkpoints: a binary file of named tensors plus a TOML sidecar
//! (`<file>.toml`) holding the model configuration and a name/shape
//! manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use eendcd_core::model::{EendCd, ModelConfig};
use eendcd_core::numerics::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{read_tensor, read_u32, write_tensor};

const MAGIC: &[u8; 8] = b"EENDCDCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, params: &ParamStore<f32>, step: usize) -> Result<()> {
    let path = path.as_ref();
    let io = Error::io(path);
    let mut w = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    let body = (|| {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (_, name, t) in params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(&mut w, t)?;
        }
        w.flush()
    })();
    body.map_err(io)?;

    let manifest = CheckpointManifest {
        step,
        model: config.clone(),
        tensors: params
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let side = sidecar_path(path);
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(&side, e.to_string()))?;
    std::fs::write(&side, text).map_err(Error::io(&side))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let side = sidecar_path(path.as_ref());
    let text = std::fs::read_to_string(&side).map_err(Error::io(&side))?;
    toml::from_str(&text).map_err(|e| Error::invalid(&side, e.to_string()))
}

/// Rebuilds the model from the sidecar config and fills its parameters
/// from the binary file. Every parameter must be present with the shape
/// the config implies.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EendCd, ParamStore<f32>, CheckpointManifest)> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let (model, mut params) = EendCd::init::<f32>(manifest.model.clone(), 0)?;
    let mut r = BufReader::new(File::open(path).map_err(Error::io(path))?);
    let entries = read_entries(&mut r).map_err(Error::io(path))?;
    if entries.len() != params.len() {
        return Err(Error::invalid(
            path,
            format!("{} tensors stored, model has {}", entries.len(), params.len()),
        ));
    }
    for (i, (name, t)) in entries.into_iter().enumerate() {
        let listed = manifest.tensors.get(i);
        if listed.is_none_or(|e| e.name != name || e.shape != t.shape()) {
            return Err(Error::invalid(path, format!("tensor {name} disagrees with the manifest")));
        }
        let id = params
            .find(&name)
            .ok_or_else(|| Error::invalid(path, format!("unknown parameter {name}")))?;
        params.set(id, t).map_err(|e| Error::invalid(path, format!("{name}: {e}")))?;
    }
    model.check_params(&params)?;
    Ok((model, params, manifest))
}

fn read_entries<R: Read>(r: &mut R) -> std::io::Result<Vec<(String, eendcd_core::numerics::Tensor<f32>)>> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    if read_u32(r)? != VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let n = read_u32(r)?;
    (0..n)
        .map(|_| {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(bad("parameter name too long"));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            Ok((name, read_tensor(r)?))
        })
        .collect()
}
