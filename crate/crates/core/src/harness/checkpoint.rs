//! Checkpoint archive: one safetensors file holding every parameter under its
//! module path, optional optimizer moments under `adam.m.` / `adam.v.`, and
//! the model and training configs as key-value text in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use partgroup_autograd::{ParamStore, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::network::{Model, ModelConfig};

const FORMAT: &str = "partgroup-checkpoint-1";

/// Optimizer state saved alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Training config text, when written by the trainer.
    pub train_config: Option<String>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn ck_err(path: &Path, m: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {m}", path.display()))
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    params: &ParamStore<f32>,
    optimizer: Option<&OptimizerState>,
    train_config: Option<&str>,
) -> Result<()> {
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (id, name, t) in params.iter() {
        owned.push((name.to_string(), t.shape().to_vec(), to_bytes(t)));
        if let Some(o) = optimizer {
            owned.push((format!("adam.m.{name}"), t.shape().to_vec(), to_bytes(&o.m[id.index()])));
            owned.push((format!("adam.v.{name}"), t.shape().to_vec(), to_bytes(&o.v[id.index()])));
        }
    }
    let views = owned
        .iter()
        .map(|(n, s, b)| TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.as_str(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| ck_err(path, e))?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("model".to_string(), crate::kv::render(&model.to_kv()));
    if let Some(o) = optimizer {
        meta.insert("optimizer_step".to_string(), o.step.to_string());
    }
    if let Some(t) = train_config {
        meta.insert("train".to_string(), t.to_string());
    }
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| ck_err(path, e))?;
    // Write then rename so an interrupted save never leaves a truncated archive.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint. When `expected` is given, the stored model config must equal it.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ck_err(path, e))?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(ck_err(path, "not a partgroup checkpoint"));
    }
    let model_text = meta.get("model").ok_or_else(|| ck_err(path, "missing model config"))?;
    let mut kv = KvMap::parse(model_text, "checkpoint model config")?;
    let mut model = ModelConfig::desk();
    model.update_from_kv(&mut kv)?;
    kv.finish()?;
    model.validate()?;
    if let Some(want) = expected {
        if *want != model {
            let stored: Vec<String> = model.to_kv().iter().map(|(k, v)| format!("{k}={v}")).collect();
            let wanted: Vec<String> = want.to_kv().iter().map(|(k, v)| format!("{k}={v}")).collect();
            let diff: Vec<String> =
                stored.iter().zip(&wanted).filter(|(a, b)| a != b).map(|(a, b)| format!("{a} (expected {b})")).collect();
            return Err(ck_err(path, format!("model config mismatch: {}", diff.join(", "))));
        }
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ck_err(path, e))?;
    let read = |name: &str| -> Result<Tensor<f32>> {
        let v = st.tensor(name).map_err(|e| ck_err(path, format!("{name}: {e}")))?;
        if v.dtype() != Dtype::F32 {
            return Err(ck_err(path, format!("{name}: dtype {:?}, expected F32", v.dtype())));
        }
        let data = v.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Tensor::new(v.shape(), data))
    };
    // A fresh model defines the expected parameter names and shapes.
    let (_, mut params) = Model::init::<f32>(&model, 0)?;
    let ids: Vec<_> = params.ids().collect();
    let expected_names = ids.len() * if meta.contains_key("optimizer_step") { 3 } else { 1 };
    if st.names().len() != expected_names {
        return Err(ck_err(path, format!("{} tensors, expected {expected_names}", st.names().len())));
    }
    let mut m = Vec::new();
    let mut v = Vec::new();
    for id in ids {
        let name = params.name(id).to_string();
        let t = read(&name)?;
        if t.shape() != params.get(id).shape() {
            return Err(ck_err(path, format!("{name}: shape {:?}, expected {:?}", t.shape(), params.get(id).shape())));
        }
        params.set(id, t);
        if meta.contains_key("optimizer_step") {
            m.push(read(&format!("adam.m.{name}"))?);
            v.push(read(&format!("adam.v.{name}"))?);
        }
    }
    let optimizer = match meta.get("optimizer_step") {
        Some(s) => Some(OptimizerState {
            step: s.parse().map_err(|e| ck_err(path, format!("optimizer_step: {e}")))?,
            m,
            v,
        }),
        None => None,
    };
    Ok(Checkpoint { model, train_config: meta.get("train").cloned(), params, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { dim: 8, heads: 2, ffn_dim: 8, stem_channels: vec![4], image_width: 8, image_height: 8, ..ModelConfig::desk() }
    }

    #[test]
    fn round_trip_and_config_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let cfg = tiny();
        let (_, params) = Model::init::<f32>(&cfg, 5).unwrap();
        save_checkpoint(&path, &cfg, &params, None, Some("seed = 5")).unwrap();
        let ck = load_checkpoint(&path, Some(&cfg)).unwrap();
        assert_eq!(ck.train_config.as_deref(), Some("seed = 5"));
        for ((_, a, x), (_, b, y)) in ck.params.iter().zip(params.iter()) {
            assert_eq!((a, x), (b, y));
        }
        let other = ModelConfig { dim: 12, ..cfg };
        let err = load_checkpoint(&path, Some(&other)).unwrap_err().to_string();
        assert!(err.contains("dim=8 (expected dim=12)"), "{err}");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }
}
