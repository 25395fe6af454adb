//! Checkpoints are safetensors files. Tensor names carry a role prefix
//! (`online.`, `target.`, `model.`, `optim.`); the string metadata holds
//! `format`, `version`, `kind`, `step`, `config` (JSON), `config_hash` and
//! `state` (JSON). Any safetensors reader can open them.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const FORMAT: &str = "gazekit-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: RunConfig,
    pub state: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    })
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, config: &RunConfig, state: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), step, config: config.clone(), state, tensors: Vec::new() }
    }

    pub fn with_tensors(mut self, prefix: &str, tensors: Vec<(String, Tensor)>) -> Self {
        self.tensors.extend(tensors.into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        self
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let encoded = self
            .tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), to_bytes(t)?, t.dims().to_vec())))
            .collect::<Result<Vec<_>>>()?;
        let views = encoded
            .iter()
            .map(|(n, (dt, bytes), shape)| {
                TensorView::new(*dt, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("version".to_string(), VERSION.to_string());
        meta.insert("kind".to_string(), self.kind.clone());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("config_hash".to_string(), self.config.hash());
        meta.insert("state".to_string(), serde_json::to_string(&self.state)?);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        let (_, header) = SafeTensors::read_metadata(buf).map_err(|e| err(e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| err("missing metadata".into()))?;
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| err(format!("metadata key {k} missing")));
        if get("format")? != FORMAT {
            return Err(err("not a gazekit checkpoint".into()));
        }
        let version: u32 = get("version")?.parse().map_err(|_| err("bad version".into()))?;
        if version != VERSION {
            return Err(err(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let config: RunConfig = serde_json::from_str(&get("config")?)?;
        if config.hash() != get("config_hash")? {
            return Err(err("config hash does not match the embedded config".into()));
        }
        let st = SafeTensors::deserialize(buf).map_err(|e| err(e.to_string()))?;
        let mut tensors = st
            .tensors()
            .iter()
            .map(|(n, v)| Ok((n.clone(), from_view(v)?)))
            .collect::<Result<Vec<_>>>()?;
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self {
            kind: get("kind")?,
            step: get("step")?.parse().map_err(|_| err("bad step".into()))?,
            config,
            state: serde_json::from_str(&get("state")?)?,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let cfg = RunConfig::desk();
        let a = Tensor::new(&[[1.5f64, -2.0], [0.25, 1e-300]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[3.0f32, 4.0, 5.0], &Device::Cpu).unwrap();
        let ck = Checkpoint::new("encoder", 42, &cfg, serde_json::json!({"epoch": 3}))
            .with_tensors("online.", vec![("w".into(), a.clone()), ("b".into(), b.clone())]);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.kind, "encoder");
        assert_eq!(back.step, 42);
        assert_eq!(back.config, cfg);
        assert_eq!(back.state["epoch"], 3);
        let g = back.group("online.");
        assert_eq!(g.len(), 2);
        let w = &g.iter().find(|(n, _)| n == "w").unwrap().1;
        assert_eq!(w.dtype(), DType::F64);
        assert_eq!(w.to_vec2::<f64>().unwrap(), a.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        let plain = safetensors::serialize(Vec::<(String, TensorView<'_>)>::new(), None).unwrap();
        assert!(Checkpoint::from_bytes(&plain).is_err());
    }
}
