//! Checkpoints are directories holding `manifest.json` and `params.bin`, the
//! latter a flat block of little-endian `f64` values in parameter-layout order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CompositionModel, ModelConfig, ParamEntry, SupervisedModel};
use crate::error::{Error, Result};

pub const FORMAT: &str = "comgen-checkpoint-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Composition,
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub n_params: usize,
    pub layout: Vec<ParamEntry>,
}

pub fn params_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Header(format!("parameter block of {} bytes is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn write_checkpoint(dir: &Path, manifest: &CheckpointManifest, values: &[f64]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(manifest)?)?;
    fs::write(dir.join(PARAMS_FILE), params_to_bytes(values))?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Vec<f64>)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Version {
            expected: FORMAT.into(),
            found: manifest.format,
        });
    }
    let values = params_from_bytes(&fs::read(dir.join(PARAMS_FILE))?)?;
    if values.len() != manifest.n_params {
        return Err(Error::PayloadLength {
            expected: manifest.n_params * 8,
            actual: values.len() * 8,
        });
    }
    Ok((manifest, values))
}

fn check_layout(manifest: &CheckpointManifest, expected: ModelKind, layout: &[ParamEntry]) -> Result<()> {
    if manifest.kind != expected {
        return Err(Error::config(format!(
            "checkpoint holds a {:?} model, expected {:?}",
            manifest.kind, expected
        )));
    }
    if manifest.layout != layout {
        return Err(Error::Header("parameter layout differs from the rebuilt architecture".into()));
    }
    Ok(())
}

impl CompositionModel {
    pub fn save(&self, dir: impl AsRef<Path>, seed: u64, epoch: usize) -> Result<()> {
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            kind: ModelKind::Composition,
            config: self.config.clone(),
            seed,
            epoch,
            n_params: self.n_params(),
            layout: self.params.entries().to_vec(),
        };
        write_checkpoint(dir.as_ref(), &manifest, &self.params.values)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointManifest)> {
        let (manifest, values) = read_checkpoint(dir.as_ref())?;
        let mut model = Self::uninitialized(manifest.config.clone())?;
        check_layout(&manifest, ModelKind::Composition, model.params.entries())?;
        model.params.values = values;
        Ok((model, manifest))
    }
}

impl SupervisedModel {
    pub fn save(&self, dir: impl AsRef<Path>, seed: u64, epoch: usize) -> Result<()> {
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            kind: ModelKind::Supervised,
            config: self.config.clone(),
            seed,
            epoch,
            n_params: self.n_params(),
            layout: self.params.entries().to_vec(),
        };
        write_checkpoint(dir.as_ref(), &manifest, &self.params.values)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointManifest)> {
        let (manifest, values) = read_checkpoint(dir.as_ref())?;
        let mut model = Self::uninitialized(manifest.config.clone())?;
        check_layout(&manifest, ModelKind::Supervised, model.params.entries())?;
        model.params.values = values;
        Ok((model, manifest))
    }
}

/// Reads only the manifest, to decide which model type to rebuild.
pub fn peek_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    Ok(serde_json::from_slice(&fs::read(dir.as_ref().join(MANIFEST_FILE))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnmodels::OperatorKind;

    #[test]
    fn composition_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny(1, 2).with_operator(OperatorKind::Mlp);
        let m = CompositionModel::new(cfg, 17).unwrap();
        m.save(dir.path(), 17, 3).unwrap();
        let (back, manifest) = CompositionModel::load(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!((manifest.seed, manifest.epoch), (17, 3));
        assert_eq!(peek_manifest(dir.path()).unwrap().kind, ModelKind::Composition);
        let bytes = fs::read(dir.path().join(PARAMS_FILE)).unwrap();
        assert_eq!(bytes.len(), 8 * m.n_params());
        assert_eq!(&bytes[..8], &m.params.values[0].to_le_bytes());
        assert!(SupervisedModel::load(dir.path()).is_err());
    }

    #[test]
    fn truncated_block_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = SupervisedModel::new(ModelConfig::tiny(1, 2), 1).unwrap();
        m.save(dir.path(), 1, 0).unwrap();
        let (back, _) = SupervisedModel::load(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        let p = dir.path().join(PARAMS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(SupervisedModel::load(dir.path()), Err(Error::PayloadLength { .. })));
    }
}
