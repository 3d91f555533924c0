use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::DepthMetrics;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PARAMS_FILE: &str = "params.safetensors";

/// Human-readable description of a saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub epoch: usize,
    pub global_step: usize,
    /// Flat `key = value` snapshot of the training configuration.
    pub config: BTreeMap<String, String>,
    /// SHA-256 of each parameter blob, by file name.
    pub digests: BTreeMap<String, String>,
    /// Held-out depth metrics without alignment, when ground truth exists.
    pub metrics: Option<DepthMetrics>,
}

impl CheckpointManifest {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v).map_err(|e| Error::Checkpoint(format!("config entry {k}: {e}")))?;
        }
        Ok(cfg)
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    config: &TrainConfig,
    epoch: usize,
    global_step: usize,
    metrics: Option<DepthMetrics>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = dir.join(PARAMS_FILE);
    model.params.save(&params)?;
    let manifest = CheckpointManifest {
        epoch,
        global_step,
        config: config.to_kv().into_iter().collect(),
        digests: BTreeMap::from([(PARAMS_FILE.to_string(), sha256_file(&params)?)]),
        metrics,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    log::info!("checkpoint written to {}", dir.display());
    Ok(manifest)
}

/// Rebuilds the model from a checkpoint directory after verifying digests.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, TrainConfig, CheckpointManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    for (file, expected) in &manifest.digests {
        let found = sha256_file(&dir.join(file))?;
        if &found != expected {
            return Err(Error::Checkpoint(format!("digest mismatch for {file}")));
        }
    }
    if !manifest.digests.contains_key(PARAMS_FILE) {
        return Err(Error::Checkpoint(format!("manifest lists no {PARAMS_FILE}")));
    }
    let config = manifest.train_config()?;
    let model = Model::new(&config)?;
    model.params.load(&dir.join(PARAMS_FILE))?;
    Ok((model, config, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Align;
    use crate::training::tests::tiny_config;
    use crate::training::{evaluate, Trainer};

    #[test]
    fn round_trip_reproduces_metrics() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        t.train_step().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let saved = t.save(dir.path()).unwrap();
        let (model, cfg, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest, saved);
        assert_eq!(cfg, t.config);
        let again = evaluate(&model, &t.data.holdout, cfg.bins.d_max, Align::None).unwrap().unwrap();
        assert!(again.max_abs_diff(&saved.metrics.unwrap()) < 1e-6);
        assert_eq!(model.params.snapshot().unwrap(), t.model.params.snapshot().unwrap());
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let t = Trainer::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
