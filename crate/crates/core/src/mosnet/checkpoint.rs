use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MosPredictionMetrics, MosPredictor, MosPredictorConfig};
use crate::dataio::MelAffine;
use crate::error::{Error, Result};

pub const MOSNET_MAGIC: &str = "MOSNET1";
const META_FILE: &str = "meta.toml";
const PARAMS_FILE: &str = "params.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosCheckpointMeta {
    pub magic: String,
    pub epoch: usize,
    pub config: MosPredictorConfig,
    pub input_norm: MelAffine,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MosPredictionMetrics>,
}

impl MosPredictor {
    /// Writes `meta.toml` and `params.safetensors` into `dir`.
    pub fn save(&self, dir: &Path, epoch: usize, metrics: Option<MosPredictionMetrics>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = MosCheckpointMeta {
            magic: MOSNET_MAGIC.into(),
            epoch,
            config: self.config.clone(),
            input_norm: self.input_norm,
            metrics,
        };
        let text = toml::to_string(&meta).map_err(|e| Error::invalid(e.to_string()))?;
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, text).map_err(|e| Error::io(meta_path, e))?;
        self.params.save(&dir.join(PARAMS_FILE))
    }

    /// Loads a checkpoint. The returned model is not frozen.
    pub fn load(dir: &Path) -> Result<(Self, MosCheckpointMeta)> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: MosCheckpointMeta = toml::from_str(&text).map_err(|e| Error::Checkpoint {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        if meta.magic != MOSNET_MAGIC {
            return Err(Error::Checkpoint {
                path: meta_path,
                message: format!("magic {:?} is not {MOSNET_MAGIC}", meta.magic),
            });
        }
        let mut model = MosPredictor::new(meta.config.clone(), 0)?;
        model.params.load_values(&dir.join(PARAMS_FILE))?;
        model.input_norm = meta.input_norm;
        Ok((model, meta))
    }

    /// Loads a checkpoint and freezes it for scoring.
    pub fn load_frozen(dir: &Path) -> Result<Self> {
        Ok(Self::load(dir)?.0.frozen())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mosnet::tests::tiny_config;

    #[test]
    fn round_trip_preserves_scores() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = MosPredictor::new(tiny_config(), 1).unwrap();
        model.input_norm = MelAffine { shift: -4.0, scale: 2.0 };
        let metrics = MosPredictionMetrics { lcc: Some(0.5), srcc: None, mse: 0.3 };
        model.save(dir.path(), 7, Some(metrics)).unwrap();
        let (back, meta) = MosPredictor::load(dir.path()).unwrap();
        assert_eq!(meta.epoch, 7);
        assert_eq!(meta.metrics, Some(metrics));
        assert_eq!(back.checksum().unwrap(), model.checksum().unwrap());
        assert_eq!(back.input_norm, model.input_norm);
        assert!(MosPredictor::load_frozen(dir.path()).unwrap().is_frozen());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        MosPredictor::new(tiny_config(), 1).unwrap().save(dir.path(), 0, None).unwrap();
        let meta = dir.path().join(META_FILE);
        let text = fs::read_to_string(&meta).unwrap().replace(MOSNET_MAGIC, "TTSCORE1");
        fs::write(&meta, text).unwrap();
        let err = MosPredictor::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
