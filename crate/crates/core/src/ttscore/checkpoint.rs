use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnyTtsModel, CharVocab, FastSpeech, FastSpeechConfig, FrameFormat, ModelFamily, TransformerTts,
    TransformerTtsConfig, TtsModel};
use crate::dataio::MelAffine;
use crate::error::{Error, Result};

pub const TTSCORE_MAGIC: &str = "TTSCORE1";
const META_FILE: &str = "meta.toml";
const PARAMS_FILE: &str = "params.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsCheckpointMeta {
    pub magic: String,
    pub family: ModelFamily,
    pub epoch: usize,
    pub vocab: String,
    pub mel_norm: MelAffine,
    pub frame_format: FrameFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transformer: Option<TransformerTtsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fastspeech: Option<FastSpeechConfig>,
}

fn checkpoint_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl AnyTtsModel {
    fn frame_format(&self) -> FrameFormat {
        match self {
            AnyTtsModel::Transformer(m) => m.frame_format,
            AnyTtsModel::FastSpeech(m) => m.frame_format,
        }
    }

    /// Writes `meta.toml` and `params.safetensors` into `dir`.
    pub fn save(&self, dir: &Path, epoch: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (transformer, fastspeech) = match self {
            AnyTtsModel::Transformer(m) => (Some(m.config().clone()), None),
            AnyTtsModel::FastSpeech(m) => (None, Some(m.config().clone())),
        };
        let meta = TtsCheckpointMeta {
            magic: TTSCORE_MAGIC.into(),
            family: self.family(),
            epoch,
            vocab: self.vocab().chars(),
            mel_norm: self.mel_norm(),
            frame_format: self.frame_format(),
            transformer,
            fastspeech,
        };
        let text = toml::to_string(&meta).map_err(|e| Error::invalid(e.to_string()))?;
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, text).map_err(|e| Error::io(meta_path, e))?;
        self.params().save(&dir.join(PARAMS_FILE))
    }

    pub fn load(dir: &Path) -> Result<(Self, TtsCheckpointMeta)> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: TtsCheckpointMeta =
            toml::from_str(&text).map_err(|e| checkpoint_err(&meta_path, e.to_string()))?;
        if meta.magic != TTSCORE_MAGIC {
            return Err(checkpoint_err(
                &meta_path,
                format!("magic {:?} is not {TTSCORE_MAGIC}", meta.magic),
            ));
        }
        let vocab = CharVocab::from_chars(&meta.vocab);
        let model = match meta.family {
            ModelFamily::Transformer => {
                let config = meta
                    .transformer
                    .clone()
                    .ok_or_else(|| checkpoint_err(&meta_path, "missing [transformer] section"))?;
                AnyTtsModel::Transformer(TransformerTts::from_parts(config, vocab, meta.mel_norm, meta.frame_format)?)
            }
            ModelFamily::FastSpeech => {
                let config = meta
                    .fastspeech
                    .clone()
                    .ok_or_else(|| checkpoint_err(&meta_path, "missing [fastspeech] section"))?;
                AnyTtsModel::FastSpeech(FastSpeech::from_parts(config, vocab, meta.mel_norm, meta.frame_format)?)
            }
        };
        model.params().load_values(&dir.join(PARAMS_FILE))?;
        Ok((model, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ttscore::TextSequence;

    #[test]
    fn fastspeech_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = CharVocab::from_chars("ab c");
        let config = FastSpeechConfig {
            d_model: 8,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 8,
            duration_channels: 8,
            postnet_layers: 2,
            postnet_channels: 8,
            ..Default::default()
        };
        let mut model = FastSpeech::new(config, vocab, 3).unwrap();
        model.mel_norm = MelAffine { shift: -5.0, scale: 3.0 };
        let model = AnyTtsModel::FastSpeech(model);
        model.save(dir.path(), 4).unwrap();
        let (back, meta) = AnyTtsModel::load(dir.path()).unwrap();
        assert_eq!(meta.epoch, 4);
        assert_eq!(back.family(), ModelFamily::FastSpeech);
        assert_eq!(back.params().checksum().unwrap(), model.params().checksum().unwrap());
        let text = TextSequence::new(vec![1, 2, 3], back.vocab().size()).unwrap();
        assert_eq!(back.synthesize(&text).unwrap(), model.synthesize(&text).unwrap());
    }
}
