//! Toy-scale Transformer TTS and FastSpeech with their conventional losses,
//! teacher-to-student distillation and inference.

mod attention;
mod checkpoint;
mod distill;
mod fastspeech;
mod layers;
mod losses;
mod target;
mod text;
mod transformer;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataio::{MelAffine, MelSpectrogram};
use crate::error::Result;
use crate::nn::ParamStore;

pub use attention::{guided_attention_loss, guided_weight, AttentionAlignment};
pub use checkpoint::{TtsCheckpointMeta, TTSCORE_MAGIC};
pub use distill::{
    distill_targets, durations_from_alignment, is_degenerate, read_distilled, read_duration_sidecar,
    select_alignment, write_distilled, DistillReport,
};
pub use fastspeech::{FastSpeech, FastSpeechConfig, FastSpeechOutputs};
pub use losses::{ConventionalLoss, DurationLossMode, LossTerm};
pub use target::{TtsExample, TtsTarget};
pub use text::{CharVocab, TextSequence};
pub use transformer::{TransformerOutputs, TransformerTts, TransformerTtsConfig};

/// Sample rate and hop stamped on generated mels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameFormat {
    pub sample_rate: f32,
    pub hop_length: u32,
}

impl Default for FrameFormat {
    fn default() -> Self {
        Self {
            sample_rate: 22_050.0,
            hop_length: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    /// The frame cap was hit before the stop token fired.
    pub truncated: bool,
    pub durations: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Transformer,
    FastSpeech,
}

/// Result of one teacher-forced pass: the conventional loss and the
/// generated mels over the valid frames, in normalised space.
#[derive(Debug, Clone)]
pub struct TrainingPass {
    pub loss: ConventionalLoss,
    pub mel_pre: Tensor,
    pub mel_post: Tensor,
}

/// What the training loop needs from a TTS model family.
pub trait TtsModel {
    fn family(&self) -> ModelFamily;
    fn params(&self) -> &ParamStore;
    fn vocab(&self) -> &CharVocab;
    fn mel_norm(&self) -> MelAffine;
    fn set_mel_norm(&mut self, norm: MelAffine);
    fn set_frame_format(&mut self, format: FrameFormat);
    fn training_pass(&self, example: &TtsExample) -> Result<TrainingPass>;
    fn synthesize(&self, text: &TextSequence) -> Result<Synthesis>;
}

impl TtsModel for TransformerTts {
    fn family(&self) -> ModelFamily {
        ModelFamily::Transformer
    }

    fn params(&self) -> &ParamStore {
        TransformerTts::params(self)
    }

    fn vocab(&self) -> &CharVocab {
        TransformerTts::vocab(self)
    }

    fn mel_norm(&self) -> MelAffine {
        self.mel_norm
    }

    fn set_mel_norm(&mut self, norm: MelAffine) {
        self.mel_norm = norm;
    }

    fn set_frame_format(&mut self, format: FrameFormat) {
        self.frame_format = format;
    }

    fn training_pass(&self, example: &TtsExample) -> Result<TrainingPass> {
        let target = &example.target;
        let t = self
            .mel_norm
            .normalize(&target.mel.to_tensor(self.params().dtype(), &crate::nn::DEVICE)?)?;
        let out = self.forward_normalized(&example.text, &t, target.valid_frames())?;
        let loss = self.conventional_loss(&out, target)?;
        let valid = target.valid_frames();
        Ok(TrainingPass {
            loss,
            mel_pre: out.mel_pre.narrow(0, 0, valid)?,
            mel_post: out.mel_post.narrow(0, 0, valid)?,
        })
    }

    fn synthesize(&self, text: &TextSequence) -> Result<Synthesis> {
        TransformerTts::synthesize(self, text)
    }
}

impl TtsModel for FastSpeech {
    fn family(&self) -> ModelFamily {
        ModelFamily::FastSpeech
    }

    fn params(&self) -> &ParamStore {
        FastSpeech::params(self)
    }

    fn vocab(&self) -> &CharVocab {
        FastSpeech::vocab(self)
    }

    fn mel_norm(&self) -> MelAffine {
        self.mel_norm
    }

    fn set_mel_norm(&mut self, norm: MelAffine) {
        self.mel_norm = norm;
    }

    fn set_frame_format(&mut self, format: FrameFormat) {
        self.frame_format = format;
    }

    fn training_pass(&self, example: &TtsExample) -> Result<TrainingPass> {
        let durations = example
            .target
            .durations
            .as_deref()
            .ok_or_else(|| crate::Error::invalid("FastSpeech training needs durations"))?;
        let out = self.fastspeech_forward(&example.text, Some(durations))?;
        let loss = self.conventional_loss(&out, &example.target)?;
        Ok(TrainingPass {
            loss,
            mel_pre: out.mel_pre,
            mel_post: out.mel_post,
        })
    }

    fn synthesize(&self, text: &TextSequence) -> Result<Synthesis> {
        FastSpeech::synthesize(self, text)
    }
}

/// Either model family, as restored from a checkpoint.
#[derive(Debug, Clone)]
pub enum AnyTtsModel {
    Transformer(TransformerTts),
    FastSpeech(FastSpeech),
}

impl AnyTtsModel {
    fn inner(&self) -> &dyn TtsModel {
        match self {
            AnyTtsModel::Transformer(m) => m,
            AnyTtsModel::FastSpeech(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn TtsModel {
        match self {
            AnyTtsModel::Transformer(m) => m,
            AnyTtsModel::FastSpeech(m) => m,
        }
    }
}

impl TtsModel for AnyTtsModel {
    fn family(&self) -> ModelFamily {
        self.inner().family()
    }

    fn params(&self) -> &ParamStore {
        self.inner().params()
    }

    fn vocab(&self) -> &CharVocab {
        self.inner().vocab()
    }

    fn mel_norm(&self) -> MelAffine {
        self.inner().mel_norm()
    }

    fn set_mel_norm(&mut self, norm: MelAffine) {
        self.inner_mut().set_mel_norm(norm)
    }

    fn set_frame_format(&mut self, format: FrameFormat) {
        self.inner_mut().set_frame_format(format)
    }

    fn training_pass(&self, example: &TtsExample) -> Result<TrainingPass> {
        self.inner().training_pass(example)
    }

    fn synthesize(&self, text: &TextSequence) -> Result<Synthesis> {
        self.inner().synthesize(text)
    }
}
