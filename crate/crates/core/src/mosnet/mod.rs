//! Frame-level convolutional-recurrent MOS predictor.
//!
//! Twelve 3x3 convolutions in four blocks collapse the 80 mel bins, a
//! bidirectional LSTM runs over time, two fully connected layers emit one
//! score per frame, and the utterance score is the mean frame score.

mod checkpoint;
mod metrics;
mod train;

use candle_core::{DType, Tensor};

pub use crate::nn::Precision;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataio::{MelAffine, MelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore, DEVICE};

pub use checkpoint::{MosCheckpointMeta, MOSNET_MAGIC};
pub use metrics::{eval_mos_predictor, prediction_metrics, MosPredictionMetrics};
pub use train::{train_mos, MosTrainConfig, MosTrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MosPredictorConfig {
    pub n_conv_layers: usize,
    /// Output channels of each convolution block.
    pub conv_channels: Vec<usize>,
    /// Frequency stride of each layer inside a block.
    pub block_freq_strides: Vec<usize>,
    pub blstm_units: usize,
    /// Hidden width of the first dense layer and output width of the second.
    pub fc_sizes: [usize; 2],
    pub input_bins: usize,
    pub dropout: f64,
    pub precision: Precision,
}

impl Default for MosPredictorConfig {
    fn default() -> Self {
        Self {
            n_conv_layers: 12,
            conv_channels: vec![16, 32, 64, 128],
            block_freq_strides: vec![1, 1, 3],
            blstm_units: 32,
            fc_sizes: [128, 1],
            input_bins: N_MELS,
            dropout: 0.3,
            precision: Precision::F32,
        }
    }
}

impl MosPredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("MOS predictor config: {m}")));
        if self.input_bins != N_MELS {
            return bad("input_bins must be 80");
        }
        if self.n_conv_layers == 0 || self.conv_channels.is_empty() {
            return bad("need at least one convolution layer");
        }
        if !self.n_conv_layers.is_multiple_of(self.conv_channels.len())
            || self.n_conv_layers / self.conv_channels.len() != self.block_freq_strides.len()
        {
            return bad("n_conv_layers must equal blocks x block_freq_strides.len()");
        }
        if self.conv_channels.contains(&0) || self.block_freq_strides.contains(&0) {
            return bad("channel counts and strides must be positive");
        }
        if self.blstm_units == 0 || self.fc_sizes[0] == 0 {
            return bad("blstm_units and fc_sizes[0] must be positive");
        }
        if self.fc_sizes[1] != 1 {
            return bad("the last dense layer emits one score per frame");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Mel bins left after the strided convolutions.
    pub fn collapsed_bins(&self) -> usize {
        let mut bins = self.input_bins;
        for _ in &self.conv_channels {
            for &s in &self.block_freq_strides {
                bins = (bins - 1) / s + 1;
            }
        }
        bins
    }

    fn layer_plan(&self) -> Vec<(usize, usize, usize)> {
        let mut plan = Vec::new();
        let mut c_in = 1;
        for &c_out in &self.conv_channels {
            for &stride in &self.block_freq_strides {
                plan.push((c_in, c_out, stride));
                c_in = c_out;
            }
        }
        plan
    }
}

/// Per-frame and utterance-level predicted MOS.
#[derive(Debug, Clone, PartialEq)]
pub struct MosScores {
    pub frame_scores: Vec<f64>,
    pub utterance_score: f64,
}

#[derive(Debug, Clone)]
pub struct MosPredictor {
    config: MosPredictorConfig,
    params: ParamStore,
    /// Maps raw log-mels into the range the network was trained on.
    pub input_norm: MelAffine,
}

impl MosPredictor {
    pub fn new(config: MosPredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamStore::new(config.precision.dtype());
        for (i, (c_in, c_out, _)) in config.layer_plan().into_iter().enumerate() {
            params.conv(&format!("conv.{i}"), &[c_out, c_in, 3, 3], &mut rng)?;
        }
        let feat = config.conv_channels.last().copied().unwrap_or(1) * config.collapsed_bins();
        let h = config.blstm_units;
        let bound = 1.0 / (h as f64).sqrt();
        for dir in ["fwd", "bwd"] {
            params.linear(&format!("blstm.{dir}.ih"), feat, 4 * h, &mut rng)?;
            params.uniform(&format!("blstm.{dir}.hh.weight"), &[4 * h, h], bound, &mut rng)?;
        }
        params.linear("fc1", 2 * h, config.fc_sizes[0], &mut rng)?;
        params.linear("fc2", config.fc_sizes[0], 1, &mut rng)?;
        // start near the middle of the rating scale
        params.constant("fc2.bias", &[1], 3.0)?;
        Ok(Self {
            config,
            params,
            input_norm: MelAffine::default(),
        })
    }

    pub fn config(&self) -> &MosPredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    /// Detaches the parameters: scoring stays differentiable with respect to
    /// the input mel but nothing can update the predictor.
    pub fn freeze(&mut self) {
        self.params.set_frozen(true);
    }

    pub fn frozen(mut self) -> Self {
        self.freeze();
        self
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    /// Differentiable forward pass on a raw `(T, 80)` log-mel tensor.
    /// Returns `(frame_scores (T), utterance_score ())`. Dropout is active
    /// only when a generator is supplied.
    pub fn forward(&self, mel: &Tensor, rng: Option<&mut StdRng>) -> Result<(Tensor, Tensor)> {
        let (steps, bins) = mel.dims2()?;
        if bins != self.config.input_bins {
            return Err(Error::Shape(format!(
                "MOS predictor expects {} mel bins, got {bins}",
                self.config.input_bins
            )));
        }
        let p = &self.params;
        let mut x = self
            .input_norm
            .normalize(&mel.to_dtype(self.dtype())?)?
            .reshape((1, 1, steps, bins))?;
        for (i, (_, c_out, stride)) in self.config.layer_plan().into_iter().enumerate() {
            let w = p.get(&format!("conv.{i}.weight"))?;
            let b = p.get(&format!("conv.{i}.bias"))?;
            // Explicit padding: see nn::conv1d_same.
            x = x
                .pad_with_zeros(2, 1, 1)?
                .pad_with_zeros(3, 1, 1)?
                .conv2d(&w, 0, 1, 1, 1)?
                .broadcast_add(&b.reshape((1, c_out, 1, 1))?)?
                .relu()?;
            if stride > 1 {
                let width = x.dim(3)?;
                let keep: Vec<u32> = (0..width as u32).step_by(stride).collect();
                let idx = Tensor::new(keep.as_slice(), &DEVICE)?;
                x = x.index_select(&idx, 3)?;
            }
        }
        let (_, channels, _, width) = x.dims4()?;
        let feats = x
            .squeeze(0)?
            .permute((1, 0, 2))?
            .contiguous()?
            .reshape((steps, channels * width))?;

        let fwd_in = nn::linear(p, "blstm.fwd.ih", &feats)?;
        let bwd_in = nn::linear(p, "blstm.bwd.ih", &feats)?;
        let fwd = nn::lstm_direction(&fwd_in, &p.get("blstm.fwd.hh.weight")?, false)?;
        let bwd = nn::lstm_direction(&bwd_in, &p.get("blstm.bwd.hh.weight")?, true)?;
        let h = Tensor::cat(&[fwd, bwd], 1)?;

        let hidden = nn::linear(p, "fc1", &h)?.relu()?;
        let hidden = nn::dropout(&hidden, self.config.dropout, rng)?;
        let frames = nn::linear(p, "fc2", &hidden)?.squeeze(1)?;
        let utterance = frames.mean_all()?;
        Ok((frames, utterance))
    }

    /// Evaluation-mode scoring of one mel.
    pub fn mos_forward(&self, mel: &MelSpectrogram) -> Result<MosScores> {
        let (frames, utt) = self.forward(&mel.to_tensor(self.dtype(), &DEVICE)?, None)?;
        Ok(MosScores {
            frame_scores: nn::to_vec_f64(&frames)?,
            utterance_score: nn::scalar(&utt)?,
        })
    }

    pub fn score(&self, mel: &MelSpectrogram) -> Result<f64> {
        Ok(self.mos_forward(mel)?.utterance_score)
    }

    /// Scores each mel on its own true length, so results never depend on
    /// what else is in the batch.
    pub fn score_batch<'a>(&self, mels: impl IntoIterator<Item = &'a MelSpectrogram>) -> Result<Vec<f64>> {
        mels.into_iter().map(|m| self.score(m)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> MosPredictorConfig {
        MosPredictorConfig {
            n_conv_layers: 4,
            conv_channels: vec![4, 4],
            block_freq_strides: vec![1, 3],
            blstm_units: 4,
            fc_sizes: [8, 1],
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn mel(t: usize, seed: u64) -> MelSpectrogram {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(seed);
        MelSpectrogram::new((0..t * N_MELS).map(|_| rng.random_range(-2.0..2.0)).collect(), 22_050.0, 256).unwrap()
    }

    #[test]
    fn default_stack_collapses_all_bins() {
        let cfg = MosPredictorConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.collapsed_bins(), 1);
        assert_eq!(cfg.layer_plan().len(), 12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MosPredictorConfig::default();
        cfg.input_bins = 257;
        assert!(cfg.validate().is_err());
        let mut cfg = MosPredictorConfig::default();
        cfg.blstm_units = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = MosPredictorConfig::default();
        cfg.n_conv_layers = 10;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn utterance_score_is_mean_of_frames() {
        let model = MosPredictor::new(tiny_config(), 3).unwrap();
        let s = model.mos_forward(&mel(7, 1)).unwrap();
        assert_eq!(s.frame_scores.len(), 7);
        let mean = s.frame_scores.iter().sum::<f64>() / 7.0;
        assert!((mean - s.utterance_score).abs() < 1e-5);
    }

    #[test]
    fn single_frame_score_equals_utterance_score() {
        let model = MosPredictor::new(tiny_config(), 3).unwrap();
        let s = model.mos_forward(&mel(1, 2)).unwrap();
        assert_eq!(s.frame_scores.len(), 1);
        assert_eq!(s.frame_scores[0], s.utterance_score);
    }

    #[test]
    fn batch_scoring_matches_individual_scoring() {
        let model = MosPredictor::new(tiny_config(), 5).unwrap();
        let (a, b) = (mel(4, 10), mel(9, 11));
        let batch = model.score_batch([&a, &b]).unwrap();
        assert_eq!(batch, vec![model.score(&a).unwrap(), model.score(&b).unwrap()]);
    }

    #[test]
    fn wrong_bin_count_is_a_shape_error() {
        let model = MosPredictor::new(tiny_config(), 0).unwrap();
        let x = Tensor::zeros((3, 40), DType::F32, &DEVICE).unwrap();
        assert!(matches!(model.forward(&x, None), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut cfg = tiny_config();
        cfg.dropout = 0.5;
        let model = MosPredictor::new(cfg, 8).unwrap();
        let m = mel(5, 4);
        assert_eq!(model.mos_forward(&m).unwrap(), model.mos_forward(&m).unwrap());
    }
}
