//! Non-autoregressive FastSpeech: feed-forward Transformer blocks, a
//! duration predictor and a length regulator that repeats each character's
//! hidden state for its number of frames.

use candle_core::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::layers::{self, add_positions, attention, conv_ffn, embed, postnet};
use super::losses::{decode_durations, duration_loss, masked_l2, ConventionalLoss, DurationLossMode};
use super::target::TtsTarget;
use super::text::{CharVocab, TextSequence};
use super::{FrameFormat, Synthesis};
use crate::dataio::{MelAffine, MelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore, Precision, DEVICE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FastSpeechConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Hidden width of the convolutional feed-forward in each block.
    pub ffn_dim: usize,
    pub ffn_kernel: usize,
    pub duration_channels: usize,
    pub duration_kernel: usize,
    pub duration_mode: DurationLossMode,
    /// Largest duration bucket; longer targets are clamped to it.
    pub max_duration: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub precision: Precision,
}

impl Default for FastSpeechConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 2,
            encoder_layers: 3,
            decoder_layers: 3,
            ffn_dim: 256,
            ffn_kernel: 3,
            duration_channels: 64,
            duration_kernel: 3,
            duration_mode: DurationLossMode::CrossEntropyBucketed,
            max_duration: 50,
            postnet_layers: 5,
            postnet_channels: 64,
            postnet_kernel: 5,
            precision: Precision::F32,
        }
    }
}

impl FastSpeechConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("fastspeech config: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("need at least one encoder and one decoder block");
        }
        for k in [self.ffn_kernel, self.duration_kernel, self.postnet_kernel] {
            if k % 2 == 0 {
                return bad("convolution kernels must be odd");
            }
        }
        if self.postnet_layers == 0 || self.max_duration == 0 {
            return bad("postnet_layers and max_duration must be positive");
        }
        Ok(())
    }

    fn duration_width(&self) -> usize {
        match self.duration_mode {
            DurationLossMode::CrossEntropyBucketed => self.max_duration + 1,
            DurationLossMode::MseLog => 1,
        }
    }
}

/// Outputs in the model's normalised mel space.
#[derive(Debug, Clone)]
pub struct FastSpeechOutputs {
    pub mel_pre: Tensor,
    pub mel_post: Tensor,
    /// Duration predictor output `(N, buckets)` or `(N, 1)`.
    pub duration_output: Tensor,
    pub predicted_durations: Vec<usize>,
    /// Durations the length regulator actually used.
    pub durations: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FastSpeech {
    config: FastSpeechConfig,
    vocab: CharVocab,
    params: ParamStore,
    pub mel_norm: MelAffine,
    pub frame_format: FrameFormat,
}

impl FastSpeech {
    pub fn new(config: FastSpeechConfig, vocab: CharVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut p = ParamStore::new(config.precision.dtype());
        let d = config.d_model;
        p.normal("embed", &[vocab.size(), d], 0.3, &mut rng)?;
        p.constant("enc_alpha", &[1], 1.0)?;
        p.constant("dec_alpha", &[1], 1.0)?;
        for (stack, n) in [("enc", config.encoder_layers), ("dec", config.decoder_layers)] {
            for i in 0..n {
                p.layer_norm(&format!("{stack}.{i}.ln1"), d)?;
                layers::register_attention(&mut p, &format!("{stack}.{i}.attn"), d, &mut rng)?;
                p.layer_norm(&format!("{stack}.{i}.ln2"), d)?;
                layers::register_conv_ffn(&mut p, &format!("{stack}.{i}.ffn"), d, config.ffn_dim, config.ffn_kernel, &mut rng)?;
            }
            p.layer_norm(&format!("{stack}_ln_out"), d)?;
        }
        let c = config.duration_channels;
        p.conv("dur.conv1", &[c, d, config.duration_kernel], &mut rng)?;
        p.layer_norm("dur.ln1", c)?;
        p.conv("dur.conv2", &[c, c, config.duration_kernel], &mut rng)?;
        p.layer_norm("dur.ln2", c)?;
        p.linear("dur.out", c, config.duration_width(), &mut rng)?;
        p.linear("mel_out", d, N_MELS, &mut rng)?;
        layers::register_postnet(
            &mut p,
            config.postnet_layers,
            config.postnet_channels,
            config.postnet_kernel,
            N_MELS,
            &mut rng,
        )?;
        Ok(Self {
            config,
            vocab,
            params: p,
            mel_norm: MelAffine::default(),
            frame_format: FrameFormat::default(),
        })
    }

    pub fn config(&self) -> &FastSpeechConfig {
        &self.config
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn fft_stack(&self, stack: &str, layers: usize, mut x: Tensor) -> Result<Tensor> {
        let p = &self.params;
        for i in 0..layers {
            let h = nn::layer_norm(p, &format!("{stack}.{i}.ln1"), &x)?;
            let (a, _) = attention(p, &format!("{stack}.{i}.attn"), &h, &h, self.config.n_heads, false)?;
            x = (x + a)?;
            let h = nn::layer_norm(p, &format!("{stack}.{i}.ln2"), &x)?;
            x = (&x + conv_ffn(p, &format!("{stack}.{i}.ffn"), &h)?)?;
        }
        nn::layer_norm(p, &format!("{stack}_ln_out"), &x)
    }

    fn duration_predictor(&self, hidden: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let h = nn::conv1d_same(p, "dur.conv1", &hidden.t()?.contiguous()?)?.relu()?;
        let h = nn::layer_norm(p, "dur.ln1", &h.t()?)?;
        let h = nn::conv1d_same(p, "dur.conv2", &h.t()?.contiguous()?)?.relu()?;
        let h = nn::layer_norm(p, "dur.ln2", &h.t()?)?;
        nn::linear(p, "dur.out", &h)
    }

    /// Repeats row `n` of `hidden` `durations[n]` times.
    fn length_regulate(hidden: &Tensor, durations: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = durations
            .iter()
            .enumerate()
            .flat_map(|(n, &d)| std::iter::repeat_n(n as u32, d))
            .collect();
        if idx.is_empty() {
            return Err(Error::invalid("durations sum to zero"));
        }
        let idx = Tensor::new(idx.as_slice(), &DEVICE)?;
        Ok(hidden.index_select(&idx, 0)?)
    }

    /// Forward pass. With `durations` the length regulator uses them
    /// (training); otherwise it uses the predictor's own durations.
    pub fn fastspeech_forward(&self, text: &TextSequence, durations: Option<&[usize]>) -> Result<FastSpeechOutputs> {
        if text.ids().iter().any(|&id| id as usize >= self.vocab.size()) {
            return Err(Error::invalid("token id outside the model vocabulary"));
        }
        if let Some(d) = durations {
            if d.len() != text.len() {
                return Err(Error::Shape(format!("{} durations for {} characters", d.len(), text.len())));
            }
        }
        let p = &self.params;
        let x = add_positions(p, "enc_alpha", &embed(p, "embed", text.ids())?)?;
        let enc = self.fft_stack("enc", self.config.encoder_layers, x)?;
        let duration_output = self.duration_predictor(&enc)?;
        let predicted_durations = decode_durations(&duration_output, self.config.duration_mode)?;
        let used = durations.map_or_else(|| predicted_durations.clone(), <[usize]>::to_vec);
        let expanded = Self::length_regulate(&enc, &used)?;
        let x = add_positions(p, "dec_alpha", &expanded)?;
        let dec = self.fft_stack("dec", self.config.decoder_layers, x)?;
        let mel_pre = nn::linear(p, "mel_out", &dec)?;
        let frames = mel_pre.dim(0)?;
        let mel_post = postnet(p, self.config.postnet_layers, &mel_pre, frames)?;
        Ok(FastSpeechOutputs {
            mel_pre,
            mel_post,
            duration_output,
            predicted_durations,
            durations: used,
        })
    }

    /// `l2_pre + l2_post + duration_loss`.
    pub fn conventional_loss(&self, outputs: &FastSpeechOutputs, target: &TtsTarget) -> Result<ConventionalLoss> {
        let durations = target
            .durations
            .as_deref()
            .ok_or_else(|| Error::invalid("FastSpeech target has no durations"))?;
        let valid = target.valid_frames();
        let len = outputs.mel_pre.dim(0)?;
        if len < valid {
            return Err(Error::Shape(format!("outputs of {len} frames for {valid} valid target frames")));
        }
        let t = self
            .mel_norm
            .normalize(&target.mel.to_tensor(self.params.dtype(), &DEVICE)?)?;
        ConventionalLoss::combine(vec![
            ("l2_pre", masked_l2(&outputs.mel_pre, &t, valid)?, 1.0),
            ("l2_post", masked_l2(&outputs.mel_post, &t, valid)?, 1.0),
            (
                "duration_loss",
                duration_loss(&outputs.duration_output, durations, self.config.duration_mode, self.config.max_duration)?,
                1.0,
            ),
        ])
    }

    /// Inference with predicted durations.
    pub fn synthesize(&self, text: &TextSequence) -> Result<Synthesis> {
        let out = self.fastspeech_forward(text, None)?;
        let raw = self.mel_norm.denormalize(&out.mel_post)?;
        Ok(Synthesis {
            mel: MelSpectrogram::from_tensor(&raw, self.frame_format.sample_rate, self.frame_format.hop_length)?,
            truncated: false,
            durations: Some(out.durations),
        })
    }

    /// Inference with caller-fixed durations.
    pub fn synthesize_with_durations(&self, text: &TextSequence, durations: &[usize]) -> Result<Synthesis> {
        let out = self.fastspeech_forward(text, Some(durations))?;
        let raw = self.mel_norm.denormalize(&out.mel_post)?;
        Ok(Synthesis {
            mel: MelSpectrogram::from_tensor(&raw, self.frame_format.sample_rate, self.frame_format.hop_length)?,
            truncated: false,
            durations: Some(out.durations),
        })
    }

    pub(crate) fn from_parts(
        config: FastSpeechConfig,
        vocab: CharVocab,
        mel_norm: MelAffine,
        frame_format: FrameFormat,
    ) -> Result<Self> {
        let mut model = Self::new(config, vocab, 0)?;
        model.mel_norm = mel_norm;
        model.frame_format = frame_format;
        Ok(model)
    }
}
