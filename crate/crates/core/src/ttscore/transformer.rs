//! Autoregressive Transformer TTS: character encoder, mel decoder with a
//! pre-net, stop-token head and a residual post-net.

use candle_core::{Tensor, D};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::attention::{guided_attention_tensor, AttentionAlignment};
use super::layers::{self, add_positions, attention, embed, ffn, postnet};
use super::losses::{masked_l2, stop_bce, ConventionalLoss};
use super::target::TtsTarget;
use super::text::{CharVocab, TextSequence};
use super::{FrameFormat, Synthesis};
use crate::dataio::{MelAffine, MelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore, Precision, DEVICE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerTtsConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub prenet_dim: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    /// Positive-class weight in the stop-token cross-entropy.
    pub stop_pos_weight: f64,
    /// Width `g` of the guided-attention penalty.
    pub ga_sigma: f64,
    pub ga_weight: f64,
    /// Inference cap, in frames per input character.
    pub max_frames_per_char: usize,
    pub stop_threshold: f64,
    pub precision: Precision,
}

impl Default for TransformerTtsConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 2,
            encoder_layers: 3,
            decoder_layers: 3,
            ffn_dim: 256,
            prenet_dim: 64,
            postnet_layers: 5,
            postnet_channels: 64,
            postnet_kernel: 5,
            stop_pos_weight: 5.0,
            ga_sigma: 0.2,
            ga_weight: 1.0,
            max_frames_per_char: 20,
            stop_threshold: 0.5,
            precision: Precision::F32,
        }
    }
}

impl TransformerTtsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("transformer config: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("need at least one encoder and one decoder layer");
        }
        if self.postnet_layers == 0 || self.postnet_kernel.is_multiple_of(2) {
            return bad("post-net needs at least one layer and an odd kernel");
        }
        if !(self.ga_sigma > 0.0) || self.ga_weight < 0.0 {
            return bad("ga_sigma must be positive and ga_weight non-negative");
        }
        if self.max_frames_per_char == 0 {
            return bad("max_frames_per_char must be positive");
        }
        Ok(())
    }
}

/// Teacher-forced outputs in the model's normalised mel space.
#[derive(Debug, Clone)]
pub struct TransformerOutputs {
    pub mel_pre: Tensor,
    pub mel_post: Tensor,
    pub stop_logits: Tensor,
    /// Cross-attention weights per decoder layer, `(heads, T, N)`.
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TransformerTts {
    config: TransformerTtsConfig,
    vocab: CharVocab,
    params: ParamStore,
    pub mel_norm: MelAffine,
    pub frame_format: FrameFormat,
}

impl TransformerTts {
    pub fn new(config: TransformerTtsConfig, vocab: CharVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut p = ParamStore::new(config.precision.dtype());
        let d = config.d_model;
        p.normal("embed", &[vocab.size(), d], 0.3, &mut rng)?;
        p.layer_norm("embed_ln", d)?;
        p.constant("enc_alpha", &[1], 1.0)?;
        p.constant("dec_alpha", &[1], 1.0)?;
        for i in 0..config.encoder_layers {
            p.layer_norm(&format!("enc.{i}.ln1"), d)?;
            layers::register_attention(&mut p, &format!("enc.{i}.attn"), d, &mut rng)?;
            p.layer_norm(&format!("enc.{i}.ln2"), d)?;
            layers::register_ffn(&mut p, &format!("enc.{i}.ffn"), d, config.ffn_dim, &mut rng)?;
        }
        p.layer_norm("enc_ln_out", d)?;
        p.linear("prenet.fc1", N_MELS, config.prenet_dim, &mut rng)?;
        p.linear("prenet.fc2", config.prenet_dim, config.prenet_dim, &mut rng)?;
        p.linear("prenet.proj", config.prenet_dim, d, &mut rng)?;
        for i in 0..config.decoder_layers {
            p.layer_norm(&format!("dec.{i}.ln1"), d)?;
            layers::register_attention(&mut p, &format!("dec.{i}.self_attn"), d, &mut rng)?;
            p.layer_norm(&format!("dec.{i}.ln2"), d)?;
            layers::register_attention(&mut p, &format!("dec.{i}.cross_attn"), d, &mut rng)?;
            p.layer_norm(&format!("dec.{i}.ln3"), d)?;
            layers::register_ffn(&mut p, &format!("dec.{i}.ffn"), d, config.ffn_dim, &mut rng)?;
        }
        p.layer_norm("dec_ln_out", d)?;
        p.linear("mel_out", d, N_MELS, &mut rng)?;
        p.linear("stop_out", d, 1, &mut rng)?;
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

    pub fn config(&self) -> &TransformerTtsConfig {
        &self.config
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn check_text(&self, text: &TextSequence) -> Result<()> {
        if text.is_empty() {
            return Err(Error::invalid("empty text"));
        }
        if text.ids().iter().any(|&id| id as usize >= self.vocab.size()) {
            return Err(Error::invalid("token id outside the model vocabulary"));
        }
        Ok(())
    }

    fn encode(&self, text: &TextSequence) -> Result<Tensor> {
        let p = &self.params;
        let emb = nn::layer_norm(p, "embed_ln", &embed(p, "embed", text.ids())?)?;
        let mut x = add_positions(p, "enc_alpha", &emb)?;
        for i in 0..self.config.encoder_layers {
            let h = nn::layer_norm(p, &format!("enc.{i}.ln1"), &x)?;
            let (a, _) = attention(p, &format!("enc.{i}.attn"), &h, &h, self.config.n_heads, false)?;
            x = (x + a)?;
            let h = nn::layer_norm(p, &format!("enc.{i}.ln2"), &x)?;
            x = (&x + ffn(p, &format!("enc.{i}.ffn"), &h)?)?;
        }
        nn::layer_norm(p, "enc_ln_out", &x)
    }

    /// Runs the decoder on already-shifted input frames `(L, 80)`.
    fn decode(&self, memory: &Tensor, dec_in: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let p = &self.params;
        let h = nn::linear(p, "prenet.fc1", dec_in)?.relu()?;
        let h = nn::linear(p, "prenet.fc2", &h)?.relu()?;
        let mut x = add_positions(p, "dec_alpha", &nn::linear(p, "prenet.proj", &h)?)?;
        let heads = self.config.n_heads;
        let mut attn = Vec::with_capacity(self.config.decoder_layers);
        for i in 0..self.config.decoder_layers {
            let h = nn::layer_norm(p, &format!("dec.{i}.ln1"), &x)?;
            let (a, _) = attention(p, &format!("dec.{i}.self_attn"), &h, &h, heads, true)?;
            x = (x + a)?;
            let h = nn::layer_norm(p, &format!("dec.{i}.ln2"), &x)?;
            let (a, w) = attention(p, &format!("dec.{i}.cross_attn"), &h, memory, heads, false)?;
            attn.push(w);
            x = (x + a)?;
            let h = nn::layer_norm(p, &format!("dec.{i}.ln3"), &x)?;
            x = (&x + ffn(p, &format!("dec.{i}.ffn"), &h)?)?;
        }
        Ok((nn::layer_norm(p, "dec_ln_out", &x)?, attn))
    }

    /// Teacher-forced pass on a normalised target `(L, 80)`. Frames at or
    /// beyond `valid` are treated as padding.
    pub fn forward_normalized(&self, text: &TextSequence, target: &Tensor, valid: usize) -> Result<TransformerOutputs> {
        self.check_text(text)?;
        let (len, bins) = target.dims2()?;
        if bins != N_MELS || len == 0 || valid == 0 || valid > len {
            return Err(Error::Shape(format!("target of {len}x{bins} with {valid} valid frames")));
        }
        let target = target.to_dtype(self.params.dtype())?;
        let go = Tensor::zeros((1, N_MELS), target.dtype(), &DEVICE)?;
        let dec_in = if len > 1 {
            Tensor::cat(&[go, target.narrow(0, 0, len - 1)?], 0)?
        } else {
            go
        };
        let memory = self.encode(text)?;
        let (hidden, attention) = self.decode(&memory, &dec_in)?;
        let mel_pre = nn::linear(&self.params, "mel_out", &hidden)?;
        let stop_logits = nn::linear(&self.params, "stop_out", &hidden)?.squeeze(1)?;
        let mel_post = postnet(&self.params, self.config.postnet_layers, &mel_pre, valid)?;
        Ok(TransformerOutputs {
            mel_pre,
            mel_post,
            stop_logits,
            attention,
        })
    }

    /// Teacher-forced pass on a raw log-mel target.
    pub fn transformer_forward(&self, text: &TextSequence, target: &MelSpectrogram) -> Result<TransformerOutputs> {
        let t = self.mel_norm.normalize(&target.to_tensor(self.params.dtype(), &DEVICE)?)?;
        self.forward_normalized(text, &t, target.n_frames())
    }

    /// `l2_pre + l2_post + stop_bce + ga_weight * guided_attn`, each averaged
    /// over the target's valid frames.
    pub fn conventional_loss(&self, outputs: &TransformerOutputs, target: &TtsTarget) -> Result<ConventionalLoss> {
        let valid = target.valid_frames();
        let len = outputs.mel_pre.dim(0)?;
        if len < valid || target.mel.n_frames() < valid {
            return Err(Error::Shape(format!("outputs of {len} frames for {valid} valid target frames")));
        }
        let t = self
            .mel_norm
            .normalize(&target.mel.to_tensor(self.params.dtype(), &DEVICE)?)?;
        ConventionalLoss::combine(vec![
            ("l2_pre", masked_l2(&outputs.mel_pre, &t, valid)?, 1.0),
            ("l2_post", masked_l2(&outputs.mel_post, &t, valid)?, 1.0),
            (
                "stop_bce",
                stop_bce(&outputs.stop_logits, &target.stop_labels, valid, self.config.stop_pos_weight)?,
                1.0,
            ),
            (
                "guided_attn",
                guided_attention_tensor(&outputs.attention, valid, self.config.ga_sigma)?,
                self.config.ga_weight,
            ),
        ])
    }

    /// Every layer/head alignment, restricted to `valid` frames.
    pub fn alignments(outputs: &TransformerOutputs, valid: usize) -> Result<Vec<AttentionAlignment>> {
        let mut out = Vec::new();
        for layer in &outputs.attention {
            for h in 0..layer.dim(0)? {
                out.push(AttentionAlignment::from_decoder_major(&layer.get(h)?.narrow(0, 0, valid)?)?);
            }
        }
        Ok(out)
    }

    /// Autoregressive inference from a zero "go" frame until the stop
    /// probability exceeds the threshold or the frame cap is reached.
    pub fn synthesize(&self, text: &TextSequence) -> Result<Synthesis> {
        self.check_text(text)?;
        let dtype = self.params.dtype();
        let memory = self.encode(text)?;
        let cap = self.config.max_frames_per_char * text.len();
        let mut dec_in = Tensor::zeros((1, N_MELS), dtype, &DEVICE)?;
        let mut frames: Vec<Tensor> = Vec::new();
        let mut truncated = true;
        while frames.len() < cap {
            let (hidden, _) = self.decode(&memory, &dec_in)?;
            let last = hidden.narrow(0, hidden.dim(0)? - 1, 1)?;
            let frame = nn::linear(&self.params, "mel_out", &last)?;
            let stop = nn::scalar(&nn::linear(&self.params, "stop_out", &last)?.squeeze(1)?.squeeze(0)?)?;
            frames.push(frame.clone());
            dec_in = Tensor::cat(&[dec_in, frame], 0)?;
            let prob = 1.0 / (1.0 + (-stop).exp());
            if prob > self.config.stop_threshold {
                truncated = false;
                break;
            }
        }
        let mel_pre = Tensor::cat(&frames, 0)?;
        let mel_post = postnet(&self.params, self.config.postnet_layers, &mel_pre, mel_pre.dim(0)?)?;
        let raw = self.mel_norm.denormalize(&mel_post)?;
        if nn::to_vec_f64(&raw.max_keepdim(D::Minus1)?)?.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("synthesised mel"));
        }
        Ok(Synthesis {
            mel: MelSpectrogram::from_tensor(&raw, self.frame_format.sample_rate, self.frame_format.hop_length)?,
            truncated,
            durations: None,
        })
    }

    pub(crate) fn from_parts(
        config: TransformerTtsConfig,
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
