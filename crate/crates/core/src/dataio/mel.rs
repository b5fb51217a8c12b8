use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of mel bins shared by every model in the crate.
pub const N_MELS: usize = 80;

const CACHE_HEADER_LEN: usize = 16;

/// Analysis parameters for log-mel extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Amplitude floor applied before the natural log.
    pub log_floor: f64,
    /// Zero-pad `n_fft / 2` samples on both sides before framing.
    pub center: bool,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22_050,
            n_fft: 1024,
            hop_length: 256,
            win_length: 1024,
            f_min: 80.0,
            f_max: 7600.0,
            log_floor: 1e-10,
            center: false,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.n_fft == 0 || self.hop_length == 0 {
            return Err(Error::invalid("mel config: zero sample rate, n_fft or hop"));
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::invalid("mel config: win_length must be in 1..=n_fft"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::invalid(format!(
                "mel config: need 0 <= f_min < f_max <= {nyquist}"
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::invalid("mel config: log_floor must be positive"));
        }
        Ok(())
    }

    /// Value of a cell whose filter energy is at or below the floor.
    pub fn log_floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    /// Frame count produced for a waveform of `len` samples, if any.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        let len = if self.center { len + 2 * (self.n_fft / 2) } else { len };
        (len >= self.win_length).then(|| 1 + (len - self.win_length) / self.hop_length)
    }
}

/// Slaney-style mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// The `N_MELS + 2` band edges, evenly spaced on the mel scale.
fn band_edges(config: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.f_min);
    let hi = hz_to_mel(config.f_max);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Peak frequency (Hz) of each triangular mel filter.
pub fn mel_filter_centers(config: &MelConfig) -> Vec<f64> {
    band_edges(config)[1..=N_MELS].to_vec()
}

/// Area-normalised triangular filterbank, `N_MELS` rows of `n_fft/2 + 1`.
fn filterbank(config: &MelConfig) -> Vec<Vec<f64>> {
    let n_bins = config.n_fft / 2 + 1;
    let edges = band_edges(config);
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * config.sample_rate as f64 / config.n_fft as f64)
        .collect();
    (0..N_MELS)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let enorm = 2.0 / (hi - lo);
            bin_hz
                .iter()
                .map(|&f| {
                    let rising = (f - lo) / (mid - lo);
                    let falling = (hi - f) / (hi - mid);
                    rising.min(falling).max(0.0) * enorm
                })
                .collect()
        })
        .collect()
}

/// Reusable extractor holding the window, filterbank and FFT plan.
pub struct MelExtractor {
    config: MelConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("config", &self.config).finish()
    }
}

impl MelExtractor {
    pub fn new(config: &MelConfig) -> Result<Self> {
        config.validate()?;
        // periodic Hann
        let window = (0..config.win_length)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / config.win_length as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(Self {
            config: config.clone(),
            window,
            filters: filterbank(config),
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn extract(&self, waveform: &[f32], sample_rate: u32) -> Result<MelSpectrogram> {
        let cfg = &self.config;
        if sample_rate != cfg.sample_rate {
            return Err(Error::invalid(format!(
                "sample rate {sample_rate} Hz does not match configured {} Hz",
                cfg.sample_rate
            )));
        }
        if waveform.is_empty() {
            return Err(Error::invalid("empty waveform"));
        }
        let pad = if cfg.center { cfg.n_fft / 2 } else { 0 };
        let n_frames = cfg.n_frames(waveform.len()).ok_or_else(|| {
            Error::invalid(format!(
                "waveform of {} samples is shorter than one {}-sample analysis window",
                waveform.len(),
                cfg.win_length
            ))
        })?;
        let sample = |i: usize| -> f64 {
            i.checked_sub(pad)
                .and_then(|j| waveform.get(j))
                .map_or(0.0, |&s| s as f64)
        };

        let n_bins = cfg.n_fft / 2 + 1;
        let floor = cfg.log_floor;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut magnitude = vec![0.0f64; n_bins];
        let mut frames = Vec::with_capacity(n_frames * N_MELS);
        for t in 0..n_frames {
            let start = t * cfg.hop_length;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < cfg.win_length {
                    sample(start + i) * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (m, c) in magnitude.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for filter in &self.filters {
                let energy: f64 = filter.iter().zip(&magnitude).map(|(w, m)| w * m).sum();
                frames.push(energy.max(floor).ln() as f32);
            }
        }
        MelSpectrogram::new(frames, cfg.sample_rate as f32, cfg.hop_length as u32)
    }
}

/// Log-mel extraction with a one-off extractor.
pub fn extract_mel(waveform: &[f32], sample_rate: u32, config: &MelConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(config)?.extract(waveform, sample_rate)
}

/// A `T x 80` log-mel matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Vec<f32>,
    sample_rate: f32,
    hop_length: u32,
}

impl MelSpectrogram {
    pub fn new(frames: Vec<f32>, sample_rate: f32, hop_length: u32) -> Result<Self> {
        if frames.is_empty() || !frames.len().is_multiple_of(N_MELS) {
            return Err(Error::Shape(format!(
                "mel data of length {} is not a positive multiple of {N_MELS}",
                frames.len()
            )));
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "mel frame {} bin {}",
                i / N_MELS,
                i % N_MELS
            )));
        }
        Ok(Self {
            frames,
            sample_rate,
            hop_length,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / N_MELS
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn get(&self, t: usize, bin: usize) -> f32 {
        self.frames[t * N_MELS + bin]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.frames
    }

    pub fn sample_rate(&self) -> f32 {
        self.sample_rate
    }

    pub fn hop_length(&self) -> u32 {
        self.hop_length
    }

    /// Per-bin average over frames.
    pub fn mean_frame(&self) -> Vec<f32> {
        let t = self.n_frames() as f64;
        (0..N_MELS)
            .map(|b| ((0..self.n_frames()).map(|i| self.get(i, b) as f64).sum::<f64>() / t) as f32)
            .collect()
    }

    /// `(T, 80)` tensor in the requested dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.frames, (self.n_frames(), N_MELS), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor, sample_rate: f32, hop_length: u32) -> Result<Self> {
        let (_, bins) = t.dims2()?;
        if bins != N_MELS {
            return Err(Error::Shape(format!("expected {N_MELS} mel bins, got {bins}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(data, sample_rate, hop_length)
    }

    /// Little-endian cache encoding: `u32 T, u32 80, f32 sample_rate, u32 hop`
    /// followed by `T x 80` f32 values.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CACHE_HEADER_LEN + 4 * self.frames.len());
        out.extend_from_slice(&(self.n_frames() as u32).to_le_bytes());
        out.extend_from_slice(&(N_MELS as u32).to_le_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&self.hop_length.to_le_bytes());
        for v in &self.frames {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CACHE_HEADER_LEN {
            return Err(Error::invalid("mel cache shorter than its header"));
        }
        let word = |i: usize| -> [u8; 4] { bytes[4 * i..4 * i + 4].try_into().unwrap() };
        let n_frames = u32::from_le_bytes(word(0)) as usize;
        let n_mels = u32::from_le_bytes(word(1)) as usize;
        let sample_rate = f32::from_le_bytes(word(2));
        let hop = u32::from_le_bytes(word(3));
        if n_mels != N_MELS {
            return Err(Error::Shape(format!("mel cache declares {n_mels} bins")));
        }
        let expected = CACHE_HEADER_LEN + 4 * n_frames * N_MELS;
        if bytes.len() != expected {
            return Err(Error::invalid(format!(
                "mel cache is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let frames = bytes[CACHE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(frames, sample_rate, hop)
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cache_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_cache_bytes(&bytes).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Scalar affine map between raw log-mels and a model's working space:
/// `normalized = (raw - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelAffine {
    pub shift: f64,
    pub scale: f64,
}

impl Default for MelAffine {
    fn default() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }
}

impl MelAffine {
    /// Global mean and standard deviation over all cells of `mels`.
    pub fn fit<'a>(mels: impl IntoIterator<Item = &'a MelSpectrogram>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for mel in mels {
            for &v in mel.as_slice() {
                n += 1;
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let scale = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        Self { shift: mean, scale }
    }

    pub fn normalize(&self, raw: &Tensor) -> Result<Tensor> {
        Ok(raw.affine(1.0 / self.scale, -self.shift / self.scale)?)
    }

    pub fn denormalize(&self, normalized: &Tensor) -> Result<Tensor> {
        Ok(normalized.affine(self.scale, self.shift)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_hits_the_floor_everywhere() {
        let cfg = MelConfig::default();
        let mel = extract_mel(&vec![0.0; 22_050], 22_050, &cfg).unwrap();
        assert_eq!(mel.n_frames(), 1 + (22_050 - 1024) / 256);
        assert!(mel.as_slice().iter().all(|&v| v == cfg.log_floor_value()));
    }

    #[test]
    fn one_window_gives_one_frame() {
        let cfg = MelConfig::default();
        let wave: Vec<f32> = (0..cfg.win_length).map(|i| (i as f32 * 0.01).sin()).collect();
        assert_eq!(extract_mel(&wave, 22_050, &cfg).unwrap().n_frames(), 1);
    }

    #[test]
    fn short_waveform_is_rejected() {
        let cfg = MelConfig::default();
        let err = extract_mel(&vec![0.1; 1000], 22_050, &cfg).unwrap_err();
        assert!(err.to_string().contains("shorter than one"));
        assert!(extract_mel(&[], 22_050, &cfg).is_err());
    }

    #[test]
    fn centered_padding_changes_frame_count() {
        let cfg = MelConfig {
            center: true,
            ..MelConfig::default()
        };
        let mel = extract_mel(&vec![0.0; 1000], 22_050, &cfg).unwrap();
        assert_eq!(mel.n_frames(), 1 + 1000 / 256);
    }

    #[test]
    fn sample_rate_mismatch_is_rejected() {
        assert!(extract_mel(&vec![0.0; 4096], 16_000, &MelConfig::default()).is_err());
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 80.0, 999.0, 1000.0, 4321.0, 7600.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn cache_rejects_truncated_payload() {
        let mel = MelSpectrogram::new(vec![1.0; 2 * N_MELS], 22_050.0, 256).unwrap();
        let bytes = mel.to_cache_bytes();
        assert_eq!(MelSpectrogram::from_cache_bytes(&bytes).unwrap(), mel);
        assert!(MelSpectrogram::from_cache_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn constructor_enforces_invariants() {
        assert!(MelSpectrogram::new(vec![], 1.0, 1).is_err());
        assert!(MelSpectrogram::new(vec![0.0; 79], 1.0, 1).is_err());
        let mut bad = vec![0.0; N_MELS];
        bad[3] = f32::NAN;
        assert!(MelSpectrogram::new(bad, 1.0, 1).is_err());
    }
}
