#![allow(dead_code)]
//! Shared helpers for the integration tests: independent oracles, tiny
//! model configurations and a finite-difference gradient checker.

use candle_core::Tensor;
use percept_tts::dataio::{MelSpectrogram, N_MELS};
use percept_tts::mosnet::MosPredictorConfig;
use percept_tts::nn::{ParamStore, Precision, DEVICE};
use percept_tts::ttscore::{FastSpeechConfig, TransformerTtsConfig};
use rand::rngs::StdRng;
use rand::Rng;

// ---- oracles ----

/// Levenshtein distance from the full `(n+1) x (m+1)` table.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[n][m]
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn pearson_def(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Mid-ranks by counting, O(n^2).
pub fn midranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_def(x: &[f64], y: &[f64]) -> f64 {
    pearson_def(&midranks(x), &midranks(y))
}

pub fn mse_def(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

/// `P(|T| <= t)` for Student's t with integer `df`, from the finite
/// trigonometric series in theta = atan(t / sqrt(df)).
pub fn t_central_mass(t: f64, df: u32) -> f64 {
    assert!(df >= 1);
    let theta = (t.abs() / (df as f64).sqrt()).atan();
    let (s, c) = theta.sin_cos();
    if df % 2 == 1 {
        let mut sum = 0.0;
        if df > 1 {
            let mut term = c;
            sum = term;
            let mut k = 1;
            while 2 * k + 1 < df {
                term *= c * c * (2 * k) as f64 / (2 * k + 1) as f64;
                sum += term;
                k += 1;
            }
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1;
        while 2 * k < df {
            term *= c * c * (2 * k - 1) as f64 / (2 * k) as f64;
            sum += term;
            k += 1;
        }
        s * sum
    }
}

pub fn t_two_sided_p_oracle(t: f64, df: u32) -> f64 {
    1.0 - t_central_mass(t, df)
}

/// Upper `1 - alpha/2` quantile by bisection on the central mass.
pub fn t_quantile_oracle(alpha: f64, df: u32) -> f64 {
    let target = 1.0 - alpha;
    let mut hi = 1.0;
    while t_central_mass(hi, df) < target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_central_mass(mid, df) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn sample_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

/// Brute-force argmax counts: frame t goes to the first character with the
/// largest weight.
pub fn argmax_counts(weights: &[f64], n_chars: usize, n_frames: usize) -> Vec<usize> {
    let mut counts = vec![0; n_chars];
    for t in 0..n_frames {
        let mut best = 0;
        for n in 1..n_chars {
            if weights[n * n_frames + t] > weights[best * n_frames + t] {
                best = n;
            }
        }
        counts[best] += 1;
    }
    counts
}

// ---- tiny models ----

pub fn tiny_transformer() -> TransformerTtsConfig {
    TransformerTtsConfig {
        d_model: 8,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 8,
        prenet_dim: 8,
        postnet_layers: 2,
        postnet_channels: 8,
        postnet_kernel: 3,
        max_frames_per_char: 4,
        precision: Precision::F64,
        ..Default::default()
    }
}

pub fn tiny_fastspeech() -> FastSpeechConfig {
    FastSpeechConfig {
        d_model: 8,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 8,
        ffn_kernel: 3,
        duration_channels: 8,
        duration_kernel: 3,
        max_duration: 6,
        postnet_layers: 2,
        postnet_channels: 8,
        postnet_kernel: 3,
        precision: Precision::F64,
        ..Default::default()
    }
}

pub fn tiny_predictor() -> MosPredictorConfig {
    MosPredictorConfig {
        n_conv_layers: 4,
        conv_channels: vec![4, 8],
        block_freq_strides: vec![1, 3],
        blstm_units: 4,
        fc_sizes: [8, 1],
        dropout: 0.0,
        precision: Precision::F64,
        ..Default::default()
    }
}

pub fn random_mel(frames: usize, rng: &mut StdRng) -> MelSpectrogram {
    let data = (0..frames * N_MELS).map(|_| rng.random_range(-6.0f32..0.0)).collect();
    MelSpectrogram::new(data, 22_050.0, 256).unwrap()
}

// ---- gradient checking ----

#[derive(Debug, Clone)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn magnitude(&self) -> f64 {
        self.analytic.abs().max(self.numeric.abs())
    }

    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.magnitude()
    }
}

pub const FD_STEP: f64 = 1e-5;
/// Below this both derivatives count as zero and are compared absolutely.
pub const GRAD_ZERO: f64 = 1e-8;
/// Smallest magnitude a draw needs to count towards the required number.
pub const GRAD_SIGNIFICANT: f64 = 1e-6;

fn flat(store: &ParamStore, name: &str) -> (Vec<f64>, Vec<usize>) {
    let t = store.get(name).unwrap();
    let shape = t.dims().to_vec();
    (t.flatten_all().unwrap().to_vec1::<f64>().unwrap(), shape)
}

fn put(store: &ParamStore, name: &str, values: Vec<f64>, shape: &[usize]) {
    store.set(name, &Tensor::from_vec(values, shape, &DEVICE).unwrap()).unwrap();
}

/// Compares backprop against central differences at random parameter
/// entries until `wanted` draws with a non-negligible derivative are
/// collected. Zero-derivative draws encountered on the way are returned too.
pub fn grad_check(
    store: &ParamStore,
    wanted: usize,
    rng: &mut StdRng,
    loss: impl Fn() -> Tensor,
) -> Vec<GradSample> {
    let l = loss();
    let grads = l.backward().unwrap();
    let entries: Vec<(String, usize)> = store
        .iter()
        .map(|(name, var)| (name.to_string(), var.as_tensor().elem_count()))
        .collect();
    let total: usize = entries.iter().map(|e| e.1).sum();
    let mut out = Vec::new();
    let mut significant = 0;
    let mut attempts = 0;
    while significant < wanted && attempts < 50 * wanted {
        attempts += 1;
        let mut k = rng.random_range(0..total);
        let (name, len) = entries.iter().find(|(_, len)| {
            if k < *len {
                true
            } else {
                k -= len;
                false
            }
        })
        .unwrap();
        let index = k;
        debug_assert!(index < *len);
        let var = store.var(name).unwrap();
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[index])
            .unwrap_or(0.0);
        let (values, shape) = flat(store, name);
        let mut plus = values.clone();
        plus[index] += FD_STEP;
        put(store, name, plus, &shape);
        let lp = loss().to_scalar::<f64>().unwrap();
        let mut minus = values.clone();
        minus[index] -= FD_STEP;
        put(store, name, minus, &shape);
        let lm = loss().to_scalar::<f64>().unwrap();
        put(store, name, values, &shape);
        let sample = GradSample {
            param: name.clone(),
            index,
            analytic,
            numeric: (lp - lm) / (2.0 * FD_STEP),
        };
        if sample.magnitude() >= GRAD_SIGNIFICANT {
            significant += 1;
        }
        out.push(sample);
    }
    out
}

/// Checks the samples from [`grad_check`]: at least `wanted` significant
/// draws, each within `tol` relative error, and zero draws agreeing to
/// `GRAD_ZERO`. Returns the worst relative error seen.
pub fn grad_verdict(samples: &[GradSample], wanted: usize, tol: f64) -> Result<f64, String> {
    let significant: Vec<&GradSample> = samples.iter().filter(|s| s.magnitude() >= GRAD_SIGNIFICANT).collect();
    if significant.len() < wanted {
        return Err(format!("only {} significant draws of {wanted}", significant.len()));
    }
    let mut worst: f64 = 0.0;
    for s in samples {
        if s.magnitude() < GRAD_ZERO {
            continue;
        }
        if s.magnitude() < GRAD_SIGNIFICANT {
            if (s.analytic - s.numeric).abs() > GRAD_ZERO {
                return Err(format!("{s:?} disagrees near zero"));
            }
            continue;
        }
        let r = s.relative_error();
        worst = worst.max(r);
        if r >= tol {
            return Err(format!("{s:?} relative error {r:.3e}"));
        }
    }
    Ok(worst)
}
