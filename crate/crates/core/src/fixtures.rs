//! Synthetic data: a small tone-based speech corpus with ratings and phone
//! transcripts, and a token-to-mel task with known durations. Both are
//! fully determined by a seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::dataio::{self, AudioManifest, ManifestEntry, MelSpectrogram, RatingRecord, RatingTest, N_MELS};
use crate::error::{Error, Result};
use crate::evalkit::SentenceClass;
use crate::ttscore::{CharVocab, TextSequence, TtsExample, TtsTarget};

pub const FIXTURE_SAMPLE_RATE: u32 = 22_050;
/// Letters used by fixture texts.
pub const FIXTURE_ALPHABET: &str = "abcdefgh";

fn char_frequency(c: char) -> Option<f64> {
    FIXTURE_ALPHABET.find(c).map(|i| 220.0 * 1.25f64.powi(i as i32))
}

/// Renders text as a sequence of tones, one per character, with
/// `samples_per_char` samples each plus `lead` samples of silence on both
/// sides. Characters outside the alphabet are silent.
pub fn render_text(text: &str, samples_per_char: usize, lead: usize) -> Vec<f32> {
    let sr = FIXTURE_SAMPLE_RATE as f64;
    let mut wave = vec![0.0f32; lead];
    let mut phase = 0.0f64;
    for c in text.chars() {
        let f = char_frequency(c);
        for i in 0..samples_per_char {
            let fade = (i.min(samples_per_char - 1 - i) as f64 / 64.0).min(1.0);
            let v = match f {
                Some(f) => {
                    phase += 2.0 * std::f64::consts::PI * f / sr;
                    0.5 * fade * (phase.sin() + 0.3 * (2.0 * phase).sin())
                }
                None => 0.0,
            };
            wave.push(v as f32);
        }
    }
    wave.extend(std::iter::repeat_n(0.0, lead));
    wave
}

/// Adds white noise and hard clipping; `level = 0` returns the input.
pub fn degrade(wave: &[f32], level: f64, rng: &mut StdRng) -> Vec<f32> {
    if level == 0.0 {
        return wave.to_vec();
    }
    let noise = Normal::new(0.0, level).expect("finite noise level");
    let clip = (0.6 - level).max(0.15) as f32;
    wave.iter()
        .map(|&x| (x + noise.sample(rng) as f32).clamp(-clip, clip))
        .collect()
}

/// Blends every frame towards the utterance's mean spectrum and adds uniform
/// noise, both in proportion to `amount` in `[0, 1]`.
pub fn smear_mel(mel: &MelSpectrogram, amount: f64, rng: &mut StdRng) -> Result<MelSpectrogram> {
    if !(0.0..=1.0).contains(&amount) {
        return Err(Error::invalid(format!("smear amount {amount} outside [0, 1]")));
    }
    let mean = mel.mean_frame();
    let a = amount as f32;
    let mut data = mel.as_slice().to_vec();
    for (i, v) in data.iter_mut().enumerate() {
        let jitter = if amount > 0.0 { rng.random_range(-amount..amount) as f32 } else { 0.0 };
        *v = (1.0 - a) * *v + a * mean[i % N_MELS] + jitter;
    }
    MelSpectrogram::new(data, mel.sample_rate(), mel.hop_length())
}

fn fixture_text(rng: &mut StdRng, min_len: usize, max_len: usize) -> String {
    let letters: Vec<char> = FIXTURE_ALPHABET.chars().collect();
    let len = rng.random_range(min_len..=max_len);
    (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect()
}

fn phones_of(text: &str) -> Vec<String> {
    text.chars().filter(|c| !c.is_whitespace()).map(|c| c.to_string()).collect()
}

/// Paths of a generated corpus, relative to its root.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureCorpus {
    pub root: PathBuf,
    pub tts_manifest: PathBuf,
    pub mos_manifest: PathBuf,
    pub mos_ratings: PathBuf,
    pub eval_ratings: PathBuf,
    pub per_reference: PathBuf,
    pub per_hypotheses: Vec<(String, PathBuf)>,
    pub classes: PathBuf,
}

impl FixtureCorpus {
    /// Resolves the file layout written by [`write_fixture_corpus`].
    pub fn at(root: &Path) -> Self {
        let j = |p: &str| root.join(p);
        Self {
            root: root.to_path_buf(),
            tts_manifest: j("tts_manifest.tsv"),
            mos_manifest: j("mos_manifest.tsv"),
            mos_ratings: j("mos_ratings.csv"),
            eval_ratings: j("eval_ratings.csv"),
            per_reference: j("per_reference.tsv"),
            per_hypotheses: FIXTURE_SYSTEMS
                .iter()
                .map(|s| (s.to_string(), j(&format!("per_hyp_{s}.tsv"))))
                .collect(),
            classes: j("classes.tsv"),
        }
    }
}

/// System names used in the evaluation fixtures.
pub const FIXTURE_SYSTEMS: [&str; 2] = ["baseline", "perceptual"];
const NOISE_LEVELS: [f64; 4] = [0.0, 0.03, 0.08, 0.2];
const SAMPLES_PER_CHAR: usize = 768;
const LEAD: usize = 512;

/// Writes a corpus of `n_utts` TTS utterances, one MOS-corpus item per
/// utterance and noise level with three raters each, evaluation ratings for
/// two systems, and phone transcripts for PER.
pub fn write_fixture_corpus(root: &Path, n_utts: usize, seed: u64) -> Result<FixtureCorpus> {
    if n_utts < 2 {
        return Err(Error::invalid("fixture corpus needs at least two utterances"));
    }
    let corpus = FixtureCorpus::at(root);
    let wav_dir = root.join("wavs");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut rng = StdRng::seed_from_u64(seed);

    let mut tts = AudioManifest::default();
    let mut mos = AudioManifest::default();
    let mut mos_ratings = Vec::new();
    let mut texts = Vec::new();
    for u in 0..n_utts {
        let text = fixture_text(&mut rng, 3, 6);
        let clean = render_text(&text, SAMPLES_PER_CHAR, LEAD);
        let utt_id = format!("tts{u:03}");
        let rel = PathBuf::from(format!("wavs/{utt_id}.wav"));
        dataio::write_wav(&root.join(&rel), &clean, FIXTURE_SAMPLE_RATE)?;
        tts.entries.push(ManifestEntry {
            utt_id: utt_id.clone(),
            audio_path: rel,
            text: text.clone(),
            phones: Some(phones_of(&text)),
        });

        for (k, &level) in NOISE_LEVELS.iter().enumerate() {
            let id = format!("mos{u:03}_n{k}");
            let rel = PathBuf::from(format!("wavs/{id}.wav"));
            let wave = degrade(&clean, level, &mut rng);
            dataio::write_wav(&root.join(&rel), &wave, FIXTURE_SAMPLE_RATE)?;
            mos.entries.push(ManifestEntry {
                utt_id: id.clone(),
                audio_path: rel,
                text: text.clone(),
                phones: None,
            });
            let quality = 4.5 - 15.0 * level;
            for r in 0..3 {
                let jitter = rng.random_range(-1i32..=1) as f64 * 0.5;
                let score = ((quality + jitter) * 2.0).round() / 2.0;
                mos_ratings.push(RatingRecord {
                    system_id: "mos_corpus".into(),
                    utt_id: id.clone(),
                    rater_id: format!("r{r}"),
                    test: RatingTest::Naturalness,
                    score: score.clamp(1.0, 5.0),
                });
            }
        }
        texts.push((utt_id, text));
    }
    let write = |path: &Path, text: String| fs::write(path, text).map_err(|e| Error::io(path, e));
    write(&corpus.tts_manifest, tts.to_text())?;
    write(&corpus.mos_manifest, mos.to_text())?;
    dataio::write_ratings(&corpus.mos_ratings, &mos_ratings)?;

    let mut eval = Vec::new();
    let mut reference = String::new();
    let mut classes = String::new();
    let mut hyps = vec![String::new(); FIXTURE_SYSTEMS.len()];
    for (i, (utt_id, text)) in texts.iter().enumerate() {
        let phones = phones_of(text);
        reference.push_str(&format!("{utt_id}\t{}\n", phones.join(" ")));
        let class = if phones.len() >= 5 { SentenceClass::Long } else { SentenceClass::Short };
        classes.push_str(&format!("{utt_id}\t{}\n", if class == SentenceClass::Long { "long" } else { "short" }));
        for (s, system) in FIXTURE_SYSTEMS.iter().enumerate() {
            let mut hyp = phones.clone();
            // The first system drops a phone from every third utterance.
            if s == 0 && i % 3 == 0 {
                hyp.pop();
            }
            hyps[s].push_str(&format!("{utt_id}\t{}\n", hyp.join(" ")));
            let base = if s == 0 { 3.0 } else { 3.5 };
            for r in 0..3 {
                let score = (base + rng.random_range(-2i32..=2) as f64 * 0.5).clamp(1.0, 5.0);
                let intel = (base + rng.random_range(-1i32..=2) as f64).round().clamp(1.0, 5.0);
                for (test, score) in [(RatingTest::Naturalness, score), (RatingTest::Intelligibility, intel)] {
                    eval.push(RatingRecord {
                        system_id: system.to_string(),
                        utt_id: utt_id.clone(),
                        rater_id: format!("r{r}"),
                        test,
                        score,
                    });
                }
            }
        }
    }
    dataio::write_ratings(&corpus.eval_ratings, &eval)?;
    write(&corpus.per_reference, reference)?;
    write(&corpus.classes, classes)?;
    for ((_, path), text) in corpus.per_hypotheses.iter().zip(hyps) {
        write(path, text)?;
    }
    Ok(corpus)
}

/// A token-to-mel task: every token owns a fixed random mel pattern, each
/// token lasts `frames_per_token` frames and frames get Gaussian noise.
#[derive(Debug, Clone)]
pub struct TokenTask {
    pub vocab: CharVocab,
    patterns: Vec<Vec<f32>>,
    pub frames_per_token: usize,
    pub noise: f64,
}

impl TokenTask {
    pub fn new(alphabet: &str, frames_per_token: usize, noise: f64, seed: u64) -> Result<Self> {
        if frames_per_token == 0 || alphabet.is_empty() {
            return Err(Error::invalid("token task needs tokens and frames per token"));
        }
        let vocab = CharVocab::from_chars(alphabet);
        let mut rng = StdRng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        // Smooth random spectra around a log-energy of -4.
        let patterns = (0..vocab.size())
            .map(|_| {
                let mut v: Vec<f32> = (0..N_MELS).map(|_| normal.sample(&mut rng) as f32).collect();
                for _ in 0..3 {
                    let prev = v.clone();
                    for b in 0..N_MELS {
                        let lo = prev[b.saturating_sub(1)];
                        let hi = prev[(b + 1).min(N_MELS - 1)];
                        v[b] = (lo + 2.0 * prev[b] + hi) / 4.0;
                    }
                }
                v.into_iter().map(|x| -4.0 + 3.0 * x).collect()
            })
            .collect();
        Ok(Self {
            vocab,
            patterns,
            frames_per_token,
            noise,
        })
    }

    /// Noise-free mel for `text`.
    pub fn clean_mel(&self, text: &TextSequence) -> Result<MelSpectrogram> {
        self.mel(text, None)
    }

    fn mel(&self, text: &TextSequence, rng: Option<&mut StdRng>) -> Result<MelSpectrogram> {
        let mut frames = Vec::with_capacity(text.len() * self.frames_per_token * N_MELS);
        for &id in text.ids() {
            for _ in 0..self.frames_per_token {
                frames.extend_from_slice(&self.patterns[id as usize]);
            }
        }
        if let Some(rng) = rng {
            let normal = Normal::new(0.0, self.noise).map_err(|e| Error::invalid(e.to_string()))?;
            for v in &mut frames {
                *v += normal.sample(rng) as f32;
            }
        }
        MelSpectrogram::new(frames, FIXTURE_SAMPLE_RATE as f32, 256)
    }

    /// `n` examples with random texts of `min_len..=max_len` tokens.
    pub fn examples(&self, n: usize, min_len: usize, max_len: usize, rng: &mut StdRng) -> Result<Vec<TtsExample>> {
        let chars: Vec<char> = self.vocab.chars().chars().collect();
        (0..n)
            .map(|i| {
                let len = rng.random_range(min_len..=max_len);
                let text: String = (0..len).map(|_| chars[rng.random_range(0..chars.len())]).collect();
                let seq = self.vocab.encode(&text)?;
                let mel = if self.noise > 0.0 { self.mel(&seq, Some(rng))? } else { self.mel(&seq, None)? };
                let durations = vec![self.frames_per_token; seq.len()];
                Ok(TtsExample {
                    utt_id: format!("tok{i:04}"),
                    text: seq,
                    target: TtsTarget::new(mel, Some(durations))?,
                })
            })
            .collect()
    }
}
