//! Command-line driver: `prepare`, `train-mos`, `train-tts`, `distill`,
//! `synth`, `eval` and `plot` over one TOML run configuration.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 non-finite loss.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    augment_from_mels, load_manifest, load_ratings, mos_labels, read_wav, AudioManifest, AugmentOptions, MelConfig,
    MelExtractor, MelSpectrogram, Origin, RatedUtterance, RatingRecord,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    self, intelligibility_histograms, join_per_pairs, mos_aggregate, parse_class_file, parse_phone_file,
    per_breakdown, MetricReport,
};
use crate::mosnet::{eval_mos_predictor, train_mos, MosPredictor, MosPredictorConfig, MosTrainConfig};
use crate::perceptual::{
    Guidance, PerceptualGuide, PerceptualTrainingConfig, TtsTrainConfig,
};
use crate::ttscore::{
    distill_targets, read_distilled, write_distilled, AnyTtsModel, CharVocab, FastSpeech, FastSpeechConfig,
    ModelFamily, TransformerTts, TransformerTtsConfig, TtsExample, TtsModel, TtsTarget,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable naming the default output root.
pub const HOME_VAR: &str = "PERCEPT_TTS_HOME";

#[derive(Debug, Parser)]
#[command(name = "percept-tts", version, about = "Perceptually guided TTS training and evaluation")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set schedule.lambda0=60`.
    /// Applied in order; the last assignment wins.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output root; defaults to `out_dir`, then $PERCEPT_TTS_HOME, then
    /// `./percept-tts-out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Leave timestamps out of log lines.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate manifests and cache log-mel spectrograms.
    Prepare,
    /// Train the MOS predictor.
    TrainMos {
        /// Train on the MOS corpus only.
        #[arg(long)]
        no_augment: bool,
    },
    /// Train a TTS model.
    TrainTts {
        #[arg(long, value_enum, default_value = "off")]
        perceptual: Switch,
        /// Transformer checkpoint to distill FastSpeech targets from.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Write teacher mel targets and durations for FastSpeech.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Synthesize mels for the TTS manifest or for `--text` strings.
    Synth {
        /// TTS checkpoint directory; defaults to the best epoch of the
        /// configured family.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        text: Vec<String>,
    },
    /// Write the metric report.
    Eval {
        /// Ratings CSV files (naturalness and/or intelligibility).
        #[arg(long)]
        ratings: Vec<PathBuf>,
        /// Reference phones, `utt_id<TAB>phones`.
        #[arg(long)]
        per_ref: Option<PathBuf>,
        /// Hypothesis phones per system, `SYSTEM=path`.
        #[arg(long, value_name = "SYSTEM=PATH")]
        per_hyp: Vec<String>,
        /// Long/short classes, `utt_id<TAB>long|short`.
        #[arg(long)]
        classes: Option<PathBuf>,
        /// Directories of synthesized mels to score with the predictor,
        /// `SYSTEM=dir`.
        #[arg(long, value_name = "SYSTEM=DIR")]
        synth: Vec<String>,
        /// Predictor checkpoint for `--synth`; defaults to the trained one.
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Also write the intelligibility chart here.
        #[arg(long)]
        chart: Option<PathBuf>,
        /// Report path; defaults to `<out>/eval/report.toml`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Draw the intelligibility stacked bar chart.
    Plot {
        #[arg(long, required = true)]
        ratings: Vec<PathBuf>,
        /// Chart path; defaults to `<out>/eval/intelligibility.svg`.
        #[arg(long)]
        chart: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub tts_manifest: Option<PathBuf>,
    pub mos_manifest: Option<PathBuf>,
    pub mos_ratings: Option<PathBuf>,
    /// Fraction of the MOS corpus held out for validation and metrics.
    pub mos_validation_fraction: f64,
    /// Fraction of the TTS corpus held out for validation.
    pub tts_validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tts_manifest: None,
            mos_manifest: None,
            mos_ratings: None,
            mos_validation_fraction: 0.2,
            tts_validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub family: ModelFamily,
    pub data: DataConfig,
    pub mel: MelConfig,
    pub mosnet: MosPredictorConfig,
    pub mos_train: MosTrainConfig,
    pub augment: AugmentOptions,
    pub transformer: TransformerTtsConfig,
    pub fastspeech: FastSpeechConfig,
    pub tts_train: TtsTrainConfig,
    pub perceptual: PerceptualTrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            family: ModelFamily::Transformer,
            data: DataConfig::default(),
            mel: MelConfig::default(),
            mosnet: MosPredictorConfig::default(),
            mos_train: MosTrainConfig::default(),
            augment: AugmentOptions::default(),
            transformer: TransformerTtsConfig::default(),
            fastspeech: FastSpeechConfig::default(),
            tts_train: TtsTrainConfig::default(),
            perceptual: PerceptualTrainingConfig::default(),
        }
    }
}

/// Parses `text` as TOML, applies `key=value` overrides in order and
/// resolves relative paths against `base`.
pub fn load_run_config(text: &str, origin: &Path, overrides: &[String], base: &Path) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        message: e.message().to_owned(),
    })?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut config: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::invalid(format!("{}: {}", origin.display(), e.message())))?;
    let resolve = |p: &mut Option<PathBuf>| {
        if let Some(path) = p {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    };
    resolve(&mut config.data.tts_manifest);
    resolve(&mut config.data.mos_manifest);
    resolve(&mut config.data.mos_ratings);
    resolve(&mut config.perceptual.predictor_checkpoint);
    resolve(&mut config.out_dir);
    Ok(config)
}

/// `a.b.c=value`: the value is read as a TOML literal, or as a bare string
/// when it does not parse as one.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override {assignment:?} is not KEY=VALUE")))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::invalid(format!("override key {key:?} passes through a non-table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

/// Append-only log mirrored to stdout.
struct RunLog {
    file: Option<File>,
    timestamps: bool,
}

impl RunLog {
    fn stdout_only(timestamps: bool) -> Self {
        Self { file: None, timestamps }
    }

    fn open(path: &Path, timestamps: bool) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some(file),
            timestamps,
        })
    }

    fn line(&mut self, text: &str) {
        let line = if self.timestamps {
            let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
            format!("[{}.{:03}] {text}", t.as_secs(), t.subsec_millis())
        } else {
            text.to_owned()
        };
        println!("{line}");
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{line}");
        }
    }
}

struct Run {
    config: RunConfig,
    out: PathBuf,
    timestamps: bool,
    rng: StdRng,
}

impl Run {
    fn log(&self, path: &Path) -> Result<RunLog> {
        RunLog::open(path, self.timestamps)
    }

    fn mel_dir(&self, corpus: &str) -> PathBuf {
        self.out.join("mels").join(corpus)
    }

    fn family_name(&self) -> &'static str {
        match self.config.family {
            ModelFamily::Transformer => "transformer",
            ModelFamily::FastSpeech => "fastspeech",
        }
    }

    fn tts_dir(&self) -> PathBuf {
        self.out.join("tts").join(self.family_name())
    }

    fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

fn usage(message: impl Into<String>) -> Error {
    Error::Usage(message.into())
}

fn required(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| usage(format!("configuration key {key} is required for this command")))
}

fn cache_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join(format!("{utt_id}.mel"))
}

fn read_cached(dir: &Path, utt_id: &str) -> Result<MelSpectrogram> {
    MelSpectrogram::read_cache(&cache_path(dir, utt_id)).map_err(|e| Error::Entry {
        utt_id: utt_id.to_owned(),
        message: format!("{e} (run `prepare` first)"),
    })
}

/// Deterministic held-out split: at least one item on each side.
fn split<T: Clone>(items: &[T], fraction: f64, rng: &mut StdRng) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::invalid(format!(
            "cannot split {} items into non-empty train and held-out sets",
            items.len()
        )));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(rng);
    let n_held = ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len() - 1);
    let (held, train) = idx.split_at(n_held);
    let mut held: Vec<usize> = held.to_vec();
    let mut train: Vec<usize> = train.to_vec();
    held.sort_unstable();
    train.sort_unstable();
    Ok((
        train.iter().map(|&i| items[i].clone()).collect(),
        held.iter().map(|&i| items[i].clone()).collect(),
    ))
}

fn cmd_prepare(run: &mut Run) -> Result<()> {
    let mut log = run.log(&run.out.join("prepare.log"))?;
    let extractor = MelExtractor::new(&run.config.mel)?;
    let corpora = [("tts", &run.config.data.tts_manifest), ("mos", &run.config.data.mos_manifest)];
    let mut failures = Vec::new();
    for (name, manifest) in corpora {
        let Some(path) = manifest else { continue };
        let manifest = load_manifest(path)?;
        let dir = run.mel_dir(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut written = 0;
        for entry in &manifest.entries {
            let result = read_wav(&entry.audio_path).and_then(|(wave, sr)| {
                if sr != run.config.mel.sample_rate {
                    return Err(Error::invalid(format!(
                        "sample rate {sr} Hz, configuration expects {}",
                        run.config.mel.sample_rate
                    )));
                }
                extractor.extract(&wave, sr)?.write_cache(&cache_path(&dir, &entry.utt_id))
            });
            match result {
                Ok(()) => written += 1,
                Err(e) => {
                    log.line(&format!("error corpus={name} utt_id={} {e}", entry.utt_id));
                    failures.push(entry.utt_id.clone());
                }
            }
        }
        log.line(&format!("corpus={name} entries={} cached={written}", manifest.len()));
    }
    if !failures.is_empty() {
        return Err(Error::invalid(format!("{} entries failed: {}", failures.len(), failures.join(", "))));
    }
    Ok(())
}

fn cmd_train_mos(run: &mut Run, no_augment: bool) -> Result<()> {
    let manifest = load_manifest(&required(&run.config.data.mos_manifest, "data.mos_manifest")?)?;
    let ratings = load_ratings(&required(&run.config.data.mos_ratings, "data.mos_ratings")?)?;
    let labels = mos_labels(&ratings);
    let mos_dir = run.mel_dir("mos");
    let mut rated = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let mos = *labels.get(&entry.utt_id).ok_or_else(|| Error::Entry {
            utt_id: entry.utt_id.clone(),
            message: "no naturalness ratings".into(),
        })?;
        let mel = read_cached(&mos_dir, &entry.utt_id)?;
        rated.push(RatedUtterance::new(entry.utt_id.clone(), mel, mos, Origin::MosCorpus)?);
    }
    let (train_set, held_out) = split(&rated, run.config.data.mos_validation_fraction, &mut run.rng)?;

    let mut augment = run.config.augment.clone();
    if no_augment {
        augment.enabled = false;
    }
    let mut tts_mels = Vec::new();
    if augment.enabled {
        let tts = load_manifest(&required(&run.config.data.tts_manifest, "data.tts_manifest")?)?;
        let dir = run.mel_dir("tts");
        for entry in &tts.entries {
            tts_mels.push((entry.utt_id.clone(), read_cached(&dir, &entry.utt_id)?));
        }
    }
    let dataset = augment_from_mels(&train_set, &tts_mels, &augment)?;

    let dir = run.out.join("mosnet");
    let mut log = run.log(&dir.join("train.log"))?;
    for item in &dataset {
        let origin = match item.origin {
            Origin::MosCorpus => "mos_corpus",
            Origin::TtsCorpus => "tts_corpus",
        };
        log.line(&format!("item utt_id={} origin={origin} mos={}", item.utt_id, item.mos));
    }
    let mut model = MosPredictor::new(run.config.mosnet.clone(), run.next_seed())?;
    let mut train_config = run.config.mos_train.clone();
    train_config.seed = run.next_seed();
    let history = train_mos(&mut model, &dataset, Some(&held_out), &train_config)?;
    for (epoch, loss) in history.epoch_losses.iter().enumerate() {
        let val = history.validation_mse.get(epoch).map_or(String::new(), |v| format!(" val_mse={v:.6}"));
        log.line(&format!("epoch={epoch} loss={loss:.6}{val}"));
    }
    let metrics = eval_mos_predictor(&model, &held_out)?;
    model.save(&dir, history.best_epoch.unwrap_or(0), Some(metrics))?;
    let text = toml::to_string(&metrics).map_err(|e| Error::invalid(e.to_string()))?;
    let metrics_path = dir.join("metrics.toml");
    fs::write(&metrics_path, text).map_err(|e| Error::io(&metrics_path, e))?;
    let fmt = |v: Option<f64>| v.map_or("absent".to_owned(), |v| format!("{v:.6}"));
    log.line(&format!(
        "held_out={} lcc={} srcc={} mse={:.6}",
        held_out.len(),
        fmt(metrics.lcc),
        fmt(metrics.srcc),
        metrics.mse
    ));
    Ok(())
}

fn tts_examples(run: &Run) -> Result<(AudioManifest, Vec<TtsExample>, CharVocab)> {
    let manifest = load_manifest(&required(&run.config.data.tts_manifest, "data.tts_manifest")?)?;
    if manifest.is_empty() {
        return Err(Error::invalid("TTS manifest is empty"));
    }
    let vocab = CharVocab::from_texts(manifest.entries.iter().map(|e| e.text.as_str()));
    let dir = run.mel_dir("tts");
    let examples = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(TtsExample {
                utt_id: e.utt_id.clone(),
                text: vocab.encode(&e.text)?,
                target: TtsTarget::new(read_cached(&dir, &e.utt_id)?, None)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, examples, vocab))
}

fn load_teacher(path: &Path) -> Result<TransformerTts> {
    match AnyTtsModel::load(path)?.0 {
        AnyTtsModel::Transformer(t) => Ok(t),
        AnyTtsModel::FastSpeech(_) => Err(usage(format!("teacher {} is not a Transformer TTS checkpoint", path.display()))),
    }
}

fn distill_into(run: &Run, teacher: &TransformerTts, examples: &[TtsExample], log: &mut RunLog) -> Result<Vec<TtsExample>> {
    let report = distill_targets(teacher, examples)?;
    let dir = run.out.join("distill");
    for ex in &report.targets {
        write_distilled(&dir, &ex.utt_id, &ex.target)?;
        let durations = ex.target.durations.as_ref().expect("distilled durations");
        log.line(&format!(
            "distilled utt_id={} frames={} chars={}",
            ex.utt_id,
            durations.iter().sum::<usize>(),
            durations.len()
        ));
    }
    for (utt, reason) in &report.excluded {
        log.line(&format!("excluded utt_id={utt} {reason}"));
    }
    if report.targets.is_empty() {
        return Err(Error::invalid("every utterance had a degenerate teacher alignment"));
    }
    Ok(report.targets)
}

fn cmd_distill(run: &mut Run, teacher: &Path) -> Result<()> {
    let (_, examples, _) = tts_examples(run)?;
    let teacher = load_teacher(teacher)?;
    let mut log = run.log(&run.out.join("distill").join("distill.log"))?;
    distill_into(run, &teacher, &examples, &mut log)?;
    Ok(())
}

fn predictor_dir(run: &Run, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| run.config.perceptual.predictor_checkpoint.clone())
        .unwrap_or_else(|| run.out.join("mosnet"))
}

fn cmd_train_tts(run: &mut Run, perceptual: Switch, teacher: Option<&Path>) -> Result<()> {
    let (_, mut examples, vocab) = tts_examples(run)?;
    let dir = run.tts_dir();
    let mut log = run.log(&dir.join("train.log"))?;
    let seed = run.next_seed();
    let mut model = match run.config.family {
        ModelFamily::Transformer => {
            if teacher.is_some() {
                return Err(usage("--teacher only applies to the fastspeech family"));
            }
            AnyTtsModel::Transformer(TransformerTts::new(run.config.transformer.clone(), vocab, seed)?)
        }
        ModelFamily::FastSpeech => {
            let store = run.out.join("distill");
            examples = match teacher {
                Some(path) => distill_into(run, &load_teacher(path)?, &examples, &mut log)?,
                None if store.is_dir() => examples
                    .into_iter()
                    .filter_map(|ex| {
                        let dur = store.join(format!("{}.dur", ex.utt_id));
                        dur.exists().then(|| {
                            Ok(TtsExample {
                                target: read_distilled(&store, &ex.utt_id)?,
                                ..ex
                            })
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => return Err(usage("fastspeech needs --teacher or distilled targets from `distill`")),
            };
            if examples.is_empty() {
                return Err(Error::invalid("no distilled targets found"));
            }
            AnyTtsModel::FastSpeech(FastSpeech::new(run.config.fastspeech.clone(), vocab, seed)?)
        }
    };
    let (train, validation) = split(&examples, run.config.data.tts_validation_fraction, &mut run.rng)?;

    let predictor = match perceptual {
        Switch::On => {
            let path = predictor_dir(run, None);
            if !path.join("meta.toml").exists() {
                return Err(usage(format!(
                    "--perceptual on needs a predictor checkpoint, none at {}",
                    path.display()
                )));
            }
            Some(MosPredictor::load_frozen(&path)?)
        }
        Switch::Off => None,
    };
    let mut train_config = run.config.tts_train.clone();
    train_config.seed = run.next_seed();
    let guidance = match &predictor {
        Some(p) => Some(Guidance::Apply(PerceptualGuide::new(p, &run.config.perceptual)?)),
        None => None,
    };
    log.line(&format!(
        "family={} perceptual={} train={} validation={}",
        run.family_name(),
        if guidance.is_some() { "on" } else { "off" },
        train.len(),
        validation.len()
    ));
    train_tts_logged(&mut model, &train, &validation, &train_config, guidance, &dir, &mut log)
}

fn train_tts_logged(
    model: &mut AnyTtsModel,
    train: &[TtsExample],
    validation: &[TtsExample],
    config: &TtsTrainConfig,
    guidance: Option<Guidance<'_>>,
    dir: &Path,
    log: &mut RunLog,
) -> Result<()> {
    crate::perceptual::train_tts(model, train, validation, config, guidance, |m, entry| {
        let name = format!("epoch_{:03}", entry.epoch);
        m.save(&dir.join(&name), entry.epoch)?;
        if entry.is_best {
            let best = dir.join("best");
            fs::write(&best, format!("{name}\n")).map_err(|e| Error::io(&best, e))?;
        }
        log.line(&entry.to_line());
        Ok(())
    })?;
    Ok(())
}

fn resolve_checkpoint(run: &Run, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let dir = run.tts_dir();
    let best = dir.join("best");
    let name = fs::read_to_string(&best).map_err(|e| Error::io(&best, e))?;
    Ok(dir.join(name.trim()))
}

fn cmd_synth(run: &mut Run, checkpoint: Option<&Path>, texts: &[String]) -> Result<()> {
    let path = resolve_checkpoint(run, checkpoint)?;
    let (model, _) = AnyTtsModel::load(&path)?;
    let family = match model.family() {
        ModelFamily::Transformer => "transformer",
        ModelFamily::FastSpeech => "fastspeech",
    };
    let items: Vec<(String, String)> = if texts.is_empty() {
        let manifest = load_manifest(&required(&run.config.data.tts_manifest, "data.tts_manifest")?)?;
        manifest.entries.into_iter().map(|e| (e.utt_id, e.text)).collect()
    } else {
        texts.iter().enumerate().map(|(i, t)| (format!("text{i:03}"), t.clone())).collect()
    };
    let dir = run.out.join("synth").join(family);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut log = run.log(&dir.join("synth.log"))?;
    for (utt_id, text) in items {
        let seq = model.vocab().encode(&text)?;
        let out = model.synthesize(&seq)?;
        out.mel.write_cache(&cache_path(&dir, &utt_id))?;
        log.line(&format!(
            "utt_id={utt_id} frames={} truncated={}",
            out.mel.n_frames(),
            out.truncated
        ));
    }
    Ok(())
}

fn split_assignment(s: &str) -> Result<(String, PathBuf)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| usage(format!("expected SYSTEM=PATH, got {s:?}")))?;
    Ok((k.to_owned(), PathBuf::from(v)))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_all_ratings(paths: &[PathBuf]) -> Result<Vec<RatingRecord>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_ratings(p)?);
    }
    Ok(out)
}

struct EvalArgs<'a> {
    ratings: &'a [PathBuf],
    per_ref: Option<&'a Path>,
    per_hyp: &'a [String],
    classes: Option<&'a Path>,
    synth: &'a [String],
    predictor: Option<&'a Path>,
    chart: Option<&'a Path>,
    report: Option<&'a Path>,
}

fn cmd_eval(run: &mut Run, args: EvalArgs<'_>) -> Result<()> {
    let mut report = MetricReport::default();
    let records = load_all_ratings(args.ratings)?;
    report.add_ratings(&records)?;

    if !args.per_hyp.is_empty() {
        let ref_path = args.per_ref.ok_or_else(|| usage("--per-hyp needs --per-ref"))?;
        let class_path = args.classes.ok_or_else(|| usage("--per-hyp needs --classes"))?;
        let references = parse_phone_file(&read_text(ref_path)?, ref_path)?;
        let classes = parse_class_file(&read_text(class_path)?, class_path)?;
        for assignment in args.per_hyp {
            let (system, path) = split_assignment(assignment)?;
            let hyps = parse_phone_file(&read_text(&path)?, &path)?;
            let pairs = join_per_pairs(&references, &hyps, &classes)?;
            report.systems.entry(system).or_default().set_per(&per_breakdown(&pairs)?);
        }
    }

    if !args.synth.is_empty() {
        let predictor = MosPredictor::load_frozen(&predictor_dir(run, args.predictor))?;
        let guide = PerceptualGuide::new(&predictor, &run.config.perceptual)?;
        for assignment in args.synth {
            let (system, dir) = split_assignment(assignment)?;
            let mut names: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "mel"))
                .collect();
            names.sort();
            let scores = names
                .iter()
                .map(|p| guide.score_mel(&MelSpectrogram::read_cache(p)?))
                .collect::<Result<Vec<_>>>()?;
            if scores.is_empty() {
                return Err(Error::invalid(format!("no .mel files in {}", dir.display())));
            }
            report.systems.entry(system).or_default().set_predicted_mos(&mos_aggregate(&scores)?);
        }
    }

    if report.systems.is_empty() {
        return Err(usage("eval needs --ratings, --per-hyp or --synth"));
    }
    let path = args
        .report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.out.join("eval").join("report.toml"));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    report.write(&path)?;
    let mut log = RunLog::stdout_only(run.timestamps);
    log.line(&format!("report={} systems={}", path.display(), report.systems.len()));
    if let Some(chart) = args.chart {
        evalkit::write_stacked_bar_chart(&intelligibility_histograms(&records)?, chart)?;
        log.line(&format!("chart={}", chart.display()));
    }
    Ok(())
}

fn cmd_plot(run: &mut Run, ratings: &[PathBuf], chart: Option<&Path>) -> Result<()> {
    let records = load_all_ratings(ratings)?;
    let tables = intelligibility_histograms(&records)?;
    let path = chart
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.out.join("eval").join("intelligibility.svg"));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    evalkit::write_stacked_bar_chart(&tables, &path)?;
    RunLog::stdout_only(run.timestamps).line(&format!("chart={} systems={}", path.display(), tables.len()));
    Ok(())
}

fn build_run(cli: &Cli) -> Result<Run> {
    let config = match &cli.config {
        Some(path) => {
            let text = read_text(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            load_run_config(&text, path, &cli.overrides, base)?
        }
        None => load_run_config("", Path::new("<defaults>"), &cli.overrides, Path::new("."))?,
    };
    let out = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .or_else(|| std::env::var_os(HOME_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("percept-tts-out"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(Run {
        rng: StdRng::seed_from_u64(config.seed),
        config,
        out,
        timestamps: !cli.no_timestamp,
    })
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let mut run = build_run(&cli)?;
    match &cli.command {
        Command::Prepare => cmd_prepare(&mut run),
        Command::TrainMos { no_augment } => cmd_train_mos(&mut run, *no_augment),
        Command::TrainTts { perceptual, teacher } => cmd_train_tts(&mut run, *perceptual, teacher.as_deref()),
        Command::Distill { teacher } => cmd_distill(&mut run, teacher),
        Command::Synth { checkpoint, text } => cmd_synth(&mut run, checkpoint.as_deref(), text),
        Command::Eval {
            ratings,
            per_ref,
            per_hyp,
            classes,
            synth,
            predictor,
            chart,
            report,
        } => cmd_eval(
            &mut run,
            EvalArgs {
                ratings,
                per_ref: per_ref.as_deref(),
                per_hyp,
                classes: classes.as_deref(),
                synth,
                predictor: predictor.as_deref(),
                chart: chart.as_deref(),
                report: report.as_deref(),
            },
        ),
        Command::Plot { ratings, chart } => cmd_plot(&mut run, ratings, chart.as_deref()),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) => EXIT_USAGE,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs, returning the exit
/// code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    main_with_args(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let text = "seed = 1\n[perceptual.schedule]\nlambda0 = 90.0\n";
        let overrides = vec![
            "perceptual.schedule.lambda0=70.0".to_owned(),
            "perceptual.schedule.lambda0=60.0".to_owned(),
            "family=fastspeech".to_owned(),
            "data.tts_manifest=m.tsv".to_owned(),
        ];
        let c = load_run_config(text, Path::new("c.toml"), &overrides, Path::new("/base")).unwrap();
        assert_eq!(c.perceptual.schedule.lambda0, 60.0);
        assert_eq!(c.family, ModelFamily::FastSpeech);
        assert_eq!(c.data.tts_manifest, Some(PathBuf::from("/base/m.tsv")));
        assert_eq!(c.seed, 1);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        assert!(load_run_config("sed = 3\n", Path::new("c.toml"), &[], Path::new(".")).is_err());
    }

    #[test]
    fn split_keeps_both_sides_non_empty() {
        let mut rng = StdRng::seed_from_u64(0);
        let (a, b) = split(&[1, 2], 0.9, &mut rng).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(split(&[1], 0.5, &mut rng).is_err());
    }

    #[test]
    fn bad_arguments_are_usage_errors() {
        assert_eq!(main_with_args(["percept-tts", "frobnicate"]), EXIT_USAGE);
        assert_eq!(main_with_args(["percept-tts", "plot"]), EXIT_USAGE);
    }
}
