use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::manifest::AudioManifest;
use super::mel::{MelConfig, MelExtractor, MelSpectrogram};
use super::wav::read_wav;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Rated material from a listening-test corpus.
    MosCorpus,
    /// Studio recordings from the TTS corpus, labelled with the assumed MOS.
    TtsCorpus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatedUtterance {
    pub utt_id: String,
    pub mel: MelSpectrogram,
    pub mos: f64,
    pub origin: Origin,
}

impl RatedUtterance {
    pub fn new(utt_id: impl Into<String>, mel: MelSpectrogram, mos: f64, origin: Origin) -> Result<Self> {
        let utt_id = utt_id.into();
        if !(1.0..=5.0).contains(&mos) {
            return Err(Error::Entry {
                utt_id,
                message: format!("MOS {mos} outside [1, 5]"),
            });
        }
        Ok(Self {
            utt_id,
            mel,
            mos,
            origin,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentOptions {
    /// When false the MOS corpus is returned unchanged.
    pub enabled: bool,
    /// Label given to every TTS-corpus recording.
    pub assumed_mos: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            enabled: true,
            assumed_mos: 5.0,
        }
    }
}

/// Appends already-extracted TTS-corpus mels to the MOS corpus.
pub fn augment_from_mels(
    mos_set: &[RatedUtterance],
    tts_mels: &[(String, MelSpectrogram)],
    options: &AugmentOptions,
) -> Result<Vec<RatedUtterance>> {
    if let Some(bad) = mos_set.iter().find(|u| u.origin != Origin::MosCorpus) {
        return Err(Error::Entry {
            utt_id: bad.utt_id.clone(),
            message: "MOS set may only hold mos_corpus items".into(),
        });
    }
    let mut out = mos_set.to_vec();
    if options.enabled {
        for (utt_id, mel) in tts_mels {
            out.push(RatedUtterance::new(
                utt_id.clone(),
                mel.clone(),
                options.assumed_mos,
                Origin::TtsCorpus,
            )?);
        }
    }
    Ok(out)
}

/// Reads and analyses every TTS-corpus recording, then augments the MOS set.
pub fn augment_mos_dataset(
    mos_set: &[RatedUtterance],
    tts_manifest: &AudioManifest,
    mel_config: &MelConfig,
    options: &AugmentOptions,
) -> Result<Vec<RatedUtterance>> {
    if !options.enabled {
        return augment_from_mels(mos_set, &[], options);
    }
    let extractor = MelExtractor::new(mel_config)?;
    let mels = tts_manifest
        .entries
        .iter()
        .map(|entry| {
            let wrap = |e: Error| Error::Entry {
                utt_id: entry.utt_id.clone(),
                message: e.to_string(),
            };
            let (wave, sr) = read_wav(&entry.audio_path).map_err(wrap)?;
            let mel = extractor.extract(&wave, sr).map_err(wrap)?;
            Ok((entry.utt_id.clone(), mel))
        })
        .collect::<Result<Vec<_>>>()?;
    augment_from_mels(mos_set, &mels, options)
}

/// Keeps the first item for each `(origin, utt_id)` key, preserving order.
pub fn dedup_rated(items: Vec<RatedUtterance>) -> Vec<RatedUtterance> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|u| seen.insert((u.origin, u.utt_id.clone())))
        .collect()
}
