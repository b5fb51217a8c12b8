//! Perceptually guided text-to-speech training.
//!
//! A frozen MOS predictor scores the mel-spectrograms a TTS model generates,
//! and the distance between that score and the best possible score is mixed
//! into the model's ordinary training objective under an epoch schedule.
//!
//! The crate is organised around the three training steps and the
//! evaluation that follows them:
//!
//! - [`dataio`]: manifests, rating tables, mel extraction and the augmented
//!   MOS-prediction corpus.
//! - [`mosnet`]: the convolutional-recurrent MOS predictor, its training loop
//!   and its validation metrics.
//! - [`ttscore`]: toy-scale Transformer TTS and FastSpeech with their
//!   conventional losses, teacher-to-student distillation and inference.
//! - [`perceptual`]: the weight schedule, the combined objective and the
//!   perceptually guided training loop.
//! - [`evalkit`]: phone error rate, MOS aggregation, paired t-tests,
//!   intelligibility ratios and stacked bar charts.
//! - [`cli`]: the `percept-tts` command line driving all of the above.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod fixtures;
pub mod mosnet;
pub mod nn;
pub mod perceptual;
pub mod stats;
pub mod ttscore;

pub use error::{Error, Result};
