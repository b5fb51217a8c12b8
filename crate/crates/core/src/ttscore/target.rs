use crate::dataio::{MelSpectrogram, N_MELS};
use crate::error::{Error, Result};

use super::text::TextSequence;

/// Supervision for one utterance. Frames past `valid_frames` are padding
/// and never contribute to a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TtsTarget {
    pub mel: MelSpectrogram,
    pub stop_labels: Vec<f32>,
    pub durations: Option<Vec<usize>>,
    valid_frames: usize,
}

impl TtsTarget {
    /// Stop label 1 on the last frame only.
    pub fn new(mel: MelSpectrogram, durations: Option<Vec<usize>>) -> Result<Self> {
        let t = mel.n_frames();
        if let Some(d) = &durations {
            let sum: usize = d.iter().sum();
            if sum != t {
                return Err(Error::invalid(format!("durations sum to {sum}, mel has {t} frames")));
            }
        }
        let mut stop_labels = vec![0.0; t];
        stop_labels[t - 1] = 1.0;
        Ok(Self {
            mel,
            stop_labels,
            durations,
            valid_frames: t,
        })
    }

    pub fn valid_frames(&self) -> usize {
        self.valid_frames
    }

    /// Appends `extra` padding frames filled with `value`; losses are unchanged.
    pub fn padded(&self, extra: usize, value: f32) -> Result<Self> {
        let mut data = self.mel.as_slice().to_vec();
        data.extend(std::iter::repeat_n(value, extra * N_MELS));
        let mut stop_labels = self.stop_labels.clone();
        stop_labels.extend(std::iter::repeat_n(0.0, extra));
        Ok(Self {
            mel: MelSpectrogram::new(data, self.mel.sample_rate(), self.mel.hop_length())?,
            stop_labels,
            durations: self.durations.clone(),
            valid_frames: self.valid_frames,
        })
    }

    /// Copy of the target restricted to its valid frames.
    pub fn unpadded_mel(&self) -> Result<MelSpectrogram> {
        MelSpectrogram::new(
            self.mel.as_slice()[..self.valid_frames * N_MELS].to_vec(),
            self.mel.sample_rate(),
            self.mel.hop_length(),
        )
    }
}

/// One training utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TtsExample {
    pub utt_id: String,
    pub text: TextSequence,
    pub target: TtsTarget,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mel(t: usize) -> MelSpectrogram {
        MelSpectrogram::new(vec![0.5; t * N_MELS], 22_050.0, 256).unwrap()
    }

    #[test]
    fn stop_labels_mark_final_frame() {
        let t = TtsTarget::new(mel(4), None).unwrap();
        assert_eq!(t.stop_labels, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn durations_must_cover_frames() {
        assert!(TtsTarget::new(mel(4), Some(vec![1, 2])).is_err());
        assert!(TtsTarget::new(mel(4), Some(vec![1, 0, 3])).is_ok());
    }

    #[test]
    fn padding_keeps_valid_region() {
        let t = TtsTarget::new(mel(3), Some(vec![3])).unwrap();
        let p = t.padded(2, -9.0).unwrap();
        assert_eq!(p.mel.n_frames(), 5);
        assert_eq!(p.valid_frames(), 3);
        assert_eq!(p.unpadded_mel().unwrap(), t.mel);
    }
}
