//! Teacher-to-student distillation: the teacher's post-net output becomes
//! the mel target and its most diagonal attention head supplies per-character
//! durations.

use std::fs;
use std::path::{Path, PathBuf};

use super::attention::AttentionAlignment;
use super::target::{TtsExample, TtsTarget};
use super::transformer::TransformerTts;
use crate::dataio::MelSpectrogram;
use crate::error::{Error, Result};

/// Counts, per character, the decoder frames whose attention argmax lands on
/// it. Ties go to the earlier character, so the counts always sum to `T`.
pub fn durations_from_alignment(alignment: &AttentionAlignment) -> Vec<usize> {
    let mut counts = vec![0; alignment.n_chars()];
    for t in 0..alignment.n_frames() {
        let mut best = 0;
        for n in 1..alignment.n_chars() {
            if alignment.weight(n, t) > alignment.weight(best, t) {
                best = n;
            }
        }
        counts[best] += 1;
    }
    counts
}

/// Index of the alignment with the highest diagonal focus (earliest on ties).
pub fn select_alignment(alignments: &[AttentionAlignment]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in alignments.iter().enumerate() {
        let focus = a.diagonal_focus();
        if best.is_none_or(|(_, f)| focus > f) {
            best = Some((i, focus));
        }
    }
    best.map(|(i, _)| i)
}

/// An alignment is degenerate when one character swallows every frame of a
/// multi-character utterance.
pub fn is_degenerate(durations: &[usize]) -> bool {
    let total: usize = durations.iter().sum();
    durations.len() > 1 && durations.contains(&total)
}

#[derive(Debug, Clone, Default)]
pub struct DistillReport {
    pub targets: Vec<TtsExample>,
    /// `(utt_id, reason)` for every utterance left out.
    pub excluded: Vec<(String, String)>,
}

/// Runs the teacher with teacher forcing on each example and builds
/// student targets from its outputs.
pub fn distill_targets(teacher: &TransformerTts, examples: &[TtsExample]) -> Result<DistillReport> {
    let mut report = DistillReport::default();
    for ex in examples {
        let gt = ex.target.unpadded_mel()?;
        let out = teacher.transformer_forward(&ex.text, &gt)?;
        let frames = gt.n_frames();
        let alignments = TransformerTts::alignments(&out, frames)?;
        let head = select_alignment(&alignments).ok_or_else(|| Error::invalid("teacher produced no attention"))?;
        let durations = durations_from_alignment(&alignments[head]);
        if is_degenerate(&durations) {
            report.excluded.push((
                ex.utt_id.clone(),
                format!("alignment {head} puts all {frames} frames on one character"),
            ));
            continue;
        }
        let mel_post = teacher.mel_norm.denormalize(&out.mel_post)?;
        let mel = MelSpectrogram::from_tensor(&mel_post, gt.sample_rate(), gt.hop_length())?;
        report.targets.push(TtsExample {
            utt_id: ex.utt_id.clone(),
            text: ex.text.clone(),
            target: TtsTarget::new(mel, Some(durations))?,
        });
    }
    Ok(report)
}

fn sidecar_paths(dir: &Path, utt_id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{utt_id}.mel")), dir.join(format!("{utt_id}.dur")))
}

/// Writes `{utt_id}.mel` (mel cache format) and `{utt_id}.dur`
/// (`utt_id d1 d2 ...`).
pub fn write_distilled(dir: &Path, utt_id: &str, target: &TtsTarget) -> Result<()> {
    let durations = target
        .durations
        .as_ref()
        .ok_or_else(|| Error::invalid("distilled target without durations"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mel_path, dur_path) = sidecar_paths(dir, utt_id);
    target.unpadded_mel()?.write_cache(&mel_path)?;
    let mut line = utt_id.to_owned();
    for d in durations {
        line.push(' ');
        line.push_str(&d.to_string());
    }
    line.push('\n');
    fs::write(&dur_path, line).map_err(|e| Error::io(dur_path, e))
}

pub fn read_duration_sidecar(path: &Path) -> Result<(String, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let mut fields = text.split_whitespace();
    let utt_id = fields.next().ok_or_else(|| parse_err("empty sidecar".into()))?.to_owned();
    let durations = fields
        .map(|f| f.parse::<usize>().map_err(|e| parse_err(format!("bad duration {f:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if durations.is_empty() {
        return Err(parse_err("no durations".into()));
    }
    Ok((utt_id, durations))
}

/// Reads back a target written by [`write_distilled`].
pub fn read_distilled(dir: &Path, utt_id: &str) -> Result<TtsTarget> {
    let (mel_path, dur_path) = sidecar_paths(dir, utt_id);
    let mel = MelSpectrogram::read_cache(&mel_path)?;
    let (stored_id, durations) = read_duration_sidecar(&dur_path)?;
    if stored_id != utt_id {
        return Err(Error::Parse {
            path: dur_path,
            line: 1,
            message: format!("sidecar names {stored_id}, expected {utt_id}"),
        });
    }
    TtsTarget::new(mel, Some(durations))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn align(rows: &[&[f64]]) -> AttentionAlignment {
        let n = rows.len();
        let t = rows[0].len();
        AttentionAlignment::new(n, t, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn argmax_counting_with_ties_to_earlier_character() {
        let a = align(&[
            &[0.8, 0.5, 0.1, 0.0, 0.2],
            &[0.1, 0.5, 0.8, 0.5, 0.3],
            &[0.1, 0.0, 0.1, 0.5, 0.5],
        ]);
        assert_eq!(durations_from_alignment(&a), vec![2, 2, 1]);
    }

    #[test]
    fn degenerate_detection() {
        assert!(is_degenerate(&[0, 5, 0]));
        assert!(!is_degenerate(&[5]));
        assert!(!is_degenerate(&[2, 3]));
    }

    #[test]
    fn most_focused_alignment_wins() {
        let blurry = align(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let sharp = align(&[&[0.9, 0.1], &[0.1, 0.9]]);
        assert_eq!(select_alignment(&[blurry.clone(), sharp, blurry]), Some(1));
        assert_eq!(select_alignment(&[]), None);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mel = MelSpectrogram::new(vec![0.25; 5 * crate::dataio::N_MELS], 22_050.0, 256).unwrap();
        let target = TtsTarget::new(mel, Some(vec![2, 0, 3])).unwrap();
        write_distilled(dir.path(), "utt7", &target).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("utt7.dur")).unwrap(), "utt7 2 0 3\n");
        assert_eq!(read_distilled(dir.path(), "utt7").unwrap(), target);
    }
}
