//! Distills FastSpeech targets from a briefly trained Transformer teacher and
//! prints the per-character durations read off its attention.
//!
//! cargo run --release --example distillation -- [teacher_epochs]

use percept_tts::fixtures::TokenTask;
use percept_tts::nn::Precision;
use percept_tts::perceptual::{train_tts, TtsTrainConfig};
use percept_tts::ttscore::{distill_targets, FastSpeech, FastSpeechConfig, TransformerTts, TransformerTtsConfig};
use rand::rngs::StdRng;
use rand::SeedableRng;

fn main() -> percept_tts::Result<()> {
    let epochs = std::env::args().nth(1).map_or(5, |s| s.parse().expect("epochs must be an integer"));
    let task = TokenTask::new("abcd", 3, 0.1, 8)?;
    let mut rng = StdRng::seed_from_u64(2);
    let examples = task.examples(12, 2, 5, &mut rng)?;
    let mut teacher = TransformerTts::new(
        TransformerTtsConfig {
            d_model: 16,
            ffn_dim: 32,
            prenet_dim: 16,
            postnet_channels: 16,
            precision: Precision::F32,
            ..Default::default()
        },
        task.vocab.clone(),
        1,
    )?;
    let config = TtsTrainConfig {
        epochs,
        batch_size: 4,
        ..Default::default()
    };
    train_tts(&mut teacher, &examples, &[], &config, None, |_, _| Ok(()))?;

    let report = distill_targets(&teacher, &examples)?;
    for ex in &report.targets {
        let durations = ex.target.durations.as_deref().unwrap_or_default();
        println!("{:<8} frames={:>3} durations={durations:?}", ex.utt_id, ex.target.valid_frames());
    }
    for (utt, reason) in &report.excluded {
        println!("{utt:<8} excluded: {reason}");
    }
    if report.targets.is_empty() {
        return Ok(());
    }
    let mut student = FastSpeech::new(
        FastSpeechConfig {
            d_model: 16,
            ffn_dim: 16,
            duration_channels: 16,
            postnet_channels: 16,
            precision: Precision::F32,
            ..Default::default()
        },
        task.vocab.clone(),
        1,
    )?;
    let log = train_tts(&mut student, &report.targets, &[], &config, None, |_, _| Ok(()))?;
    if let Some(last) = log.last() {
        println!("student after {} epochs: {}", log.len(), last.to_line());
    }
    Ok(())
}
