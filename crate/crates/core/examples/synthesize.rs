//! Trains a tiny Transformer-TTS on a toy token task and synthesizes unseen
//! strings, writing each mel to the cache format used by the CLI.
//!
//! cargo run --release --example synthesize -- [out_dir] [text...]

use std::path::PathBuf;

use percept_tts::fixtures::TokenTask;
use percept_tts::nn::Precision;
use percept_tts::perceptual::{train_tts, TtsTrainConfig};
use percept_tts::ttscore::{TransformerTts, TransformerTtsConfig};
use rand::rngs::StdRng;
use rand::SeedableRng;

fn main() -> percept_tts::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth-out".into()));
    let mut texts: Vec<String> = args.collect();
    if texts.is_empty() {
        texts = vec!["abc".into(), "dcba".into()];
    }
    let task = TokenTask::new("abcd", 3, 0.1, 8)?;
    let mut rng = StdRng::seed_from_u64(3);
    let examples = task.examples(12, 2, 5, &mut rng)?;
    let mut model = TransformerTts::new(
        TransformerTtsConfig {
            d_model: 16,
            ffn_dim: 32,
            prenet_dim: 16,
            postnet_channels: 16,
            max_frames_per_char: 6,
            precision: Precision::F32,
            ..Default::default()
        },
        task.vocab.clone(),
        1,
    )?;
    let config = TtsTrainConfig {
        epochs: 5,
        batch_size: 4,
        ..Default::default()
    };
    train_tts(&mut model, &examples, &[], &config, None, |_, _| Ok(()))?;

    std::fs::create_dir_all(&out).expect("cannot create the output directory");
    for (i, text) in texts.iter().enumerate() {
        let synthesis = model.synthesize(&model.vocab().encode(text)?)?;
        let path = out.join(format!("utt{i:03}.mel"));
        synthesis.mel.write_cache(&path)?;
        let note = if synthesis.truncated { " (frame cap reached)" } else { "" };
        println!("{text:?} -> {} frames{note} -> {}", synthesis.mel.n_frames(), path.display());
    }
    Ok(())
}
