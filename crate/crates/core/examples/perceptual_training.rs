//! Trains FastSpeech twice on a toy token task, once with the conventional
//! loss and once blended with the frozen predictor's score, and compares the
//! held-out predicted MOS.
//!
//! cargo run --release --example perceptual_training -- [epochs]

use percept_tts::dataio::{Origin, RatedUtterance};
use percept_tts::fixtures::{smear_mel, TokenTask};
use percept_tts::mosnet::{train_mos, MosPredictor, MosPredictorConfig, MosTrainConfig};
use percept_tts::nn::Precision;
use percept_tts::perceptual::{
    mean_synthesis_score, train_tts, Guidance, LambdaSchedule, PerceptualGuide, PerceptualTrainingConfig,
    TtsTrainConfig,
};
use percept_tts::ttscore::{FastSpeech, FastSpeechConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() -> percept_tts::Result<()> {
    let epochs = std::env::args().nth(1).map_or(10, |s| s.parse().expect("epochs must be an integer"));
    let task = TokenTask::new("abcdef", 3, 0.2, 11)?;
    let mut rng = StdRng::seed_from_u64(5);

    // Quality labels fall with the amount of smearing.
    let mut rated = Vec::new();
    for ex in task.examples(30, 3, 6, &mut rng)? {
        for k in 0..3 {
            let amount = rng.random_range(0.0..1.0);
            let mel = smear_mel(&ex.target.mel, amount, &mut rng)?;
            rated.push(RatedUtterance::new(format!("{}_{k}", ex.utt_id), mel, 4.8 - 3.5 * amount, Origin::MosCorpus)?);
        }
    }
    let mut predictor = MosPredictor::new(
        MosPredictorConfig {
            n_conv_layers: 4,
            conv_channels: vec![8, 16],
            block_freq_strides: vec![1, 3],
            blstm_units: 16,
            fc_sizes: [32, 1],
            dropout: 0.0,
            ..Default::default()
        },
        1,
    )?;
    let mos_config = MosTrainConfig {
        epochs: 15,
        patience: None,
        ..Default::default()
    };
    train_mos(&mut predictor, &rated, None, &mos_config)?;
    let predictor = predictor.frozen();
    let pconfig = PerceptualTrainingConfig {
        schedule: LambdaSchedule::new(90.0, 1.0, 20.0)?,
        ..Default::default()
    };
    let guide = PerceptualGuide::new(&predictor, &pconfig)?;

    let train = task.examples(24, 3, 6, &mut rng)?;
    let held_out = task.examples(8, 3, 6, &mut rng)?;
    let fs_config = FastSpeechConfig {
        d_model: 32,
        ffn_dim: 64,
        duration_channels: 32,
        postnet_channels: 32,
        max_duration: 8,
        precision: Precision::F32,
        ..Default::default()
    };
    let config = TtsTrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 2e-3,
        ..Default::default()
    };
    for (name, apply) in [("baseline", false), ("perceptual", true)] {
        let mut model = FastSpeech::new(fs_config.clone(), task.vocab.clone(), 0)?;
        let guidance = if apply { Guidance::Apply(guide) } else { Guidance::Monitor(guide) };
        train_tts(&mut model, &train, &[], &config, Some(guidance), |_, entry| {
            println!("{name:<10} {}", entry.to_line());
            Ok(())
        })?;
        let score = mean_synthesis_score(&model, &guide, &held_out)?;
        println!("{name:<10} held-out predicted MOS {score:.3}");
    }
    Ok(())
}
