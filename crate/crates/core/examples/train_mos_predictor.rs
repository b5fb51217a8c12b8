//! Trains a small MOS predictor on smeared synthetic mels whose label falls
//! with the amount of smearing, then reports held-out correlation.
//!
//! cargo run --release --example train_mos_predictor -- [epochs]

use percept_tts::dataio::{Origin, RatedUtterance};
use percept_tts::fixtures::{smear_mel, TokenTask};
use percept_tts::mosnet::{eval_mos_predictor, train_mos, MosPredictor, MosPredictorConfig, MosTrainConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn rated(task: &TokenTask, n: usize, rng: &mut StdRng) -> percept_tts::Result<Vec<RatedUtterance>> {
    let mut out = Vec::new();
    for ex in task.examples(n, 3, 6, rng)? {
        let amount = rng.random_range(0.0..1.0);
        let mel = smear_mel(&ex.target.mel, amount, rng)?;
        out.push(RatedUtterance::new(ex.utt_id, mel, 4.8 - 3.5 * amount, Origin::MosCorpus)?);
    }
    Ok(out)
}

fn main() -> percept_tts::Result<()> {
    let epochs = std::env::args().nth(1).map_or(10, |s| s.parse().expect("epochs must be an integer"));
    let mut rng = StdRng::seed_from_u64(1);
    let task = TokenTask::new("abcdef", 3, 0.2, 11)?;
    let train = rated(&task, 60, &mut rng)?;
    let validation = rated(&task, 20, &mut rng)?;
    let mut model = MosPredictor::new(
        MosPredictorConfig {
            n_conv_layers: 4,
            conv_channels: vec![8, 16],
            block_freq_strides: vec![1, 3],
            blstm_units: 16,
            fc_sizes: [32, 1],
            ..Default::default()
        },
        1,
    )?;
    let config = MosTrainConfig {
        epochs,
        ..Default::default()
    };
    let history = train_mos(&mut model, &train, Some(&validation), &config)?;
    for (epoch, loss) in history.epoch_losses.iter().enumerate() {
        let val = history.validation_mse.get(epoch).map_or(String::new(), |v| format!(" val_mse={v:.4}"));
        println!("epoch={} loss={loss:.4}{val}", epoch + 1);
    }
    let m = eval_mos_predictor(&model, &validation)?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!("held out: mse={:.4} lcc={} srcc={}", m.mse, show(m.lcc), show(m.srcc));
    Ok(())
}
