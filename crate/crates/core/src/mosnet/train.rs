use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::MosPredictor;
use crate::dataio::{MelAffine, RatedUtterance};
use crate::error::{Error, Result};
use crate::nn::{self, DEVICE};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MosTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the frame-level MSE term; 0 trains on utterance MSE only.
    pub frame_loss_weight: f64,
    /// Stop after this many epochs without held-out improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Refit the predictor's input normalisation on the training mels.
    pub fit_input_norm: bool,
}

impl Default for MosTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            learning_rate: 1e-4,
            frame_loss_weight: 1.0,
            patience: Some(5),
            seed: 0,
            fit_input_norm: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MosTrainHistory {
    /// Mean training objective per epoch.
    pub epoch_losses: Vec<f64>,
    /// Held-out utterance MSE per epoch, when a validation set was given.
    pub validation_mse: Vec<f64>,
    /// Utterance-level training MSE before the first update.
    pub initial_train_mse: f64,
    /// Utterance-level training MSE of the returned parameters.
    pub final_train_mse: f64,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

fn utterance_mse(model: &MosPredictor, data: &[RatedUtterance]) -> Result<f64> {
    let predicted = model.score_batch(data.iter().map(|u| &u.mel))?;
    let truth: Vec<f64> = data.iter().map(|u| u.mos).collect();
    Ok(stats::mse(&predicted, &truth))
}

/// Per-item objective: `(utt - y)^2 + w * mean_t (frame_t - y)^2`.
fn item_loss(
    model: &MosPredictor,
    item: &RatedUtterance,
    frame_weight: f64,
    rng: &mut StdRng,
) -> Result<Tensor> {
    let mel = item.mel.to_tensor(model.dtype(), &DEVICE)?;
    let (frames, utt) = model.forward(&mel, Some(rng))?;
    let mut loss = (utt - item.mos)?.sqr()?;
    if frame_weight > 0.0 {
        let frame_term = (frames - item.mos)?.sqr()?.mean_all()?;
        loss = (loss + (frame_term * frame_weight)?)?;
    }
    Ok(loss)
}

/// Trains the predictor in place by minimising MSE against the MOS labels.
/// With a validation set and a patience, training stops early and the
/// parameters with the best held-out MSE are kept.
pub fn train_mos(
    model: &mut MosPredictor,
    dataset: &[RatedUtterance],
    validation: Option<&[RatedUtterance]>,
    config: &MosTrainConfig,
) -> Result<MosTrainHistory> {
    if dataset.is_empty() {
        return Err(Error::invalid("MOS training set is empty"));
    }
    if model.is_frozen() {
        return Err(Error::invalid("cannot train a frozen MOS predictor"));
    }
    if let Some(u) = dataset.iter().find(|u| !(1.0..=5.0).contains(&u.mos)) {
        return Err(Error::Entry {
            utt_id: u.utt_id.clone(),
            message: format!("label {} outside [1, 5]", u.mos),
        });
    }
    if config.fit_input_norm {
        model.input_norm = MelAffine::fit(dataset.iter().map(|u| &u.mel));
    }
    let validation = validation.filter(|v| !v.is_empty());

    let mut history = MosTrainHistory {
        initial_train_mse: utterance_mse(model, dataset)?,
        ..Default::default()
    };
    let mut optimizer = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batch_size = config.batch_size.max(1);
    let mut best: Option<(f64, usize, _)> = None;
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            let mut total: Option<Tensor> = None;
            for &i in batch {
                let l = item_loss(model, &dataset[i], config.frame_loss_weight, &mut rng)?;
                total = Some(match total {
                    Some(t) => (t + l)?,
                    None => l,
                });
            }
            let loss = (total.expect("non-empty batch") / batch.len() as f64)?;
            let value = nn::scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::non_finite(format!("MOS training loss at epoch {epoch}")));
            }
            epoch_loss += value * batch.len() as f64;
            optimizer.backward_step(&loss)?;
        }
        history.epoch_losses.push(epoch_loss / dataset.len() as f64);

        if let Some(valid) = validation {
            let mse = utterance_mse(model, valid)?;
            history.validation_mse.push(mse);
            if best.as_ref().is_none_or(|(b, _, _)| mse < *b) {
                best = Some((mse, epoch, model.params().snapshot()?));
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, epoch, snapshot)) = best {
        model.params().restore(&snapshot)?;
        history.best_epoch = Some(epoch);
    }
    history.final_train_mse = utterance_mse(model, dataset)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{MelSpectrogram, Origin, N_MELS};
    use crate::mosnet::tests::tiny_config;

    fn item(id: &str, level: f32, mos: f64) -> RatedUtterance {
        let mel = MelSpectrogram::new(
            (0..4 * N_MELS).map(|i| level + (i % 7) as f32 * 0.1).collect(),
            22_050.0,
            256,
        )
        .unwrap();
        RatedUtterance::new(id, mel, mos, Origin::MosCorpus).unwrap()
    }

    fn fast() -> MosTrainConfig {
        MosTrainConfig {
            epochs: 60,
            batch_size: 1,
            learning_rate: 1e-2,
            patience: None,
            ..Default::default()
        }
    }

    #[test]
    fn single_item_converges_to_label() {
        let mut model = MosPredictor::new(tiny_config(), 0).unwrap();
        let data = [item("a", 0.0, 5.0)];
        let hist = train_mos(&mut model, &data, None, &fast()).unwrap();
        assert!(hist.final_train_mse < hist.initial_train_mse);
        assert!((model.score(&data[0].mel).unwrap() - 5.0).abs() < 0.1);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut model = MosPredictor::new(tiny_config(), 0).unwrap();
        assert!(train_mos(&mut model, &[], None, &fast()).is_err());
    }

    #[test]
    fn frozen_model_refuses_training() {
        let mut model = MosPredictor::new(tiny_config(), 0).unwrap().frozen();
        assert!(train_mos(&mut model, &[item("a", 0.0, 3.0)], None, &fast()).is_err());
    }

    #[test]
    fn same_seed_same_model() {
        let data = [item("a", 0.0, 2.0), item("b", 1.0, 4.0)];
        let run = || {
            let mut cfg = tiny_config();
            cfg.dropout = 0.3;
            let mut m = MosPredictor::new(cfg, 4).unwrap();
            let mut tc = fast();
            tc.epochs = 3;
            train_mos(&mut m, &data, None, &tc).unwrap();
            m.checksum().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let data = [item("a", 0.0, 2.0), item("b", 1.0, 4.0)];
        let valid = [item("c", 0.5, 1.0), item("d", 0.7, 5.0)];
        let mut model = MosPredictor::new(tiny_config(), 2).unwrap();
        let mut tc = fast();
        tc.patience = Some(2);
        let hist = train_mos(&mut model, &data, Some(&valid), &tc).unwrap();
        let best = hist.best_epoch.unwrap();
        let best_mse = hist.validation_mse[best];
        assert!(hist.validation_mse.iter().all(|&m| m >= best_mse));
        assert!((utterance_mse(&model, &valid).unwrap() - best_mse).abs() < 1e-6);
    }
}
