//! Perceptual guidance: a frozen MOS predictor scores the generated mel and
//! the distance to the target MOS is blended with the conventional loss
//! under an epoch-indexed weight schedule.

use std::path::PathBuf;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW, SGD};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataio::{MelAffine, MelSpectrogram};
use crate::error::{Error, Result};
use crate::mosnet::MosPredictor;
use crate::nn;
use crate::ttscore::{TrainingPass, TtsExample, TtsModel};

/// `lambda(e) = max(lambda0 - decay_per_epoch * e, lambda_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaSchedule {
    pub lambda0: f64,
    pub decay_per_epoch: f64,
    pub lambda_min: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self::TRANSFORMER
    }
}

impl LambdaSchedule {
    /// Starts at 90, loses 1 per epoch, floors at 20.
    pub const TRANSFORMER: Self = Self {
        lambda0: 90.0,
        decay_per_epoch: 1.0,
        lambda_min: 20.0,
    };
    /// Starts at 60, loses 0.2 per epoch, floors at 56.
    pub const FASTSPEECH: Self = Self {
        lambda0: 60.0,
        decay_per_epoch: 0.2,
        lambda_min: 56.0,
    };

    pub fn new(lambda0: f64, decay_per_epoch: f64, lambda_min: f64) -> Result<Self> {
        let s = Self {
            lambda0,
            decay_per_epoch,
            lambda_min,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.lambda0.is_finite() && self.decay_per_epoch.is_finite() && self.lambda_min.is_finite();
        if !finite || self.decay_per_epoch < 0.0 || self.lambda_min < 0.0 || self.lambda0 < self.lambda_min {
            return Err(Error::invalid(format!(
                "lambda schedule needs lambda0 >= lambda_min >= 0 and decay >= 0, got ({}, {}, {})",
                self.lambda0, self.decay_per_epoch, self.lambda_min
            )));
        }
        Ok(())
    }

    /// Weight on the conventional loss for a 0-based epoch.
    pub fn lambda_at(&self, epoch: i64) -> Result<f64> {
        if epoch < 0 {
            return Err(Error::invalid(format!("negative epoch {epoch}")));
        }
        Ok((self.lambda0 - self.decay_per_epoch * epoch as f64).max(self.lambda_min))
    }
}

/// Mean absolute distance between predicted scores and `mos_target`.
/// Predictions above the target are penalised like those below it.
pub fn perceptual_loss(predicted: &[f64], mos_target: f64) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::invalid("perceptual loss of an empty batch"));
    }
    if !mos_target.is_finite() || predicted.iter().any(|p| !p.is_finite()) {
        return Err(Error::non_finite("perceptual loss input"));
    }
    Ok(predicted.iter().map(|p| (mos_target - p).abs()).sum::<f64>() / predicted.len() as f64)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// `(lambda * l_con + l_per) / (lambda + 1)`.
pub fn combined_loss(l_con: f64, l_per: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if !l_con.is_finite() {
        return Err(Error::non_finite("l_con"));
    }
    if !l_per.is_finite() {
        return Err(Error::non_finite("l_per"));
    }
    // Written as two weights so that huge lambdas do not overflow the product.
    let w_con = lambda / (lambda + 1.0);
    let w_per = 1.0 / (lambda + 1.0);
    Ok(w_con * l_con + w_per * l_per)
}

/// Differentiable counterpart of [`combined_loss`].
pub fn combined_loss_tensor(l_con: &Tensor, l_per: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    let w_con = lambda / (lambda + 1.0);
    let w_per = 1.0 / (lambda + 1.0);
    Ok(((l_con * w_con)? + (l_per * w_per)?)?)
}

/// Which generated mel the predictor scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorInput {
    #[default]
    PostNet,
    PreNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptualTrainingConfig {
    pub schedule: LambdaSchedule,
    pub predictor_checkpoint: Option<PathBuf>,
    pub mos_target: f64,
    pub predictor_input: PredictorInput,
    /// Maps the TTS model's log-mel space onto the predictor's training
    /// space (`(x - shift) / scale`). Identity by default.
    pub adapter: MelAffine,
}

impl Default for PerceptualTrainingConfig {
    fn default() -> Self {
        Self {
            schedule: LambdaSchedule::default(),
            predictor_checkpoint: None,
            mos_target: 5.0,
            predictor_input: PredictorInput::PostNet,
            adapter: MelAffine::default(),
        }
    }
}

impl PerceptualTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(1.0..=5.0).contains(&self.mos_target) {
            return Err(Error::invalid(format!("mos_target {} outside [1, 5]", self.mos_target)));
        }
        if !(self.adapter.scale.is_finite() && self.adapter.scale != 0.0 && self.adapter.shift.is_finite()) {
            return Err(Error::invalid("adapter needs a finite non-zero scale"));
        }
        Ok(())
    }
}

/// A frozen predictor plus the settings that turn its score into a loss.
#[derive(Debug, Clone, Copy)]
pub struct PerceptualGuide<'a> {
    predictor: &'a MosPredictor,
    config: &'a PerceptualTrainingConfig,
}

impl<'a> PerceptualGuide<'a> {
    pub fn new(predictor: &'a MosPredictor, config: &'a PerceptualTrainingConfig) -> Result<Self> {
        if !predictor.is_frozen() {
            return Err(Error::invalid("perceptual guidance needs a frozen MOS predictor"));
        }
        config.validate()?;
        Ok(Self { predictor, config })
    }

    pub fn predictor(&self) -> &MosPredictor {
        self.predictor
    }

    pub fn config(&self) -> &PerceptualTrainingConfig {
        self.config
    }

    /// Differentiable predictor score of a normalised mel produced by `model`.
    pub fn score_generated(&self, model: &dyn TtsModel, mel_normalized: &Tensor) -> Result<Tensor> {
        let raw = model.mel_norm().denormalize(mel_normalized)?;
        let adapted = self.config.adapter.normalize(&raw)?;
        Ok(self.predictor.forward(&adapted, None)?.1)
    }

    /// Evaluation-mode predictor score of a raw mel in the TTS model's space.
    pub fn score_mel(&self, mel: &MelSpectrogram) -> Result<f64> {
        let raw = mel.to_tensor(self.predictor.dtype(), &nn::DEVICE)?;
        let adapted = self.config.adapter.normalize(&raw)?;
        nn::scalar(&self.predictor.forward(&adapted, None)?.1)
    }

    fn scored_mel<'p>(&self, pass: &'p TrainingPass) -> &'p Tensor {
        match self.config.predictor_input {
            PredictorInput::PostNet => &pass.mel_post,
            PredictorInput::PreNet => &pass.mel_pre,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_per: f64,
    pub lambda: f64,
    pub total: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "l_con={} l_per={} lambda={} total={}",
            self.l_con, self.l_per, self.lambda, self.total
        )
    }
}

/// Differentiable batch objective. `l_con` and `l_per` are means over the
/// utterances in `batch`.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub total: Tensor,
    pub l_con: Tensor,
    pub l_per: Option<Tensor>,
    pub lambda: Option<f64>,
}

impl BatchObjective {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let l_con = nn::scalar(&self.l_con)?;
        let l_per = match &self.l_per {
            Some(t) => nn::scalar(t)?,
            None => f64::NAN,
        };
        Ok(LossBreakdown {
            l_con,
            l_per,
            lambda: self.lambda.unwrap_or(f64::INFINITY),
            total: nn::scalar(&self.total)?,
        })
    }
}

/// Builds the objective for one batch. With `lambda = Some(_)` the total is
/// the blended loss; with `None` the total is the conventional loss alone
/// and `l_per` (when a guide is given) is computed for monitoring only.
pub fn batch_objective(
    model: &dyn TtsModel,
    batch: &[TtsExample],
    guide: Option<&PerceptualGuide<'_>>,
    lambda: Option<f64>,
) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    if lambda.is_some() && guide.is_none() {
        return Err(Error::invalid("a lambda was given without a perceptual guide"));
    }
    let mut con_sum: Option<Tensor> = None;
    let mut per_sum: Option<Tensor> = None;
    for example in batch {
        let pass = model.training_pass(example)?;
        con_sum = Some(match con_sum {
            Some(s) => (s + &pass.loss.loss)?,
            None => pass.loss.loss.clone(),
        });
        if let Some(guide) = guide {
            let mut mel = guide.scored_mel(&pass).clone();
            if lambda.is_none() {
                mel = mel.detach();
            }
            let score = guide.score_generated(model, &mel)?;
            let dist = (score.affine(-1.0, guide.config.mos_target)?).abs()?;
            per_sum = Some(match per_sum {
                Some(s) => (s + dist)?,
                None => dist,
            });
        }
    }
    let n = batch.len() as f64;
    let l_con = (con_sum.expect("non-empty batch") / n)?;
    let l_per = per_sum.map(|s| s / n).transpose()?;
    let total = match (lambda, &l_per) {
        (Some(lambda), Some(l_per)) => combined_loss_tensor(&l_con, &l_per.to_dtype(l_con.dtype())?, lambda)?,
        _ => l_con.clone(),
    };
    Ok(BatchObjective {
        total,
        l_con,
        l_per,
        lambda,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Either optimizer over a model's variables.
pub struct TtsOptimizer {
    inner: OptimizerImpl,
}

enum OptimizerImpl {
    Adam(AdamW),
    Sgd(SGD),
}

impl TtsOptimizer {
    pub fn new(model: &dyn TtsModel, kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        let vars = model.params().vars();
        let inner = match kind {
            OptimizerKind::Adam => OptimizerImpl::Adam(AdamW::new(
                vars,
                ParamsAdamW {
                    lr: learning_rate,
                    weight_decay: 0.0,
                    ..Default::default()
                },
            )?),
            OptimizerKind::Sgd => OptimizerImpl::Sgd(SGD::new(vars, learning_rate)?),
        };
        Ok(Self { inner })
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        match &mut self.inner {
            OptimizerImpl::Adam(o) => o.backward_step(loss)?,
            OptimizerImpl::Sgd(o) => o.backward_step(loss)?,
        }
        Ok(())
    }
}

/// One optimisation step on `batch` with the blended objective at `lambda`.
/// The predictor is only read; a non-finite total aborts before any update.
pub fn perceptual_train_step(
    model: &dyn TtsModel,
    guide: &PerceptualGuide<'_>,
    batch: &[TtsExample],
    lambda: f64,
    optimizer: &mut TtsOptimizer,
) -> Result<LossBreakdown> {
    let objective = batch_objective(model, batch, Some(guide), Some(lambda))?;
    let breakdown = objective.breakdown()?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite {
            term: format!("total ({breakdown})"),
        });
    }
    optimizer.backward_step(&objective.total)?;
    Ok(breakdown)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Refit the model's mel normalisation on the training targets first.
    pub fit_mel_norm: bool,
}

impl Default for TtsTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            fit_mel_norm: true,
        }
    }
}

/// How the guide takes part in training.
#[derive(Debug, Clone, Copy)]
pub enum Guidance<'a> {
    /// The blended objective is optimised.
    Apply(PerceptualGuide<'a>),
    /// Only the conventional loss is optimised; `l_per` is still logged.
    Monitor(PerceptualGuide<'a>),
}

impl<'a> Guidance<'a> {
    fn guide(&self) -> &PerceptualGuide<'a> {
        match self {
            Guidance::Apply(g) | Guidance::Monitor(g) => g,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Present only when the blended objective was optimised.
    pub lambda: Option<f64>,
    pub l_con: f64,
    pub l_per: Option<f64>,
    pub total: f64,
    pub val_total: Option<f64>,
    /// Best epoch so far by validation total (training total without a
    /// validation set).
    pub is_best: bool,
}

impl EpochLog {
    /// `epoch=3 lambda=87 l_con=... l_per=... total=... val_total=...`; keys
    /// without a value are left out.
    pub fn to_line(&self) -> String {
        let mut line = format!("epoch={}", self.epoch);
        if let Some(lambda) = self.lambda {
            line.push_str(&format!(" lambda={lambda}"));
        }
        line.push_str(&format!(" l_con={:.6}", self.l_con));
        if let Some(l_per) = self.l_per {
            line.push_str(&format!(" l_per={l_per:.6}"));
        }
        line.push_str(&format!(" total={:.6}", self.total));
        if let Some(v) = self.val_total {
            line.push_str(&format!(" val_total={v:.6}"));
        }
        line
    }
}

fn validation_total(
    model: &dyn TtsModel,
    data: &[TtsExample],
    guidance: Option<&Guidance<'_>>,
    lambda: Option<f64>,
) -> Result<f64> {
    let mut sum = 0.0;
    for example in data {
        let obj = batch_objective(model, std::slice::from_ref(example), guidance.map(|g| g.guide()), lambda)?;
        sum += nn::scalar(&obj.total)?;
    }
    Ok(sum / data.len() as f64)
}

/// Trains `model` for `config.epochs` epochs. Epoch `e` uses
/// `schedule.lambda_at(e)` when guidance is applied. `on_epoch` runs after
/// every epoch with the model and that epoch's log (checkpointing hook).
pub fn train_tts<M: TtsModel>(
    model: &mut M,
    train: &[TtsExample],
    validation: &[TtsExample],
    config: &TtsTrainConfig,
    guidance: Option<Guidance<'_>>,
    mut on_epoch: impl FnMut(&M, &EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::invalid("TTS training set is empty"));
    }
    if config.fit_mel_norm {
        model.set_mel_norm(MelAffine::fit(train.iter().map(|e| &e.target.mel)));
    }
    let mut optimizer = TtsOptimizer::new(model, config.optimizer, config.learning_rate)?;
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch_size = config.batch_size.max(1);
    let mut best = f64::INFINITY;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lambda = match &guidance {
            Some(Guidance::Apply(g)) => Some(g.config.schedule.lambda_at(epoch as i64)?),
            _ => None,
        };
        order.shuffle(&mut rng);
        let (mut con, mut per, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<TtsExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let objective = batch_objective(model, &batch, guidance.as_ref().map(|g| g.guide()), lambda)?;
            let b = objective.breakdown()?;
            if !b.total.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("total at epoch {epoch} ({b})"),
                });
            }
            optimizer.backward_step(&objective.total)?;
            let w = batch.len() as f64;
            con += b.l_con * w;
            per += b.l_per * w;
            total += b.total * w;
        }
        let n = train.len() as f64;
        let val_total = if validation.is_empty() {
            None
        } else {
            Some(validation_total(model, validation, guidance.as_ref(), lambda)?)
        };
        let criterion = val_total.unwrap_or(total / n);
        let is_best = criterion < best;
        if is_best {
            best = criterion;
        }
        let entry = EpochLog {
            epoch,
            lambda,
            l_con: con / n,
            l_per: guidance.as_ref().map(|_| per / n),
            total: total / n,
            val_total,
            is_best,
        };
        on_epoch(model, &entry)?;
        log.push(entry);
    }
    Ok(log)
}

/// Mean frozen-predictor score of the model's free-running syntheses.
pub fn mean_synthesis_score(model: &dyn TtsModel, guide: &PerceptualGuide<'_>, data: &[TtsExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("no utterances to score"));
    }
    let mut sum = 0.0;
    for example in data {
        let synthesis = model.synthesize(&example.text)?;
        sum += guide.score_mel(&synthesis.mel)?;
    }
    Ok(sum / data.len() as f64)
}
