use serde::{Deserialize, Serialize};

use super::MosPredictor;
use crate::dataio::RatedUtterance;
use crate::error::{Error, Result};
use crate::stats;

/// Utterance-level agreement between predicted and true MOS. Correlations
/// are `None` when either side has zero variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosPredictionMetrics {
    pub lcc: Option<f64>,
    pub srcc: Option<f64>,
    pub mse: f64,
}

pub fn prediction_metrics(predicted: &[f64], truth: &[f64]) -> Result<MosPredictionMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.len() < 2 {
        return Err(Error::invalid("need at least two utterances for correlation metrics"));
    }
    Ok(MosPredictionMetrics {
        lcc: stats::pearson(predicted, truth),
        srcc: stats::spearman(predicted, truth),
        mse: stats::mse(predicted, truth),
    })
}

pub fn eval_mos_predictor(model: &MosPredictor, testset: &[RatedUtterance]) -> Result<MosPredictionMetrics> {
    if testset.len() < 2 {
        return Err(Error::invalid("test set needs at least two utterances"));
    }
    let predicted = model.score_batch(testset.iter().map(|u| &u.mel))?;
    let truth: Vec<f64> = testset.iter().map(|u| u.mos).collect();
    prediction_metrics(&predicted, &truth)
}
