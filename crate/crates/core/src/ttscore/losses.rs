use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, DEVICE};

/// One named component of a conventional loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerm {
    pub name: &'static str,
    pub value: f64,
    pub weight: f64,
}

/// A differentiable total plus its per-term breakdown.
#[derive(Debug, Clone)]
pub struct ConventionalLoss {
    pub loss: Tensor,
    pub terms: Vec<LossTerm>,
    term_tensors: Vec<Tensor>,
}

impl ConventionalLoss {
    /// Weighted sum of the breakdown, computed in f64.
    pub fn total(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// Unweighted differentiable value of one term.
    pub fn term_tensor(&self, name: &str) -> Option<&Tensor> {
        self.terms.iter().position(|t| t.name == name).map(|i| &self.term_tensors[i])
    }

    pub(crate) fn combine(parts: Vec<(&'static str, Tensor, f64)>) -> Result<Self> {
        let mut loss: Option<Tensor> = None;
        let mut terms = Vec::with_capacity(parts.len());
        let mut term_tensors = Vec::with_capacity(parts.len());
        for (name, t, weight) in parts {
            let value = nn::scalar(&t)?;
            if !value.is_finite() {
                return Err(Error::non_finite(format!("loss term {name}")));
            }
            terms.push(LossTerm { name, value, weight });
            term_tensors.push(t.clone());
            let weighted = if weight == 1.0 { t } else { (t * weight)? };
            loss = Some(match loss {
                Some(acc) => (acc + weighted)?,
                None => weighted,
            });
        }
        Ok(Self {
            loss: loss.ok_or_else(|| Error::invalid("empty loss"))?,
            terms,
            term_tensors,
        })
    }
}

/// How the duration predictor is supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationLossMode {
    /// Softmax over integer duration buckets `0..=max_duration`.
    #[default]
    CrossEntropyBucketed,
    /// Squared error on `ln(1 + d)`.
    MseLog,
}

/// Mean squared error over the first `valid` frames.
pub(crate) fn masked_l2(pred: &Tensor, target: &Tensor, valid: usize) -> Result<Tensor> {
    let p = pred.narrow(0, 0, valid)?;
    let t = target.narrow(0, 0, valid)?;
    Ok((p - t)?.sqr()?.mean_all()?)
}

/// Class-weighted binary cross-entropy on logits over the first `valid`
/// frames: `pw * y * softplus(-z) + (1 - y) * softplus(z)`, averaged.
pub(crate) fn stop_bce(logits: &Tensor, labels: &[f32], valid: usize, pos_weight: f64) -> Result<Tensor> {
    let z = logits.narrow(0, 0, valid)?;
    let y = Tensor::from_slice(&labels[..valid], valid, &DEVICE)?.to_dtype(z.dtype())?;
    let pos = (nn::softplus(&z.neg()?)? * (y.clone() * pos_weight)?)?;
    let neg = (nn::softplus(&z)? * (y.neg()? + 1.0)?)?;
    Ok((pos + neg)?.mean_all()?)
}

/// Row-wise log-softmax from primitive ops.
pub(crate) fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Duration predictor loss averaged over characters.
pub(crate) fn duration_loss(
    output: &Tensor,
    durations: &[usize],
    mode: DurationLossMode,
    max_duration: usize,
) -> Result<Tensor> {
    let (n, width) = output.dims2()?;
    if n != durations.len() {
        return Err(Error::Shape(format!("{n} duration outputs for {} characters", durations.len())));
    }
    match mode {
        DurationLossMode::CrossEntropyBucketed => {
            let mut onehot = vec![0.0f64; n * width];
            for (i, &d) in durations.iter().enumerate() {
                onehot[i * width + d.min(max_duration)] = 1.0;
            }
            let onehot = Tensor::from_vec(onehot, (n, width), &DEVICE)?.to_dtype(output.dtype())?;
            Ok((log_softmax(output)? * onehot)?.sum_all()?.neg()?.affine(1.0 / n as f64, 0.0)?)
        }
        DurationLossMode::MseLog => {
            let target: Vec<f64> = durations.iter().map(|&d| (d as f64).ln_1p()).collect();
            let target = Tensor::from_vec(target, (n, 1), &DEVICE)?.to_dtype(output.dtype())?;
            Ok((output - target)?.sqr()?.mean_all()?)
        }
    }
}

/// Integer durations read off the predictor output.
pub(crate) fn decode_durations(output: &Tensor, mode: DurationLossMode) -> Result<Vec<usize>> {
    match mode {
        DurationLossMode::CrossEntropyBucketed => Ok(output
            .argmax(D::Minus1)?
            .to_vec1::<u32>()?
            .into_iter()
            .map(|d| d as usize)
            .collect()),
        DurationLossMode::MseLog => Ok(nn::to_vec_f64(output)?
            .into_iter()
            .map(|v| v.exp_m1().round().max(0.0) as usize)
            .collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_perfect_logits_vanish() {
        let logits = Tensor::new(&[-20.0f64, -20.0, -20.0, 20.0], &DEVICE).unwrap();
        let v = nn::scalar(&stop_bce(&logits, &[0.0, 0.0, 0.0, 1.0], 4, 5.0).unwrap()).unwrap();
        assert!(v < 1e-8, "{v}");
    }

    #[test]
    fn bce_matches_definition() {
        let z = [0.3f64, -1.2, 2.0];
        let y = [0.0f32, 0.0, 1.0];
        let logits = Tensor::new(&z, &DEVICE).unwrap();
        let v = nn::scalar(&stop_bce(&logits, &y, 3, 5.0).unwrap()).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = z
            .iter()
            .zip(y)
            .map(|(&z, y)| -(5.0 * y as f64 * sig(z).ln() + (1.0 - y as f64) * (1.0 - sig(z)).ln()))
            .sum::<f64>()
            / 3.0;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn bucketed_cross_entropy_matches_definition() {
        let rows = vec![vec![0.1f64, 2.0, -1.0], vec![1.0, 0.0, 0.5]];
        let out = Tensor::new(rows.clone(), &DEVICE).unwrap();
        let v = nn::scalar(&duration_loss(&out, &[1, 7], DurationLossMode::CrossEntropyBucketed, 2).unwrap()).unwrap();
        let lse = |r: &[f64]| r.iter().map(|x| x.exp()).sum::<f64>().ln();
        let expect = ((lse(&rows[0]) - rows[0][1]) + (lse(&rows[1]) - rows[1][2])) / 2.0;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn decode_inverts_mse_log_targets() {
        let d = [0usize, 1, 4, 9];
        let out: Vec<f64> = d.iter().map(|&x| (x as f64).ln_1p()).collect();
        let t = Tensor::from_vec(out, (4, 1), &DEVICE).unwrap();
        assert_eq!(decode_durations(&t, DurationLossMode::MseLog).unwrap(), d);
        assert_eq!(nn::scalar(&duration_loss(&t, &d, DurationLossMode::MseLog, 50).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_term_is_named() {
        let bad = Tensor::new(f64::NAN, &DEVICE).unwrap();
        let ok = Tensor::new(1.0f64, &DEVICE).unwrap();
        let err = ConventionalLoss::combine(vec![("l2_pre", ok, 1.0), ("stop_bce", bad, 1.0)]).unwrap_err();
        assert!(err.to_string().contains("stop_bce"));
    }
}
