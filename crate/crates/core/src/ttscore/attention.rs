use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::DEVICE;

/// Encoder-decoder attention of one head: `weights[n][t]` is the mass
/// decoder step `t` puts on character `n`. Every column sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAlignment {
    n_chars: usize,
    n_frames: usize,
    weights: Vec<f64>,
}

impl AttentionAlignment {
    /// Builds from a row-major `[n][t]` buffer, checking the invariants.
    pub fn new(n_chars: usize, n_frames: usize, weights: Vec<f64>) -> Result<Self> {
        if n_chars == 0 || n_frames == 0 || weights.len() != n_chars * n_frames {
            return Err(Error::Shape(format!(
                "alignment buffer of {} for {n_chars} x {n_frames}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("alignment weights must be non-negative"));
        }
        for t in 0..n_frames {
            let sum: f64 = (0..n_chars).map(|n| weights[n * n_frames + t]).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("decoder step {t} attention sums to {sum}")));
            }
        }
        Ok(Self {
            n_chars,
            n_frames,
            weights,
        })
    }

    /// From a decoder-major `(T, N)` tensor as produced by cross-attention.
    pub fn from_decoder_major(t: &Tensor) -> Result<Self> {
        let (frames, chars) = t.dims2()?;
        let rows = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut weights = vec![0.0; frames * chars];
        for (ti, row) in rows.iter().enumerate() {
            for (n, w) in row.iter().enumerate() {
                weights[n * frames + ti] = *w;
            }
        }
        Self::new(chars, frames, weights)
    }

    pub fn n_chars(&self) -> usize {
        self.n_chars
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn weight(&self, n: usize, t: usize) -> f64 {
        self.weights[n * self.n_frames + t]
    }

    /// Swaps the character and decoder axes. Columns of the result are not
    /// re-validated, so it is only meaningful for loss comparisons.
    pub fn transposed(&self) -> Self {
        let mut weights = vec![0.0; self.weights.len()];
        for n in 0..self.n_chars {
            for t in 0..self.n_frames {
                weights[t * self.n_chars + n] = self.weight(n, t);
            }
        }
        Self {
            n_chars: self.n_frames,
            n_frames: self.n_chars,
            weights,
        }
    }

    /// Mean over decoder steps of the largest attention weight.
    pub fn diagonal_focus(&self) -> f64 {
        (0..self.n_frames)
            .map(|t| (0..self.n_chars).map(|n| self.weight(n, t)).fold(0.0, f64::max))
            .sum::<f64>()
            / self.n_frames as f64
    }
}

/// Penalty weight for position `(n, t)`: `1 - exp(-(n/N - t/T)^2 / (2 g^2))`.
pub fn guided_weight(n: usize, t: usize, n_chars: usize, n_frames: usize, g: f64) -> f64 {
    let d = n as f64 / n_chars as f64 - t as f64 / n_frames as f64;
    1.0 - (-d * d / (2.0 * g * g)).exp()
}

/// Mean of the penalty-weighted attention over every `(n, t)` cell.
pub fn guided_attention_loss(alignment: &AttentionAlignment, g: f64) -> Result<f64> {
    if !(g > 0.0) {
        return Err(Error::invalid(format!("guided attention width must be positive, got {g}")));
    }
    let (n_chars, n_frames) = (alignment.n_chars, alignment.n_frames);
    let mut total = 0.0;
    for n in 0..n_chars {
        for t in 0..n_frames {
            total += guided_weight(n, t, n_chars, n_frames, g) * alignment.weight(n, t);
        }
    }
    Ok(total / (n_chars * n_frames) as f64)
}

/// Decoder-major `(T, N)` penalty matrix for the differentiable loss.
pub(crate) fn guided_weight_tensor(n_chars: usize, n_frames: usize, g: f64, dtype: DType) -> Result<Tensor> {
    let values: Vec<f64> = (0..n_frames)
        .flat_map(|t| (0..n_chars).map(move |n| guided_weight(n, t, n_chars, n_frames, g)))
        .collect();
    Ok(Tensor::from_vec(values, (n_frames, n_chars), &DEVICE)?.to_dtype(dtype)?)
}

/// Average guided-attention loss over every layer and head, using only the
/// first `valid` decoder steps. Each tensor is `(heads, T, N)`.
pub(crate) fn guided_attention_tensor(attn: &[Tensor], valid: usize, g: f64) -> Result<Tensor> {
    if !(g > 0.0) {
        return Err(Error::invalid(format!("guided attention width must be positive, got {g}")));
    }
    let mut acc: Option<Tensor> = None;
    for layer in attn {
        let (_, _, n_chars) = layer.dims3()?;
        let w = guided_weight_tensor(n_chars, valid, g, layer.dtype())?;
        let term = layer.narrow(1, 0, valid)?.broadcast_mul(&w)?.mean_all()?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    let acc = acc.ok_or_else(|| Error::invalid("no attention layers"))?;
    Ok((acc / attn.len() as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_has_no_penalty() {
        let a = AttentionAlignment::new(1, 1, vec![1.0]).unwrap();
        assert_eq!(guided_attention_loss(&a, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn exact_diagonal_has_no_penalty() {
        let n = 6;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let a = AttentionAlignment::new(n, n, w).unwrap();
        assert_eq!(guided_attention_loss(&a, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn non_positive_width_is_rejected() {
        let a = AttentionAlignment::new(1, 1, vec![1.0]).unwrap();
        assert!(guided_attention_loss(&a, 0.0).is_err());
        assert!(guided_attention_loss(&a, -1.0).is_err());
    }

    #[test]
    fn invariants_are_checked() {
        assert!(AttentionAlignment::new(2, 1, vec![0.5, 0.6]).is_err());
        assert!(AttentionAlignment::new(2, 1, vec![1.5, -0.5]).is_err());
        assert!(AttentionAlignment::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn weight_matrix_is_symmetric_in_normalised_positions() {
        for (n, t, nn, tt) in [(1, 3, 4, 7), (0, 5, 3, 6), (2, 2, 5, 5)] {
            let a = guided_weight(n, t, nn, tt, 0.2);
            let b = guided_weight(t, n, tt, nn, 0.2);
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tensor_path_matches_scalar_path() {
        let rows = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.0, 0.3, 0.7], vec![0.2, 0.2, 0.6]];
        let t = Tensor::new(rows, &DEVICE).unwrap();
        let a = AttentionAlignment::from_decoder_major(&t).unwrap();
        let via_tensor = crate::nn::scalar(&guided_attention_tensor(&[t.unsqueeze(0).unwrap()], 4, 0.2).unwrap()).unwrap();
        assert!((via_tensor - guided_attention_loss(&a, 0.2).unwrap()).abs() < 1e-12);
    }
}
