//! Blocks shared by both TTS families. Sequences are unbatched `(L, d)`.

use candle_core::{Tensor, D};
use rand::rngs::StdRng;

use crate::error::Result;
use crate::nn::{self, ParamStore, DEVICE};

pub(crate) fn register_attention(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut StdRng) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        p.linear(&format!("{prefix}.{part}"), d, d, rng)?;
    }
    Ok(())
}

/// Multi-head scaled dot-product attention. Returns the projected output
/// `(Lq, d)` and the attention weights `(heads, Lq, Lk)`.
pub(crate) fn attention(
    p: &ParamStore,
    prefix: &str,
    query: &Tensor,
    memory: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<(Tensor, Tensor)> {
    let (lq, d) = query.dims2()?;
    let lk = memory.dim(0)?;
    let dh = d / heads;
    let split = |x: Tensor, len: usize| -> Result<Tensor> {
        Ok(x.reshape((len, heads, dh))?.transpose(0, 1)?.contiguous()?)
    };
    let q = split(nn::linear(p, &format!("{prefix}.q"), query)?, lq)?;
    let k = split(nn::linear(p, &format!("{prefix}.k"), memory)?, lk)?;
    let v = split(nn::linear(p, &format!("{prefix}.v"), memory)?, lk)?;
    let mut scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
    if causal {
        let mask: Vec<f64> = (0..lq)
            .flat_map(|i| (0..lk).map(move |j| if j > i { -1e9 } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (lq, lk), &DEVICE)?.to_dtype(scores.dtype())?;
        scores = scores.broadcast_add(&mask)?;
    }
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = weights
        .matmul(&v)?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((lq, d))?;
    Ok((nn::linear(p, &format!("{prefix}.o"), &out)?, weights))
}

pub(crate) fn register_ffn(p: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut StdRng) -> Result<()> {
    p.linear(&format!("{prefix}.fc1"), d, hidden, rng)?;
    p.linear(&format!("{prefix}.fc2"), hidden, d, rng)
}

pub(crate) fn ffn(p: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let h = nn::linear(p, &format!("{prefix}.fc1"), x)?.relu()?;
    nn::linear(p, &format!("{prefix}.fc2"), &h)
}

pub(crate) fn register_conv_ffn(
    p: &mut ParamStore,
    prefix: &str,
    d: usize,
    hidden: usize,
    kernel: usize,
    rng: &mut StdRng,
) -> Result<()> {
    p.conv(&format!("{prefix}.conv1"), &[hidden, d, kernel], rng)?;
    p.conv(&format!("{prefix}.conv2"), &[d, hidden, kernel], rng)
}

/// Position-wise 1-D convolutional feed-forward on `(L, d)`.
pub(crate) fn conv_ffn(p: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let h = nn::conv1d_same(p, &format!("{prefix}.conv1"), &x.t()?.contiguous()?)?.relu()?;
    Ok(nn::conv1d_same(p, &format!("{prefix}.conv2"), &h)?.t()?)
}

pub(crate) fn register_postnet(
    p: &mut ParamStore,
    layers: usize,
    channels: usize,
    kernel: usize,
    n_mels: usize,
    rng: &mut StdRng,
) -> Result<()> {
    for i in 0..layers {
        let c_in = if i == 0 { n_mels } else { channels };
        let c_out = if i + 1 == layers { n_mels } else { channels };
        p.conv(&format!("postnet.{i}"), &[c_out, c_in, kernel], rng)?;
    }
    Ok(())
}

/// Residual refinement `mel + postnet(mel)` on `(L, 80)`. Activations past
/// `valid` frames are zeroed after every layer so padding cannot leak into
/// valid frames through the convolution receptive field.
pub(crate) fn postnet(p: &ParamStore, layers: usize, mel: &Tensor, valid: usize) -> Result<Tensor> {
    let len = mel.dim(0)?;
    let mask = (len > valid)
        .then(|| -> Result<Tensor> {
            let m: Vec<f64> = (0..len).map(|t| if t < valid { 1.0 } else { 0.0 }).collect();
            Ok(Tensor::from_vec(m, (1, len), &DEVICE)?.to_dtype(mel.dtype())?)
        })
        .transpose()?;
    let apply_mask = |x: Tensor| -> Result<Tensor> {
        Ok(match &mask {
            Some(m) => x.broadcast_mul(m)?,
            None => x,
        })
    };
    let mut x = apply_mask(mel.t()?.contiguous()?)?;
    for i in 0..layers {
        x = nn::conv1d_same(p, &format!("postnet.{i}"), &x)?;
        if i + 1 < layers {
            x = x.tanh()?;
        }
        x = apply_mask(x)?;
    }
    Ok((mel + x.t()?)?)
}

/// Token embedding lookup `(N, d)`.
pub(crate) fn embed(p: &ParamStore, name: &str, ids: &[u32]) -> Result<Tensor> {
    let table = p.get(name)?;
    let idx = Tensor::new(ids, &DEVICE)?;
    Ok(table.index_select(&idx, 0)?)
}

/// `x + alpha * PE` with a learned scalar `alpha`.
pub(crate) fn add_positions(p: &ParamStore, alpha: &str, x: &Tensor) -> Result<Tensor> {
    let (len, d) = x.dims2()?;
    let pe = nn::positional_encoding(len, d, x.dtype())?;
    Ok((x + pe.broadcast_mul(&p.get(alpha)?)?)?)
}
