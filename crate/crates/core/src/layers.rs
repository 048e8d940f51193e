//! Transformer building blocks shared by the language model, the acoustic
//! encoder and the gated cross-attention blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Real, Session, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Inserts a `rows × cols` weight drawn from N(0, std²).
pub(crate) fn init_matrix(
    store: &mut ParamStore<f32>,
    rng: &mut impl Rng,
    path: String,
    rows: usize,
    cols: usize,
    std: f64,
) -> Result<()> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::arg(e.to_string()))?;
    let data = (0..rows * cols).map(|_| normal.sample(rng) as f32).collect();
    store.insert(path, Tensor::matrix(rows, cols, data)?)
}

pub(crate) fn init_linear(
    store: &mut ParamStore<f32>,
    rng: &mut impl Rng,
    path: String,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    init_matrix(store, rng, path, fan_in, fan_out, (1.0 / fan_in as f64).sqrt())
}

pub(crate) fn init_filled(store: &mut ParamStore<f32>, path: String, shape: &[usize], v: f32) -> Result<()> {
    let n = shape.iter().product();
    store.insert(path, Tensor::new(shape.to_vec(), vec![v; n])?)
}

/// Parameters of a pre-norm transformer block under `prefix`.
pub(crate) fn init_block(
    store: &mut ParamStore<f32>,
    rng: &mut impl Rng,
    prefix: &str,
    dim: usize,
    ffn_dim: usize,
) -> Result<()> {
    init_filled(store, format!("{prefix}/attn_norm"), &[dim], 1.0)?;
    for w in ["wq", "wk", "wv", "wo"] {
        init_linear(store, rng, format!("{prefix}/attn/{w}"), dim, dim)?;
    }
    init_filled(store, format!("{prefix}/ffn_norm"), &[dim], 1.0)?;
    init_linear(store, rng, format!("{prefix}/ffn/w1"), dim, ffn_dim)?;
    init_linear(store, rng, format!("{prefix}/ffn/w2"), ffn_dim, dim)?;
    Ok(())
}

pub(crate) fn rms_norm<S: Real>(s: &mut Session<'_, S>, x: Var, gain: &str) -> Result<Var> {
    let g = s.param(gain)?;
    s.graph.rms_norm(x, g, NORM_EPS)
}

pub(crate) fn linear<S: Real>(s: &mut Session<'_, S>, x: Var, weight: &str) -> Result<Var> {
    let w = s.param(weight)?;
    s.graph.matmul(x, w)
}

/// Multi-head scaled dot-product attention with projections under
/// `prefix/{wq,wk,wv,wo}`. Queries come from `q_in`, keys and values from
/// `k_in`/`v_in`; `causal` restricts row `i` to key rows `0..=i`.
pub(crate) fn attention<S: Real>(
    s: &mut Session<'_, S>,
    prefix: &str,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let q = linear(s, q_in, &format!("{prefix}/wq"))?;
    let k = linear(s, k_in, &format!("{prefix}/wk"))?;
    let v = linear(s, v_in, &format!("{prefix}/wv"))?;
    let inner = s.graph.shape(q)[1];
    if heads == 0 || !inner.is_multiple_of(heads) {
        return Err(Error::arg(format!("{inner} attention dims do not split into {heads} heads")));
    }
    if causal && s.graph.rows(q) != s.graph.rows(k) {
        return Err(Error::arg("causal attention needs as many keys as queries"));
    }
    let hd = inner / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                s.graph.slice_cols(q, lo, hi)?,
                s.graph.slice_cols(k, lo, hi)?,
                s.graph.slice_cols(v, lo, hi)?,
            )
        };
        let scores = s.graph.matmul_t(qh, kh)?;
        let scores = s.graph.scale(scores, scale)?;
        let p = s.graph.softmax_rows(scores, causal)?;
        outs.push(s.graph.matmul(p, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { s.graph.concat_cols(&outs)? };
    linear(s, o, &format!("{prefix}/wo"))
}

/// Two-layer feed-forward network with a SiLU in between.
pub(crate) fn feed_forward<S: Real>(s: &mut Session<'_, S>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(s, x, &format!("{prefix}/w1"))?;
    let h = s.graph.silu(h)?;
    linear(s, h, &format!("{prefix}/w2"))
}

/// Pre-norm self-attention block followed by a pre-norm feed-forward block.
pub(crate) fn transformer_block<S: Real>(
    s: &mut Session<'_, S>,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let h = rms_norm(s, x, &format!("{prefix}/attn_norm"))?;
    let a = attention(s, &format!("{prefix}/attn"), h, h, h, heads, causal)?;
    let x = s.graph.add(x, a)?;
    let h = rms_norm(s, x, &format!("{prefix}/ffn_norm"))?;
    let f = feed_forward(s, &format!("{prefix}/ffn"), h)?;
    s.graph.add(x, f)
}
