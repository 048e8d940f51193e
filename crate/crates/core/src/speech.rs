//! Acoustic side of the model: a small bidirectional self-attention encoder
//! over precomputed feature frames, the strided convolutional subsampler, and
//! time/feature masking of encoder states during training.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{init_block, init_filled, init_linear, init_matrix, rms_norm, transformer_block};
use crate::numcore::ops::conv1d_out_len;
use crate::numcore::{ParamStore, Real, Session, Tensor, Var};

const FEATURE_MAGIC: &[u8; 4] = b"GFAF";
const FEATURE_VERSION: u32 = 1;

/// Minimum frame count accepted by the subsampler.
pub const MIN_FRAMES: usize = 4;
pub const SUBSAMPLE_KERNEL: usize = 3;
pub const SUBSAMPLE_STRIDE: usize = 2;
pub const SUBSAMPLE_PADDING: usize = 1;

/// `T × D` feature frames at the nominal 50 Hz input rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(Tensor<f32>);

impl FeatureMatrix {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        let (t, _) = frames.dims2()?;
        if frames.rank() != 2 {
            return Err(Error::arg("feature matrix must be rank 2"));
        }
        if t < MIN_FRAMES {
            return Err(Error::arg(format!("{t} frames; at least {MIN_FRAMES} required")));
        }
        if !frames.all_finite() {
            return Err(Error::data("non-finite feature value"));
        }
        Ok(FeatureMatrix(frames))
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.0.numel() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.0.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::data("not a feature file (bad magic)"));
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(Error::data(format!("unsupported feature file version {version}")));
        }
        let (t, d) = (word(8) as usize, word(12) as usize);
        if bytes.len() != 16 + t * d * 4 {
            return Err(Error::data(format!(
                "feature file declares {t}x{d} frames but holds {} bytes",
                bytes.len() - 16
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(Tensor::matrix(t, d, data)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub subsample_out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            subsample_out_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.subsample_out_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::arg("encoder dimensions must be positive"));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::arg("encoder model_dim not divisible by heads"));
        }
        Ok(())
    }
}

pub(crate) fn init_encoder_params(
    store: &mut ParamStore<f32>,
    rng: &mut impl Rng,
    cfg: &EncoderConfig,
    feat_dim: usize,
) -> Result<()> {
    let d = cfg.model_dim;
    init_linear(store, rng, "encoder/in_proj".into(), feat_dim, d)?;
    init_filled(store, "encoder/in_bias".into(), &[d], 0.0)?;
    for l in 0..cfg.layers {
        let prefix = format!("encoder/layer{l}");
        init_block(store, rng, &prefix, d, cfg.ffn_dim)?;
        // residual branches start closed: until the encoder is trained its
        // layers pass the projected frames through unchanged
        for w in ["attn/wo", "ffn/w2"] {
            store.get_mut(&format!("{prefix}/{w}"))?.data_mut().fill(0.0);
        }
    }
    if cfg.layers > 0 {
        init_filled(store, "encoder/final_norm".into(), &[d], 1.0)?;
    }
    Ok(())
}

pub(crate) fn init_subsampler_params(
    store: &mut ParamStore<f32>,
    rng: &mut impl Rng,
    cfg: &EncoderConfig,
) -> Result<()> {
    let (d, out) = (cfg.model_dim, cfg.subsample_out_dim);
    let std = (1.0 / (SUBSAMPLE_KERNEL * d) as f64).sqrt();
    init_matrix(store, rng, "subsampler/conv1/kernel".into(), SUBSAMPLE_KERNEL * d, d, std)?;
    init_filled(store, "subsampler/conv1/bias".into(), &[d], 0.0)?;
    init_matrix(store, rng, "subsampler/conv2/kernel".into(), SUBSAMPLE_KERNEL * d, out, std)?;
    init_filled(store, "subsampler/conv2/bias".into(), &[out], 0.0)?;
    // kernels are stored flat as (K·D_in)×D_out; restore the rank-3 shape
    for (name, d_out) in [("conv1", d), ("conv2", out)] {
        let path = format!("subsampler/{name}/kernel");
        let t = store.get(&path)?.clone().reshape(vec![SUBSAMPLE_KERNEL, d, d_out])?;
        *store.get_mut(&path)? = t;
    }
    Ok(())
}

/// Encodes `T × D_feat` frames to `T × model_dim` states. `keep`, when
/// given, is a `T × model_dim` 0/1 mask applied to the output states.
pub fn encode<S: Real>(
    s: &mut Session<'_, S>,
    cfg: &EncoderConfig,
    features: Var,
    keep: Option<&Tensor<S>>,
) -> Result<Var> {
    let w = s.param("encoder/in_proj")?;
    let b = s.param("encoder/in_bias")?;
    let x = s.graph.matmul(features, w)?;
    let x = s.graph.add_row(x, b)?;
    let (t, d) = (s.graph.rows(x), cfg.model_dim);
    let pos = s.graph.constant(sinusoid_positions(t, d)?);
    let mut x = s.graph.add(x, pos)?;
    for l in 0..cfg.layers {
        x = transformer_block(s, &format!("encoder/layer{l}"), x, cfg.heads, false)?;
    }
    if cfg.layers > 0 {
        x = rms_norm(s, x, "encoder/final_norm")?;
    }
    if let Some(mask) = keep {
        if mask.shape() != s.graph.shape(x) {
            return Err(Error::arg("state mask shape differs from encoder output"));
        }
        let m = s.graph.constant(mask.clone());
        x = s.graph.mul(x, m)?;
    }
    Ok(x)
}

/// Fixed sine/cosine position codes, `t × d`: column pairs `(2i, 2i+1)`
/// hold `sin`/`cos` of `pos / 10000^(2i/d)`.
pub fn sinusoid_positions<S: Real>(t: usize, d: usize) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(t * d);
    for pos in 0..t {
        for c in 0..d {
            let rate = 10_000f64.powf(-((c / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * rate;
            let v = if c % 2 == 0 { a.sin() } else { a.cos() };
            data.push(S::lit(v));
        }
    }
    Tensor::new(vec![t, d], data)
}

/// Frame count after the two stride-2 convolutions.
pub fn subsampled_len(t: usize) -> Result<usize> {
    if t < MIN_FRAMES {
        return Err(Error::arg(format!("{t} frames; at least {MIN_FRAMES} required")));
    }
    let once = conv1d_out_len(t, SUBSAMPLE_KERNEL, SUBSAMPLE_STRIDE, SUBSAMPLE_PADDING)?;
    conv1d_out_len(once, SUBSAMPLE_KERNEL, SUBSAMPLE_STRIDE, SUBSAMPLE_PADDING)
}

/// Two stacked kernel-3 stride-2 convolutions with a SiLU between them,
/// reducing the frame rate by 4×.
pub fn conv_subsample<S: Real>(s: &mut Session<'_, S>, states: Var) -> Result<Var> {
    subsampled_len(s.graph.rows(states))?;
    let mut x = states;
    for (i, name) in ["conv1", "conv2"].into_iter().enumerate() {
        let k = s.param(&format!("subsampler/{name}/kernel"))?;
        let b = s.param(&format!("subsampler/{name}/bias"))?;
        x = s.graph.conv1d(x, k, SUBSAMPLE_STRIDE, SUBSAMPLE_PADDING)?;
        x = s.graph.add_row(x, b)?;
        if i == 0 {
            x = s.graph.silu(x)?;
        }
    }
    Ok(x)
}

/// Encoder followed by the subsampler: the keys/values seen by the fused
/// decoder.
pub fn acoustic_states<S: Real>(
    s: &mut Session<'_, S>,
    cfg: &EncoderConfig,
    features: &Tensor<S>,
    keep: Option<&Tensor<S>>,
) -> Result<Var> {
    let f = s.graph.constant(features.clone());
    let h = encode(s, cfg, f, keep)?;
    conv_subsample(s, h)
}

/// Inference-mode acoustic states for a feature matrix.
pub fn encode_features(
    params: &ParamStore<f32>,
    cfg: &EncoderConfig,
    features: &FeatureMatrix,
) -> Result<Tensor<f32>> {
    let mut s = Session::inference(params);
    let v = acoustic_states(&mut s, cfg, features.frames(), None)?;
    Ok(s.graph.value(v).clone())
}

/// Time and feature masking settings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecMaskConfig {
    pub time_masks: usize,
    pub time_width: usize,
    pub feat_masks: usize,
    pub feat_width: usize,
}

impl SpecMaskConfig {
    pub fn none() -> Self {
        SpecMaskConfig {
            time_masks: 0,
            time_width: 0,
            feat_masks: 0,
            feat_width: 0,
        }
    }

    pub fn is_noop(&self) -> bool {
        (self.time_masks == 0 || self.time_width == 0) && (self.feat_masks == 0 || self.feat_width == 0)
    }
}

impl Default for SpecMaskConfig {
    fn default() -> Self {
        SpecMaskConfig {
            time_masks: 1,
            time_width: 2,
            feat_masks: 1,
            feat_width: 4,
        }
    }
}

/// 0/1 keep-mask over a `T × D` state matrix. Each time mask zeroes
/// `time_width` consecutive frames and each feature mask `feat_width`
/// consecutive channels, at uniformly drawn offsets.
pub fn mask_pattern<S: Real>(t: usize, d: usize, cfg: &SpecMaskConfig, rng: &mut impl Rng) -> Result<Tensor<S>> {
    if cfg.time_width > t || cfg.feat_width > d {
        return Err(Error::arg(format!(
            "mask widths ({}, {}) exceed state dims ({t}, {d})",
            cfg.time_width, cfg.feat_width
        )));
    }
    let mut keep = vec![S::one(); t * d];
    if cfg.time_width > 0 {
        for _ in 0..cfg.time_masks {
            let start = rng.random_range(0..=t - cfg.time_width);
            keep[start * d..(start + cfg.time_width) * d].fill(S::zero());
        }
    }
    if cfg.feat_width > 0 {
        for _ in 0..cfg.feat_masks {
            let start = rng.random_range(0..=d - cfg.feat_width);
            for row in keep.chunks_mut(d) {
                row[start..start + cfg.feat_width].fill(S::zero());
            }
        }
    }
    Tensor::matrix(t, d, keep)
}

/// Applies masking to a state matrix directly.
pub fn spec_mask<S: Real>(states: &Tensor<S>, cfg: &SpecMaskConfig, rng: &mut impl Rng) -> Result<Tensor<S>> {
    let (t, d) = states.dims2()?;
    if cfg.is_noop() {
        return Ok(states.clone());
    }
    let keep = mask_pattern::<S>(t, d, cfg, rng)?;
    let data = states
        .data()
        .iter()
        .zip(keep.data())
        .map(|(&v, &k)| if k == S::zero() { S::zero() } else { v })
        .collect();
    Tensor::new(states.shape().to_vec(), data)
}
