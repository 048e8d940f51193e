//! Deep fusion of acoustic states into the frozen language model.
//!
//! A gated cross-attention + feed-forward block sits in front of each of the
//! top `fused_layers` LM layers:
//!
//! ```text
//! Y  = Q + tanh(w1) · MHA(Q, K, V)
//! Ŷ  = Y + tanh(w2) · FFN(Y)
//! ```
//!
//! Both gates start at zero, so a fresh fused decoder computes exactly what
//! the LM alone computes. Prompt positions skip the block; the `<sos>`
//! separator and everything after it go through.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{attention, feed_forward, init_filled, init_linear, rms_norm};
use crate::numcore::{ParamStore, Real, Session, Tensor, Var};
use crate::speech::{init_encoder_params, init_subsampler_params, EncoderConfig};
use crate::toklm::{decoder_input, decoder_log_probs, init_lm_params, DecoderConfig, TokenSeq, SOS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusedDecoderConfig {
    pub lm: DecoderConfig,
    /// Number of LM layers, counted from the top, that get a gated block.
    pub fused_layers: usize,
    pub bottleneck: usize,
    pub heads: usize,
}

impl Default for FusedDecoderConfig {
    fn default() -> Self {
        FusedDecoderConfig {
            lm: DecoderConfig::default(),
            fused_layers: 2,
            bottleneck: 16,
            heads: 1,
        }
    }
}

impl FusedDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        if self.fused_layers > self.lm.layers {
            return Err(Error::arg(format!(
                "{} fused layers requested but the LM has {}",
                self.fused_layers, self.lm.layers
            )));
        }
        if self.bottleneck == 0 || self.bottleneck >= self.lm.model_dim {
            return Err(Error::arg("bottleneck must be positive and below model_dim"));
        }
        if self.heads == 0 || !self.bottleneck.is_multiple_of(self.heads) {
            return Err(Error::arg("bottleneck not divisible by fusion heads"));
        }
        Ok(())
    }

    /// Host LM layer indices that carry a gated block, bottom to top.
    pub fn fused_range(&self) -> Range<usize> {
        self.lm.layers - self.fused_layers..self.lm.layers
    }

    pub fn block_prefix(layer: usize) -> String {
        format!("fusion/layer{layer}")
    }
}

/// Everything needed to build the complete parameter set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub decoder: FusedDecoderConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, feat_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            feat_dim,
            decoder: FusedDecoderConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }

    pub fn lm(&self) -> &DecoderConfig {
        &self.decoder.lm
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= crate::toklm::SPECIALS.len() || self.feat_dim == 0 {
            return Err(Error::arg("vocab_size and feat_dim must be positive"));
        }
        self.decoder.validate()?;
        self.encoder.validate()
    }
}

pub(crate) fn init_gated_block(
    store: &mut ParamStore<f32>,
    rng: &mut impl Rng,
    prefix: &str,
    model_dim: usize,
    kv_dim: usize,
    bottleneck: usize,
) -> Result<()> {
    store.insert(format!("{prefix}/w1"), Tensor::scalar(0.0))?;
    store.insert(format!("{prefix}/w2"), Tensor::scalar(0.0))?;
    init_filled(store, format!("{prefix}/xattn_norm"), &[model_dim], 1.0)?;
    init_linear(store, rng, format!("{prefix}/xattn/wq"), model_dim, bottleneck)?;
    init_linear(store, rng, format!("{prefix}/xattn/wk"), kv_dim, bottleneck)?;
    init_linear(store, rng, format!("{prefix}/xattn/wv"), kv_dim, bottleneck)?;
    init_linear(store, rng, format!("{prefix}/xattn/wo"), bottleneck, model_dim)?;
    init_filled(store, format!("{prefix}/ffn_norm"), &[model_dim], 1.0)?;
    init_linear(store, rng, format!("{prefix}/ffn/w1"), model_dim, bottleneck)?;
    init_linear(store, rng, format!("{prefix}/ffn/w2"), bottleneck, model_dim)
}

/// Fresh parameters for the full model: LM, encoder, subsampler and one
/// zero-gated block per fused layer.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_lm_params(&mut store, &mut rng, cfg.lm(), cfg.vocab_size)?;
    init_encoder_params(&mut store, &mut rng, &cfg.encoder, cfg.feat_dim)?;
    init_subsampler_params(&mut store, &mut rng, &cfg.encoder)?;
    for l in cfg.decoder.fused_range() {
        init_gated_block(
            &mut store,
            &mut rng,
            &FusedDecoderConfig::block_prefix(l),
            cfg.lm().model_dim,
            cfg.encoder.subsample_out_dim,
            cfg.decoder.bottleneck,
        )?;
    }
    Ok(store)
}

/// One gated cross-attention + FFN block. `q` holds decoder states, `k`/`v`
/// acoustic states; attention over the acoustic axis is unmasked.
pub fn gated_xatt_ffn<S: Real>(
    s: &mut Session<'_, S>,
    prefix: &str,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let wq_rows = s.store().get(&format!("{prefix}/xattn/wq"))?.shape()[0];
    let wk_rows = s.store().get(&format!("{prefix}/xattn/wk"))?.shape()[0];
    let (qs, ks, vs) = (s.graph.shape(q), s.graph.shape(k), s.graph.shape(v));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != wq_rows || ks[1] != wk_rows || vs != ks {
        return Err(Error::arg(format!(
            "gated block {prefix}: query {qs:?}, key {ks:?}, value {vs:?} do not fit \
             projections ({wq_rows} query dims, {wk_rows} key dims)"
        )));
    }
    let h = rms_norm(s, q, &format!("{prefix}/xattn_norm"))?;
    let a = attention(s, &format!("{prefix}/xattn"), h, k, v, heads, false)?;
    let w1 = s.param(&format!("{prefix}/w1"))?;
    let g1 = s.graph.tanh(w1)?;
    let a = s.graph.scalar_mul(g1, a)?;
    let y = s.graph.add(q, a)?;

    let h = rms_norm(s, y, &format!("{prefix}/ffn_norm"))?;
    let f = feed_forward(s, &format!("{prefix}/ffn"), h)?;
    let w2 = s.param(&format!("{prefix}/w2"))?;
    let g2 = s.graph.tanh(w2)?;
    let f = s.graph.scalar_mul(g2, f)?;
    s.graph.add(y, f)
}

/// Per-position log-probabilities of the fused decoder over `ids`, whose
/// separator sits at `sos_index`. When `trace` is given, it receives the
/// hidden states right after each gated block (before the host layer).
pub fn fused_log_probs<S: Real>(
    s: &mut Session<'_, S>,
    cfg: &FusedDecoderConfig,
    ids: &[usize],
    sos_index: usize,
    acoustic: Var,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    if ids.get(sos_index) != Some(&SOS) {
        return Err(Error::contract(format!("no <sos> at position {sos_index} of the decoder input")));
    }
    let fused = cfg.fused_range();
    decoder_log_probs(s, &cfg.lm, ids, |s, l, x| {
        if !fused.contains(&l) {
            return Ok(x);
        }
        let rows = s.graph.rows(x);
        let prefix = FusedDecoderConfig::block_prefix(l);
        let y = if sos_index == 0 {
            gated_xatt_ffn(s, &prefix, cfg.heads, x, acoustic, acoustic)?
        } else {
            let head = s.graph.slice_rows(x, 0, sos_index)?;
            let tail = s.graph.slice_rows(x, sos_index, rows)?;
            let tail = gated_xatt_ffn(s, &prefix, cfg.heads, tail, acoustic, acoustic)?;
            s.graph.concat_rows(&[head, tail])?
        };
        if let Some(t) = trace.as_deref_mut() {
            t.push(y);
        }
        Ok(y)
    })
}

/// Log-probabilities for every position of `[prompt] [<sos>] [prefix]`
/// given subsampled acoustic states.
pub fn fused_forward<S: Real>(
    prompt: &TokenSeq,
    prefix: &TokenSeq,
    acoustic: &Tensor<S>,
    params: &ParamStore<S>,
    cfg: &FusedDecoderConfig,
) -> Result<Tensor<S>> {
    Ok(fused_forward_traced(prompt, prefix, acoustic, params, cfg)?.0)
}

/// As [`fused_forward`], also returning the post-block hidden states of
/// every fused layer, bottom to top.
pub fn fused_forward_traced<S: Real>(
    prompt: &TokenSeq,
    prefix: &TokenSeq,
    acoustic: &Tensor<S>,
    params: &ParamStore<S>,
    cfg: &FusedDecoderConfig,
) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    let (ids, sos) = decoder_input(prompt, prefix)?;
    let mut s = Session::inference(params);
    let a = s.graph.constant(acoustic.clone());
    let mut trace = Vec::new();
    let lp = fused_log_probs(&mut s, cfg, &ids, sos, a, Some(&mut trace))?;
    let states = trace.iter().map(|&v| s.graph.value(v).clone()).collect();
    Ok((s.graph.value(lp).clone(), states))
}

/// Absolute gate activations of one fused layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateEntry {
    pub layer: usize,
    pub xattn: f64,
    pub ffn: f64,
}

/// `|tanh(w1)|`, `|tanh(w2)|` for every gated block found in `params`,
/// ordered by host layer.
pub fn gate_report<S: Real>(params: &ParamStore<S>) -> Result<Vec<GateEntry>> {
    let mut layers: Vec<usize> = params
        .paths()
        .filter_map(|p| p.strip_prefix("fusion/layer")?.strip_suffix("/w1")?.parse().ok())
        .collect();
    layers.sort_unstable();
    layers
        .into_iter()
        .map(|layer| {
            let prefix = FusedDecoderConfig::block_prefix(layer);
            let gate = |name: &str| -> Result<f64> {
                let w = params.get(&format!("{prefix}/{name}"))?.item()?;
                Ok(w.to_f64().unwrap_or(f64::NAN).tanh().abs())
            };
            Ok(GateEntry {
                layer,
                xattn: gate("w1")?,
                ffn: gate("w2")?,
            })
        })
        .collect()
}

/// `layer<TAB>abs_tanh_w1<TAB>abs_tanh_w2` lines, six decimals.
pub fn format_gate_report(entries: &[GateEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{:.6}\t{:.6}\n", e.layer, e.xattn, e.ffn))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toklm::lm_log_probs;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            feat_dim: 6,
            decoder: FusedDecoderConfig {
                lm: DecoderConfig {
                    layers: 3,
                    model_dim: 16,
                    heads: 2,
                    ffn_dim: 32,
                    max_len: 16,
                    max_prompt: 8,
                },
                fused_layers: 2,
                bottleneck: 8,
                heads: 2,
            },
            encoder: EncoderConfig {
                layers: 1,
                model_dim: 12,
                heads: 2,
                ffn_dim: 24,
                subsample_out_dim: 10,
            },
        }
    }

    fn acoustic(t: usize, d: usize, phase: f64) -> Tensor<f64> {
        Tensor::matrix(t, d, (0..t * d).map(|i| (i as f64 * 0.7 + phase).sin()).collect()).unwrap()
    }

    fn set_gate(p: &mut ParamStore<f64>, layer: usize, name: &str, v: f64) {
        *p.get_mut(&format!("fusion/layer{layer}/{name}")).unwrap() = Tensor::scalar(v);
    }

    fn seqs() -> (TokenSeq, TokenSeq) {
        (
            TokenSeq::prompt(vec![4, 5, 6]).unwrap(),
            TokenSeq::transcription(vec![7, 8]).unwrap(),
        )
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        c.decoder.fused_layers = 4;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.decoder.bottleneck = 16;
        assert!(c.validate().is_err());
        assert_eq!(tiny_cfg().decoder.fused_range(), 1..3);
    }

    #[test]
    fn zero_gates_reproduce_the_lm() {
        let cfg = tiny_cfg();
        let p: ParamStore<f64> = init_model(&cfg, 3).unwrap().cast();
        let (prompt, prefix) = seqs();
        let fused = fused_forward(&prompt, &prefix, &acoustic(5, 10, 0.0), &p, &cfg.decoder).unwrap();
        let (ids, _) = decoder_input(&prompt, &prefix).unwrap();
        let mut s = Session::inference(&p);
        let lm = lm_log_probs(&mut s, cfg.lm(), &ids).unwrap();
        assert_eq!(&fused, s.graph.value(lm));
    }

    #[test]
    fn prompt_rows_bypass_the_block() {
        let cfg = tiny_cfg();
        let mut p: ParamStore<f64> = init_model(&cfg, 3).unwrap().cast();
        for l in 1..3 {
            set_gate(&mut p, l, "w1", 0.8);
            set_gate(&mut p, l, "w2", -0.4);
        }
        let (prompt, prefix) = seqs();
        let (_, a) = fused_forward_traced(&prompt, &prefix, &acoustic(5, 10, 0.0), &p, &cfg.decoder).unwrap();
        let (_, b) = fused_forward_traced(&prompt, &prefix, &acoustic(3, 10, 2.0), &p, &cfg.decoder).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            for r in 0..3 {
                assert_eq!(x.row(r), y.row(r));
            }
            // the separator row already attends to the audio
            assert_ne!(x.row(3), y.row(3));
        }
    }

    #[test]
    fn missing_separator_is_a_contract_error() {
        let cfg = tiny_cfg();
        let p: ParamStore<f64> = init_model(&cfg, 3).unwrap().cast();
        let mut s = Session::inference(&p);
        let a = s.graph.constant(acoustic(2, 10, 0.0));
        let err = fused_log_probs(&mut s, &cfg.decoder, &[4, 5, 6], 1, a, None).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn shape_mismatch_is_an_argument_error() {
        let cfg = tiny_cfg();
        let p: ParamStore<f64> = init_model(&cfg, 3).unwrap().cast();
        let mut s = Session::inference(&p);
        let q = s.graph.constant(acoustic(3, 16, 0.0));
        let kv = s.graph.constant(acoustic(4, 9, 0.0));
        let err = gated_xatt_ffn(&mut s, "fusion/layer2", 2, q, kv, kv).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    // Straight-line f64 reimplementation of the gated block.
    fn mat(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        let (r, c) = t.dims2().unwrap();
        (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
    }

    fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    }

    fn norm(x: &[Vec<f64>], g: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
                let inv = 1.0 / (ms + 1e-5).sqrt();
                r.iter().zip(g).map(|(v, g)| v * inv * g).collect()
            })
            .collect()
    }

    fn reference_block(p: &ParamStore<f64>, prefix: &str, heads: usize, q: &[Vec<f64>], kv: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let w = |n: &str| mat(p.get(&format!("{prefix}/{n}")).unwrap());
        let g = |n: &str| p.get(&format!("{prefix}/{n}")).unwrap().data().to_vec();
        let t1 = p.get(&format!("{prefix}/w1")).unwrap().item().unwrap().tanh();
        let t2 = p.get(&format!("{prefix}/w2")).unwrap().item().unwrap().tanh();
        let h = norm(q, &g("xattn_norm"));
        let (qq, kk, vv) = (mm(&h, &w("xattn/wq")), mm(kv, &w("xattn/wk")), mm(kv, &w("xattn/wv")));
        let hd = qq[0].len() / heads;
        let mut ctx = vec![vec![0.0; qq[0].len()]; qq.len()];
        for hh in 0..heads {
            for i in 0..qq.len() {
                let sc: Vec<f64> = (0..kk.len())
                    .map(|j| (0..hd).map(|c| qq[i][hh * hd + c] * kk[j][hh * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = sc.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = sc.iter().map(|v| (v - m).exp()).sum();
                for j in 0..kk.len() {
                    let pj = (sc[j] - m).exp() / z;
                    for c in 0..hd {
                        ctx[i][hh * hd + c] += pj * vv[j][hh * hd + c];
                    }
                }
            }
        }
        let att = mm(&ctx, &w("xattn/wo"));
        let y: Vec<Vec<f64>> = q.iter().zip(&att).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + t1 * y).collect()).collect();
        let h = mm(&norm(&y, &g("ffn_norm")), &w("ffn/w1"));
        let h: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|v| v / (1.0 + (-v).exp())).collect()).collect();
        let f = mm(&h, &w("ffn/w2"));
        y.iter().zip(&f).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + t2 * y).collect()).collect()
    }

    #[test]
    fn block_matches_straight_line_reference() {
        let cfg = tiny_cfg();
        let mut p: ParamStore<f64> = init_model(&cfg, 9).unwrap().cast();
        set_gate(&mut p, 2, "w1", 0.3);
        set_gate(&mut p, 2, "w2", -1.1);
        let (q, kv) = (acoustic(4, 16, 0.5), acoustic(3, 10, 1.5));
        let mut s = Session::inference(&p);
        let (qv, kvv) = (s.graph.constant(q.clone()), s.graph.constant(kv.clone()));
        let out = gated_xatt_ffn(&mut s, "fusion/layer2", 2, qv, kvv, kvv).unwrap();
        let want = reference_block(&p, "fusion/layer2", 2, &mat(&q), &mat(&kv));
        for (got, want) in mat(s.graph.value(out)).iter().zip(&want) {
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gate_algebra() {
        let cfg = tiny_cfg();
        let mut p: ParamStore<f64> = init_model(&cfg, 9).unwrap().cast();
        set_gate(&mut p, 1, "w1", 0.5f64.atanh());
        let (q, kv) = (acoustic(2, 16, 0.1), acoustic(3, 10, 0.2));
        let mut s = Session::inference(&p);
        let (qv, kvv) = (s.graph.constant(q.clone()), s.graph.constant(kv));
        let out = gated_xatt_ffn(&mut s, "fusion/layer1", 2, qv, kvv, kvv).unwrap();
        let h = rms_norm(&mut s, qv, "fusion/layer1/xattn_norm").unwrap();
        let mha = attention(&mut s, "fusion/layer1/xattn", h, kvv, kvv, 2, false).unwrap();
        let out = s.graph.value(out).data().to_vec();
        let mha = s.graph.value(mha).data().to_vec();
        for ((o, m), x) in out.iter().zip(&mha).zip(q.data()) {
            assert!((o - (0.5 * m + x)).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_receive_gradient_at_zero() {
        let cfg = tiny_cfg();
        let p: ParamStore<f64> = init_model(&cfg, 4).unwrap().cast();
        let (prompt, prefix) = seqs();
        let (ids, sos) = decoder_input(&prompt, &prefix).unwrap();
        let mut s = Session::training(&p);
        let a = s.graph.constant(acoustic(4, 10, 0.3));
        let lp = fused_log_probs(&mut s, &cfg.decoder, &ids, sos, a, None).unwrap();
        let targets: Vec<usize> = (0..ids.len()).map(|i| ids.get(i + 1).copied().unwrap_or(2)).collect();
        let ignore: Vec<bool> = (0..ids.len()).map(|i| i < sos).collect();
        let loss = s.graph.nll_sum(lp, &targets, &ignore).unwrap();
        let grads = s.param_grads(&s.backward(loss).unwrap());
        let top = grads
            .iter()
            .filter(|(path, _)| path == "fusion/layer2/w1" || path == "fusion/layer2/w2")
            .any(|(_, g)| g[0] != 0.0);
        assert!(top);
    }

    #[test]
    fn report_examples() {
        let cfg = tiny_cfg();
        let mut p = init_model(&cfg, 1).unwrap();
        let r = gate_report(&p).unwrap();
        assert_eq!(format_gate_report(&r), "1\t0.000000\t0.000000\n2\t0.000000\t0.000000\n");
        *p.get_mut("fusion/layer2/w1").unwrap() = Tensor::scalar(-50.0);
        let r = gate_report(&p).unwrap();
        assert!(r[1].xattn <= 1.0 && r[1].xattn > 0.99);
        assert!(gate_report(&ParamStore::<f32>::new()).unwrap().is_empty());
    }
}
