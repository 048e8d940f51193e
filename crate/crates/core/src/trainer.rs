//! Phased training: language-model pretraining (phase 0) and the three
//! fusion phases, with AdamW, an inverse-square-root schedule, gradient
//! accumulation over single-utterance micro-batches and history prompts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{fused_log_probs, ModelConfig};
use crate::numcore::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Real, Session, Tensor, Var};
use crate::speech::{acoustic_states, mask_pattern, subsampled_len, SpecMaskConfig};
use crate::synthdata::{load_features, RecordIndex, UtteranceRecord};
use crate::toklm::{decoder_input, fit_prompt, lm_log_probs, DecoderConfig, TokenSeq, Vocab, EOS};

/// Learning rate at `step` (1-based): linear warmup to `peak`, then decay
/// proportional to `1/sqrt(step)`.
pub fn lr_at(step: usize, peak: f64, warmup: usize) -> Result<f64> {
    if step == 0 || warmup == 0 || !(peak > 0.0) {
        return Err(Error::arg("lr_at needs step >= 1, warmup >= 1 and a positive peak"));
    }
    Ok(if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (warmup as f64 / step as f64).sqrt()
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moments are created on first update
/// and only for parameters that are trainable at that time.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, path: &str) -> bool {
        self.moments.contains_key(path)
    }

    /// Updates every unfrozen parameter from the gradient stored on it.
    /// Parameters without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let frozen: Vec<String> = store.paths().filter(|p| store.is_frozen(p)).map(str::to_owned).collect();
        for (path, t) in store.iter_mut() {
            if frozen.iter().any(|f| f == path) {
                continue;
            }
            let Some(g) = t.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(path.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let gi = f64::from(g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + eps) + weight_decay * f64::from(*p);
                *p = (f64::from(*p) - lr * step) as f32;
            }
        }
        Ok(())
    }
}

/// One training phase. Phase 0 pretrains the language model on text;
/// phases 1-3 train the fused model on paired data.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSpec {
    pub phase: u8,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub trainable: Vec<String>,
    pub prompt_probability: f64,
    /// A prompt joins between one and this many preceding transcripts.
    pub history_utterances: usize,
    /// Share of prompted examples that get a keyword line (distinct words
    /// from the rest of the recording) instead of history.
    pub keyword_prompt_share: f64,
    /// Share of prompted examples whose prompt is built from a random other
    /// recording, so the model learns that a prompt may be uninformative.
    pub distractor_prompt_share: f64,
    pub unfreeze_last_lm_layer: bool,
}

fn default_warmup(steps: usize) -> usize {
    (steps / 10).max(1)
}

impl PhaseSpec {
    pub fn lm_pretrain(steps: usize, peak_lr: f64, prompt_probability: f64) -> Self {
        PhaseSpec {
            phase: 0,
            steps,
            peak_lr,
            warmup_steps: default_warmup(steps),
            trainable: vec!["lm/".into()],
            prompt_probability,
            history_utterances: 3,
            keyword_prompt_share: 0.5,
            distractor_prompt_share: 0.2,
            unfreeze_last_lm_layer: false,
        }
    }

    /// Subsampler and gated blocks only.
    pub fn phase1(steps: usize, peak_lr: f64) -> Self {
        PhaseSpec {
            phase: 1,
            steps,
            peak_lr,
            warmup_steps: default_warmup(steps),
            trainable: vec!["subsampler/".into(), "fusion/".into()],
            prompt_probability: 0.0,
            history_utterances: 1,
            keyword_prompt_share: 0.0,
            distractor_prompt_share: 0.0,
            unfreeze_last_lm_layer: false,
        }
    }

    /// Phase 1 plus the acoustic encoder.
    pub fn phase2(steps: usize, peak_lr: f64) -> Self {
        PhaseSpec {
            phase: 2,
            trainable: vec!["subsampler/".into(), "fusion/".into(), "encoder/".into()],
            ..Self::phase1(steps, peak_lr)
        }
    }

    /// Phase 2 with history prompts, optionally also tuning the top LM layer.
    pub fn phase3(steps: usize, peak_lr: f64, lm: &DecoderConfig, unfreeze_last_lm_layer: bool) -> Self {
        let mut trainable = Self::phase2(steps, peak_lr).trainable;
        if unfreeze_last_lm_layer {
            trainable.push(format!("{}/", DecoderConfig::layer_prefix(lm.layers - 1)));
        }
        PhaseSpec {
            phase: 3,
            trainable,
            prompt_probability: 0.8,
            unfreeze_last_lm_layer,
            ..Self::phase1(steps, peak_lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase > 3 {
            return Err(Error::arg(format!("unknown phase {}", self.phase)));
        }
        if !(0.0..=1.0).contains(&self.prompt_probability) {
            return Err(Error::arg("prompt_probability must lie in [0, 1]"));
        }
        if matches!(self.phase, 1 | 2) && self.prompt_probability != 0.0 {
            return Err(Error::contract(format!("phase {} trains without prompts", self.phase)));
        }
        if self.unfreeze_last_lm_layer && self.phase != 3 {
            return Err(Error::contract("only phase 3 may unfreeze the top LM layer"));
        }
        if self.steps > 0 && (self.warmup_steps == 0 || !(self.peak_lr > 0.0)) {
            return Err(Error::arg("warmup and peak_lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.keyword_prompt_share) {
            return Err(Error::arg("keyword_prompt_share must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.distractor_prompt_share) {
            return Err(Error::arg("distractor_prompt_share must lie in [0, 1]"));
        }
        if self.history_utterances == 0 {
            return Err(Error::arg("history_utterances must be at least 1"));
        }
        if self.trainable.is_empty() {
            return Err(Error::arg("phase has no trainable parameters"));
        }
        Ok(())
    }
}

/// Everything tunable about a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub accumulation: usize,
    pub clip_norm: Option<f64>,
    pub adamw: AdamWConfig,
    pub mask: SpecMaskConfig,
    pub phases: [PhaseSpec; 4],
}

impl TrainConfig {
    /// Toy-scale defaults for a corpus with the given vocabulary and
    /// feature sizes.
    pub fn new(vocab_size: usize, feat_dim: usize) -> Self {
        let model = ModelConfig::new(vocab_size, feat_dim);
        let phase3 = PhaseSpec::phase3(1500, 1e-3, model.lm(), false);
        TrainConfig {
            accumulation: 8,
            clip_norm: Some(1.0),
            adamw: AdamWConfig::default(),
            mask: SpecMaskConfig::default(),
            phases: [
                PhaseSpec::lm_pretrain(4000, 3e-3, 0.7),
                PhaseSpec::phase1(5000, 2e-3),
                PhaseSpec::phase2(5000, 2e-3),
                phase3,
            ],
            model,
        }
    }

    pub fn phase(&self, n: u8) -> Result<&PhaseSpec> {
        self.phases
            .get(usize::from(n))
            .ok_or_else(|| Error::arg(format!("unknown phase {n}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.accumulation == 0 {
            return Err(Error::arg("accumulation must be at least 1"));
        }
        for p in &self.phases {
            p.validate()?;
        }
        Ok(())
    }

    /// `key = value` lines covering every field.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.vocab_size", m.vocab_size.to_string());
        kv("model.feat_dim", m.feat_dim.to_string());
        kv("lm.layers", m.lm().layers.to_string());
        kv("lm.model_dim", m.lm().model_dim.to_string());
        kv("lm.heads", m.lm().heads.to_string());
        kv("lm.ffn_dim", m.lm().ffn_dim.to_string());
        kv("lm.max_len", m.lm().max_len.to_string());
        kv("lm.max_prompt", m.lm().max_prompt.to_string());
        kv("fusion.layers", m.decoder.fused_layers.to_string());
        kv("fusion.bottleneck", m.decoder.bottleneck.to_string());
        kv("fusion.heads", m.decoder.heads.to_string());
        kv("encoder.layers", m.encoder.layers.to_string());
        kv("encoder.model_dim", m.encoder.model_dim.to_string());
        kv("encoder.heads", m.encoder.heads.to_string());
        kv("encoder.ffn_dim", m.encoder.ffn_dim.to_string());
        kv("encoder.subsample_out_dim", m.encoder.subsample_out_dim.to_string());
        kv("train.accumulation", self.accumulation.to_string());
        kv("train.clip_norm", self.clip_norm.map_or("none".into(), |c| c.to_string()));
        kv("adamw.beta1", self.adamw.beta1.to_string());
        kv("adamw.beta2", self.adamw.beta2.to_string());
        kv("adamw.eps", self.adamw.eps.to_string());
        kv("adamw.weight_decay", self.adamw.weight_decay.to_string());
        kv("mask.time_masks", self.mask.time_masks.to_string());
        kv("mask.time_width", self.mask.time_width.to_string());
        kv("mask.feat_masks", self.mask.feat_masks.to_string());
        kv("mask.feat_width", self.mask.feat_width.to_string());
        for p in &self.phases {
            let n = p.phase;
            kv(&format!("phase{n}.steps"), p.steps.to_string());
            kv(&format!("phase{n}.peak_lr"), p.peak_lr.to_string());
            kv(&format!("phase{n}.warmup_steps"), p.warmup_steps.to_string());
            kv(&format!("phase{n}.prompt_probability"), p.prompt_probability.to_string());
            kv(&format!("phase{n}.history_utterances"), p.history_utterances.to_string());
            kv(&format!("phase{n}.keyword_prompt_share"), p.keyword_prompt_share.to_string());
            kv(&format!("phase{n}.distractor_prompt_share"), p.distractor_prompt_share.to_string());
            if n == 3 {
                kv("phase3.unfreeze_last_lm_layer", p.unfreeze_last_lm_layer.to_string());
            }
        }
        s
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown keys are rejected. A phase's warmup
    /// follows its step count (10%) unless set explicitly.
    pub fn apply_text(mut self, text: &str, origin: &str) -> Result<Self> {
        let mut warmup_set = [false; 4];
        let mut steps_set = [false; 4];
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::parse(origin, n + 1, m);
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let us = || value.parse::<usize>().map_err(|_| err(format!("{key}: expected an integer, got {value:?}")));
            let fl = || match value.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("{key}: expected a number, got {value:?}"))),
            };
            let m = &mut self.model;
            match key {
                "model.vocab_size" => m.vocab_size = us()?,
                "model.feat_dim" => m.feat_dim = us()?,
                "lm.layers" => m.decoder.lm.layers = us()?,
                "lm.model_dim" => m.decoder.lm.model_dim = us()?,
                "lm.heads" => m.decoder.lm.heads = us()?,
                "lm.ffn_dim" => m.decoder.lm.ffn_dim = us()?,
                "lm.max_len" => m.decoder.lm.max_len = us()?,
                "lm.max_prompt" => m.decoder.lm.max_prompt = us()?,
                "fusion.layers" => m.decoder.fused_layers = us()?,
                "fusion.bottleneck" => m.decoder.bottleneck = us()?,
                "fusion.heads" => m.decoder.heads = us()?,
                "encoder.layers" => m.encoder.layers = us()?,
                "encoder.model_dim" => m.encoder.model_dim = us()?,
                "encoder.heads" => m.encoder.heads = us()?,
                "encoder.ffn_dim" => m.encoder.ffn_dim = us()?,
                "encoder.subsample_out_dim" => m.encoder.subsample_out_dim = us()?,
                "train.accumulation" => self.accumulation = us()?,
                "train.clip_norm" => self.clip_norm = if value == "none" { None } else { Some(fl()?) },
                "adamw.beta1" => self.adamw.beta1 = fl()?,
                "adamw.beta2" => self.adamw.beta2 = fl()?,
                "adamw.eps" => self.adamw.eps = fl()?,
                "adamw.weight_decay" => self.adamw.weight_decay = fl()?,
                "mask.time_masks" => self.mask.time_masks = us()?,
                "mask.time_width" => self.mask.time_width = us()?,
                "mask.feat_masks" => self.mask.feat_masks = us()?,
                "mask.feat_width" => self.mask.feat_width = us()?,
                _ => {
                    let (phase, field) = key
                        .strip_prefix("phase")
                        .and_then(|r| r.split_once('.'))
                        .and_then(|(n, f)| Some((n.parse::<usize>().ok().filter(|&n| n < 4)?, f)))
                        .ok_or_else(|| err(format!("unknown key {key:?}")))?;
                    let p = &mut self.phases[phase];
                    match field {
                        "steps" => {
                            p.steps = us()?;
                            steps_set[phase] = true;
                        }
                        "peak_lr" => p.peak_lr = fl()?,
                        "warmup_steps" => {
                            p.warmup_steps = us()?;
                            warmup_set[phase] = true;
                        }
                        "prompt_probability" => p.prompt_probability = fl()?,
                        "history_utterances" => p.history_utterances = us()?,
                        "keyword_prompt_share" => p.keyword_prompt_share = fl()?,
                        "distractor_prompt_share" => p.distractor_prompt_share = fl()?,
                        "unfreeze_last_lm_layer" if phase == 3 => {
                            p.unfreeze_last_lm_layer = value
                                .parse()
                                .map_err(|_| err(format!("{key}: expected true or false, got {value:?}")))?
                        }
                        _ => return Err(err(format!("unknown key {key:?}"))),
                    }
                }
            }
        }
        for i in 0..4 {
            if steps_set[i] && !warmup_set[i] {
                self.phases[i].warmup_steps = default_warmup(self.phases[i].steps);
            }
        }
        // the top-layer prefix depends on the (possibly changed) depth
        let p3 = &self.phases[3];
        let rebuilt = PhaseSpec::phase3(p3.steps, p3.peak_lr, self.model.lm(), p3.unfreeze_last_lm_layer);
        self.phases[3].trainable = rebuilt.trainable;
        self.validate()?;
        Ok(self)
    }

    pub fn read(path: impl AsRef<Path>, base: Self) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        base.apply_text(&text, &path.display().to_string())
    }
}

/// Training utterances with token ids and (for paired data) features.
pub struct TrainData {
    records: Vec<UtteranceRecord>,
    transcripts: Vec<Vec<usize>>,
    features: Vec<Option<Tensor<f32>>>,
    previous: Vec<Option<usize>>,
    /// Per utterance, the other utterances of its recording.
    siblings: Vec<Vec<usize>>,
    /// Number of recordings each token id occurs in.
    document_frequency: Vec<usize>,
}

impl TrainData {
    /// Text-only data (features are not loaded).
    pub fn text(records: Vec<UtteranceRecord>, vocab: &Vocab) -> Result<Self> {
        let n = records.len();
        Self::build(records, vec![None; n], vocab)
    }

    /// Paired data; feature paths resolve against `base`.
    pub fn paired(records: Vec<UtteranceRecord>, base: &Path, vocab: &Vocab) -> Result<Self> {
        let features = records
            .iter()
            .map(|r| load_features(base, r).map(|f| Some(f.frames().clone())))
            .collect::<Result<Vec<_>>>()?;
        Self::build(records, features, vocab)
    }

    fn build(records: Vec<UtteranceRecord>, features: Vec<Option<Tensor<f32>>>, vocab: &Vocab) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::data("no training utterances"));
        }
        let transcripts: Vec<Vec<usize>> = records.iter().map(|r| vocab.encode(&r.transcript)).collect();
        let pos: BTreeMap<(&str, usize), usize> = records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.recording_id.as_str(), r.utterance_index), i))
            .collect();
        let previous = records
            .iter()
            .map(|r| {
                let prev = r.utterance_index.checked_sub(1)?;
                pos.get(&(r.recording_id.as_str(), prev)).copied()
            })
            .collect();
        let mut by_recording: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_recording.entry(r.recording_id.as_str()).or_default().push(i);
        }
        let siblings = records
            .iter()
            .enumerate()
            .map(|(i, r)| by_recording[r.recording_id.as_str()].iter().copied().filter(|&j| j != i).collect())
            .collect();
        let mut document_frequency = vec![0; vocab.len()];
        for members in by_recording.values() {
            let mut seen: Vec<usize> = members.iter().flat_map(|&i| transcripts[i].iter().copied()).collect();
            seen.sort_unstable();
            seen.dedup();
            for w in seen {
                document_frequency[w] += 1;
            }
        }
        Ok(TrainData {
            transcripts,
            features,
            previous,
            siblings,
            document_frequency,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    /// History prompt for utterance `i`; with `max_history > 1` a uniform
    /// number of preceding transcripts (as many as exist) is joined, oldest
    /// first.
    fn prompt(&self, i: usize, phase: &PhaseSpec, rng: &mut impl Rng) -> Result<TokenSeq> {
        let (p, share) = (phase.prompt_probability, phase.keyword_prompt_share);
        let distract = phase.distractor_prompt_share;
        if (share > 0.0 || distract > 0.0) && p > 0.0 {
            if !rng.random_bool(p) {
                return Ok(TokenSeq::empty_prompt());
            }
            let source = if distract > 0.0 && rng.random_bool(distract) {
                self.stranger(i, rng)
            } else {
                i
            };
            if share > 0.0 && rng.random_bool(share) {
                return self.keyword_prompt(source, rng);
            }
            return self.history(source, 1.0, phase.history_utterances, rng);
        }
        self.history(i, p, phase.history_utterances, rng)
    }

    /// A uniformly drawn utterance from a different recording (`i` itself
    /// when there is no other recording).
    fn stranger(&self, i: usize, rng: &mut impl Rng) -> usize {
        let others = self.len() - 1 - self.siblings[i].len();
        if others == 0 {
            return i;
        }
        let mut k = rng.random_range(0..others);
        let own = &self.records[i].recording_id;
        for (j, r) in self.records.iter().enumerate() {
            if &r.recording_id != own {
                if k == 0 {
                    return j;
                }
                k -= 1;
            }
        }
        unreachable!("counted {others} utterances of other recordings")
    }

    /// Keywords of the recording: the 4 to 16 rarest (by recording
    /// frequency) distinct words of its other utterances, in random order.
    fn keyword_prompt(&self, i: usize, rng: &mut impl Rng) -> Result<TokenSeq> {
        let mut pool: Vec<usize> = self.siblings[i].iter().flat_map(|&j| self.transcripts[j].iter().copied()).collect();
        pool.sort_unstable();
        pool.dedup();
        if pool.is_empty() {
            return Ok(TokenSeq::empty_prompt());
        }
        pool.sort_by_key(|&w| (self.document_frequency[w], w));
        let k = rng.random_range(4.min(pool.len())..=16.min(pool.len()));
        pool.truncate(k);
        pool.shuffle(rng);
        TokenSeq::prompt(pool)
    }

    fn history(&self, i: usize, p: f64, max_history: usize, rng: &mut impl Rng) -> Result<TokenSeq> {
        let prev = self.previous[i].map(|j| self.transcripts[j].as_slice());
        let first = history_prompt(self.records[i].utterance_index, prev, p, rng)?;
        if first.is_empty() || max_history == 1 {
            return Ok(first);
        }
        let want = rng.random_range(1..=max_history);
        let mut chain = Vec::new();
        let mut at = self.previous[i];
        while let Some(j) = at.filter(|_| chain.len() < want) {
            chain.push(j);
            at = self.previous[j];
        }
        let ids = chain.iter().rev().flat_map(|&j| self.transcripts[j].iter().copied()).collect();
        TokenSeq::prompt(ids)
    }
}

fn history_prompt(utterance_index: usize, previous: Option<&[usize]>, p: f64, rng: &mut impl Rng) -> Result<TokenSeq> {
    if utterance_index == 0 || p <= 0.0 {
        return Ok(TokenSeq::empty_prompt());
    }
    match previous {
        Some(prev) if rng.random_bool(p.min(1.0)) => TokenSeq::prompt(prev.to_vec()),
        _ => Ok(TokenSeq::empty_prompt()),
    }
}

/// With probability `p` (and only past the first utterance) the previous
/// utterance's transcript as a prompt; otherwise an empty prompt.
pub fn sample_prompt(
    record: &UtteranceRecord,
    records: &RecordIndex<'_>,
    p: f64,
    rng: &mut impl Rng,
    vocab: &Vocab,
) -> Result<TokenSeq> {
    let prev = records.previous(record).map(|r| vocab.encode(&r.transcript));
    history_prompt(record.utterance_index, prev.as_deref(), p, rng)
}

/// Next-token targets for `ids` with the separator at `sos`: row `i`
/// predicts `ids[i+1]`, the last row `<eos>`; rows before `sos` are masked.
pub fn loss_targets(ids: &[usize], sos: usize) -> (Vec<usize>, Vec<bool>) {
    let targets = (0..ids.len()).map(|i| ids.get(i + 1).copied().unwrap_or(EOS)).collect();
    let ignore = (0..ids.len()).map(|i| i < sos).collect();
    (targets, ignore)
}

/// Summed negative log-likelihood of `transcript` + `<eos>` and the number
/// of scored tokens. With `features` the fused model is used (`keep`
/// masks encoder states); without, the plain language model.
pub fn sequence_loss<S: Real>(
    s: &mut Session<'_, S>,
    model: &ModelConfig,
    prompt: &TokenSeq,
    transcript: &[usize],
    features: Option<&Tensor<S>>,
    keep: Option<&Tensor<S>>,
) -> Result<(Var, usize)> {
    let prompt = fit_prompt(prompt, transcript.len(), model.lm())?;
    let (ids, sos) = decoder_input(&prompt, &TokenSeq::transcription(transcript.to_vec())?)?;
    let lp = match features {
        Some(f) => {
            let a = acoustic_states(s, &model.encoder, f, keep)?;
            fused_log_probs(s, &model.decoder, &ids, sos, a, None)?
        }
        None => lm_log_probs(s, model.lm(), &ids)?,
    };
    let (targets, ignore) = loss_targets(&ids, sos);
    let loss = s.graph.nll_sum(lp, &targets, &ignore)?;
    Ok((loss, ids.len() - sos))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub phase: u8,
    pub lr: f64,
    pub loss: f64,
}

pub fn format_loss_log(log: &[LossRecord]) -> String {
    let mut s = String::from("step,phase,lr,loss\n");
    for r in log {
        let _ = writeln!(s, "{},{},{:.9e},{:.9}", r.step, r.phase, r.lr, r.loss);
    }
    s
}

/// Per-micro-batch gradient contribution.
struct Micro {
    loss: f64,
    tokens: usize,
    grads: Vec<(String, Vec<f32>)>,
}

fn micro_step(
    params: &ParamStore<f32>,
    cfg: &TrainConfig,
    phase: &PhaseSpec,
    data: &TrainData,
    example: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Micro> {
    let prompt = data.prompt(example, phase, rng)?;
    let transcript = &data.transcripts[example];
    let mut s = Session::training(params);
    let (loss, tokens) = if phase.phase == 0 {
        sequence_loss(&mut s, &cfg.model, &prompt, transcript, None, None)?
    } else {
        let f = data.features[example]
            .as_ref()
            .ok_or_else(|| Error::data(format!("utterance {} has no features", data.records[example].id())))?;
        let keep = if cfg.mask.is_noop() {
            None
        } else {
            Some(mask_pattern::<f32>(f.shape()[0], cfg.model.encoder.model_dim, &cfg.mask, rng)?)
        };
        subsampled_len(f.shape()[0])?;
        sequence_loss(&mut s, &cfg.model, &prompt, transcript, Some(f), keep.as_ref())?
    };
    let value = f64::from(s.graph.value(loss).item()?);
    let grads = s.param_grads(&s.backward(loss)?);
    Ok(Micro {
        loss: value,
        tokens,
        grads,
    })
}

/// Outcome of [`train_phase`].
#[derive(Clone, Debug)]
pub struct PhaseReport {
    pub log: Vec<LossRecord>,
    pub trainable_params: usize,
}

/// Runs one phase in place on `params`. Micro-batches of one utterance are
/// drawn from a seeded shuffle; the step loss is the summed token NLL over
/// `cfg.accumulation` micro-batches divided by their token count. Frozen
/// parameters are verified to be untouched afterwards.
pub fn train_phase(
    phase: &PhaseSpec,
    data: &TrainData,
    params: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PhaseReport> {
    phase.validate()?;
    cfg.validate()?;
    params.set_trainable(&phase.trainable);
    let trainable_params = params.trainable_count();
    if trainable_params == 0 {
        return Err(Error::contract(format!("phase {} matches no parameters", phase.phase)));
    }
    let frozen_before: Vec<(String, Tensor<f32>)> = params
        .iter()
        .filter(|(p, _)| params.is_frozen(p))
        .map(|(p, t)| (p.to_string(), t.clone()))
        .collect();

    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut opt = AdamW::new(cfg.adamw);
    let mut log = Vec::with_capacity(phase.steps);
    for step in 1..=phase.steps {
        let mut picks = Vec::with_capacity(cfg.accumulation);
        for _ in 0..cfg.accumulation {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        let base = ((step - 1) * cfg.accumulation) as u64;
        let snapshot: &ParamStore<f32> = params;
        let micros: Vec<Result<Micro>> = picks
            .par_iter()
            .enumerate()
            .map(|(k, &ex)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(base + k as u64 + 1);
                micro_step(snapshot, cfg, phase, data, ex, &mut rng)
            })
            .collect();
        params.zero_grads();
        let (mut loss, mut tokens) = (0.0, 0usize);
        for m in micros {
            let m = m?;
            loss += m.loss;
            tokens += m.tokens;
            params.accumulate(&m.grads)?;
        }
        scale_grads(params, 1.0 / tokens as f64, cfg.clip_norm);
        let lr = lr_at(step, phase.peak_lr, phase.warmup_steps)?;
        opt.update(params, lr)?;
        log.push(LossRecord {
            step,
            phase: phase.phase,
            lr,
            loss: loss / tokens as f64,
        });
    }
    params.zero_grads();

    for (path, before) in &frozen_before {
        let after = params.get(path)?;
        let same = after.shape() == before.shape()
            && after.data().iter().zip(before.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::contract(format!("frozen parameter {path} changed during phase {}", phase.phase)));
        }
    }
    Ok(PhaseReport { log, trainable_params })
}

/// Averages accumulated gradients and applies global-norm clipping.
fn scale_grads(params: &mut ParamStore<f32>, scale: f64, clip: Option<f64>) {
    let mut norm2 = 0.0f64;
    for (_, t) in params.iter() {
        if let Some(g) = t.grad() {
            norm2 += g.iter().map(|&v| (f64::from(v) * scale).powi(2)).sum::<f64>();
        }
    }
    let norm = norm2.sqrt();
    let factor = match clip {
        Some(c) if norm > c => scale * c / norm,
        _ => scale,
    };
    for (_, t) in params.iter_mut() {
        if let Some(g) = t.grad_mut() {
            for v in g.iter_mut() {
                *v = (f64::from(*v) * factor) as f32;
            }
        }
    }
}

/// Seed for phase `phase` of a run started with `seed`.
pub fn phase_seed(seed: u64, phase: u8) -> u64 {
    seed.wrapping_mul(10).wrapping_add(u64::from(phase))
}

/// Gradient check of the phase-3 loss (unfrozen top LM layer included) in
/// double precision on a random utterance, with every gate set to `gate`
/// so that no branch is switched off. `w1`/`w2` of each block are always
/// among the checked coordinates.
pub fn phase3_grad_check(model: &ModelConfig, gate: f64, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let mut store = crate::fusion::init_model(model, seed)?;
    let mut include = Vec::new();
    for layer in model.decoder.fused_range() {
        for g in ["w1", "w2"] {
            let path = format!("{}/{g}", crate::fusion::FusedDecoderConfig::block_prefix(layer));
            *store.get_mut(&path)? = Tensor::scalar(gate as f32);
            include.push(path);
        }
    }
    let mut store: ParamStore<f64> = store.cast();
    store.set_trainable(&PhaseSpec::phase3(1, 1e-3, model.lm(), true).trainable);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let frames = 24;
    let feats = Tensor::matrix(
        frames,
        model.feat_dim,
        (0..frames * model.feat_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let word = |rng: &mut ChaCha8Rng| rng.random_range(crate::toklm::SPECIALS.len()..model.vocab_size);
    let prompt = TokenSeq::prompt((0..4).map(|_| word(&mut rng)).collect())?;
    let transcript: Vec<usize> = (0..5).map(|_| word(&mut rng)).collect();
    let opts = GradCheckOptions {
        samples,
        include,
        seed,
        ..Default::default()
    };
    grad_check(
        |s| Ok(sequence_loss(s, model, &prompt, &transcript, Some(&feats), None)?.0),
        &store,
        &opts,
    )
}
