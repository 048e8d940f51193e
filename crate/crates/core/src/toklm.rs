//! Word-level vocabulary and the causal decoder language model.
//!
//! Inputs are laid out as `[prompt tokens] [<sos>] [transcription tokens]`.
//! The same layout is used for scoring hypotheses and, with acoustic
//! conditioning added, by the fused decoder.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{init_block, init_filled, init_linear, init_matrix, rms_norm, transformer_block};
use crate::numcore::{ParamStore, Real, Session, Tensor, Var};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Closed word vocabulary; ids `0..4` are `<pad> <sos> <eos> <unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from words; the specials are prepended.
    pub fn from_words<I, W>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = W>,
        W: Into<String>,
    {
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::data(format!("vocabulary line {} must be {s}", i + 1)));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::data(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-special words in id order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens[SPECIALS.len()..].iter().map(String::as_str)
    }

    /// Maps whitespace-separated words to ids; unknown words become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Space-joined words, with `<eos>` and padding dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != EOS && i != PAD)
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(|l| l.trim().to_string()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Transcription,
}

/// Token ids with their role in the decoder input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
    role: Role,
}

impl TokenSeq {
    pub fn prompt(ids: Vec<usize>) -> Result<Self> {
        if ids.iter().any(|&i| i == EOS || i == SOS) {
            return Err(Error::contract("prompt may not contain <sos> or <eos>"));
        }
        Ok(TokenSeq {
            ids,
            role: Role::Prompt,
        })
    }

    pub fn transcription(ids: Vec<usize>) -> Result<Self> {
        if ids.contains(&SOS) {
            return Err(Error::contract("<sos> inside a transcription"));
        }
        Ok(TokenSeq {
            ids,
            role: Role::Transcription,
        })
    }

    pub fn empty_prompt() -> Self {
        TokenSeq {
            ids: Vec::new(),
            role: Role::Prompt,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&i| i >= vocab_size) {
            Some(i) => Err(Error::arg(format!("token id {i} outside vocabulary of {vocab_size}"))),
            None => Ok(()),
        }
    }
}

/// Tokenises normalised text.
pub fn tokenize(text: &str, vocab: &Vocab, role: Role) -> Result<TokenSeq> {
    let ids = vocab.encode(text);
    match role {
        Role::Prompt => TokenSeq::prompt(ids),
        Role::Transcription => TokenSeq::transcription(ids),
    }
}

/// Shape of the causal decoder stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Positional-table size.
    pub max_len: usize,
    /// Longest prompt; `<sos>` always sits at this position, so the
    /// transcription never moves with the prompt length.
    pub max_prompt: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 4,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            max_len: 48,
            max_prompt: 32,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return Err(Error::arg("decoder dimensions must be positive"));
        }
        if self.max_prompt >= self.max_len {
            return Err(Error::arg("max_prompt must leave room for the transcription"));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::arg(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Tokens that fit after `<sos>`.
    pub fn transcription_room(&self) -> usize {
        self.max_len - self.max_prompt - 1
    }

    /// Path prefix of decoder layer `l`.
    pub fn layer_prefix(l: usize) -> String {
        format!("lm/layer{l}")
    }
}

pub(crate) fn init_lm_params(
    store: &mut ParamStore<f32>,
    rng: &mut impl Rng,
    cfg: &DecoderConfig,
    vocab_size: usize,
) -> Result<()> {
    let d = cfg.model_dim;
    init_matrix(store, rng, "lm/tok_embed".into(), vocab_size, d, 1.0)?;
    init_matrix(store, rng, "lm/pos_embed".into(), cfg.max_len, d, 0.1)?;
    for l in 0..cfg.layers {
        init_block(store, rng, &DecoderConfig::layer_prefix(l), d, cfg.ffn_dim)?;
    }
    init_filled(store, "lm/final_norm".into(), &[d], 1.0)?;
    init_linear(store, rng, "lm/head".into(), d, vocab_size)
}

/// Standalone language-model parameters.
pub fn init_lm(cfg: &DecoderConfig, vocab_size: usize, seed: u64) -> Result<ParamStore<f32>> {
    use rand::SeedableRng;
    cfg.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_lm_params(&mut store, &mut rng, cfg, vocab_size)?;
    Ok(store)
}

/// Builds `[prompt] [<sos>] [prefix]` and returns it with the separator index.
pub fn decoder_input(prompt: &TokenSeq, prefix: &TokenSeq) -> Result<(Vec<usize>, usize)> {
    if prompt.role() != Role::Prompt || prefix.role() != Role::Transcription {
        return Err(Error::contract("decoder input needs a prompt and a transcription"));
    }
    let mut ids = Vec::with_capacity(prompt.len() + 1 + prefix.len());
    ids.extend_from_slice(prompt.ids());
    ids.push(SOS);
    ids.extend_from_slice(prefix.ids());
    Ok((ids, prompt.len()))
}

/// Keeps the newest `max_prompt` prompt tokens, after checking that
/// `after_sos` tokens fit behind the separator.
pub fn fit_prompt(prompt: &TokenSeq, after_sos: usize, cfg: &DecoderConfig) -> Result<TokenSeq> {
    if after_sos > cfg.transcription_room() {
        return Err(Error::data(format!(
            "{after_sos} tokens after <sos> exceed the decoder's room of {}",
            cfg.transcription_room()
        )));
    }
    if prompt.len() <= cfg.max_prompt {
        return Ok(prompt.clone());
    }
    TokenSeq::prompt(prompt.ids()[prompt.len() - cfg.max_prompt..].to_vec())
}

/// Runs the decoder stack over `ids`, calling `before_layer(session, l, x)`
/// ahead of each layer `l`, and returns per-position log-probabilities.
pub(crate) fn decoder_log_probs<S: Real>(
    s: &mut Session<'_, S>,
    cfg: &DecoderConfig,
    ids: &[usize],
    mut before_layer: impl FnMut(&mut Session<'_, S>, usize, Var) -> Result<Var>,
) -> Result<Var> {
    let sos = ids
        .iter()
        .position(|&t| t == SOS)
        .ok_or_else(|| Error::contract("decoder input without <sos>"))?;
    if sos > cfg.max_prompt || ids.len() - sos > cfg.max_len - cfg.max_prompt {
        return Err(Error::arg(format!(
            "{sos} prompt tokens and {} after <sos> exceed the decoder's {}/{} positions",
            ids.len() - sos - 1,
            cfg.max_prompt,
            cfg.transcription_room()
        )));
    }
    let tok = s.param("lm/tok_embed")?;
    let pos = s.param("lm/pos_embed")?;
    let x = s.graph.embedding(tok, ids)?;
    // prompts are right-aligned against a fixed <sos> slot
    let positions: Vec<usize> = (0..ids.len()).map(|i| i + cfg.max_prompt - sos).collect();
    let p = s.graph.embedding(pos, &positions)?;
    let mut x = s.graph.add(x, p)?;
    for l in 0..cfg.layers {
        x = before_layer(s, l, x)?;
        x = transformer_block(s, &DecoderConfig::layer_prefix(l), x, cfg.heads, true)?;
    }
    let x = rms_norm(s, x, "lm/final_norm")?;
    let head = s.param("lm/head")?;
    let logits = s.graph.matmul(x, head)?;
    s.graph.log_softmax_rows(logits)
}

/// Log-probabilities at every position of `ids` under the plain LM.
pub fn lm_log_probs<S: Real>(s: &mut Session<'_, S>, cfg: &DecoderConfig, ids: &[usize]) -> Result<Var> {
    decoder_log_probs(s, cfg, ids, |_, _, x| Ok(x))
}

/// Next-token log-probabilities after `[prompt] [<sos>] [prefix]`.
pub fn lm_forward<S: Real>(
    prompt: &TokenSeq,
    prefix: &TokenSeq,
    params: &ParamStore<S>,
    cfg: &DecoderConfig,
) -> Result<Tensor<S>> {
    let (ids, _) = decoder_input(prompt, prefix)?;
    let mut s = Session::inference(params);
    let lp = lm_log_probs(&mut s, cfg, &ids)?;
    let v = s.graph.value(lp);
    let (rows, cols) = v.dims2()?;
    Tensor::new(vec![cols], v.row(rows - 1).to_vec())
}

/// Sum of `log P(w_i | w_<i, prompt)` over the hypothesis words and the
/// closing `<eos>`; prompt and separator positions are not scored.
pub fn lm_score<S: Real>(
    hypothesis: &TokenSeq,
    prompt: &TokenSeq,
    params: &ParamStore<S>,
    cfg: &DecoderConfig,
) -> Result<f64> {
    let mut targets: Vec<usize> = hypothesis.ids().iter().copied().filter(|&i| i != EOS).collect();
    targets.push(EOS);
    continuation_score(prompt, &TokenSeq::transcription(Vec::new())?, &targets, params, cfg)
}

/// Log-probability of `continuation` following `[prompt] [<sos>] [context]`.
/// An `<eos>` may only appear as the last continuation token.
pub fn continuation_score<S: Real>(
    prompt: &TokenSeq,
    context: &TokenSeq,
    continuation: &[usize],
    params: &ParamStore<S>,
    cfg: &DecoderConfig,
) -> Result<f64> {
    if continuation.is_empty() {
        return Ok(0.0);
    }
    let (last, body) = continuation.split_last().expect("non-empty");
    if body.contains(&EOS) {
        return Err(Error::contract("<eos> before the end of a continuation"));
    }
    let mut ids_seq: Vec<usize> = context.ids().to_vec();
    ids_seq.extend_from_slice(body);
    let (ids, sos) = decoder_input(prompt, &TokenSeq::transcription(ids_seq)?)?;
    let mut s = Session::inference(params);
    let lp = lm_log_probs(&mut s, cfg, &ids)?;
    let v = s.graph.value(lp);
    let start = sos + context.len();
    Ok(body
        .iter()
        .chain(std::iter::once(last))
        .enumerate()
        .map(|(k, &t)| v.row(start + k)[t].to_f64().unwrap_or(f64::NAN))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ops;

    fn tiny() -> (DecoderConfig, ParamStore<f64>) {
        let cfg = DecoderConfig {
            layers: 2,
            model_dim: 16,
            heads: 2,
            ffn_dim: 32,
            max_len: 12,
            max_prompt: 6,
        };
        (cfg.clone(), init_lm(&cfg, 10, 5).unwrap().cast())
    }

    fn vocab_ab() -> Vocab {
        Vocab::from_words(["a", "b"]).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab_ab();
        assert_eq!(tokenize("a b", &v, Role::Transcription).unwrap().ids(), &[4, 5]);
        assert_eq!(tokenize("a zzz", &v, Role::Transcription).unwrap().ids(), &[4, UNK]);
        assert!(tokenize("", &v, Role::Prompt).unwrap().is_empty());
    }

    #[test]
    fn vocab_file_requires_specials_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        vocab_ab().write(&p).unwrap();
        assert_eq!(Vocab::read(&p).unwrap(), vocab_ab());
        std::fs::write(&p, "<sos>\n<pad>\n<eos>\n<unk>\na\n").unwrap();
        assert!(Vocab::read(&p).is_err());
        std::fs::write(&p, "<pad>\n<sos>\n<eos>\n<unk>\na\na\n").unwrap();
        assert!(Vocab::read(&p).is_err());
    }

    #[test]
    fn prompt_rejects_eos() {
        assert!(TokenSeq::prompt(vec![4, EOS]).is_err());
        assert!(TokenSeq::transcription(vec![4, SOS]).is_err());
    }

    #[test]
    fn forward_is_log_probability_vector() {
        let (cfg, p) = tiny();
        let out = lm_forward(&TokenSeq::empty_prompt(), &TokenSeq::transcription(vec![]).unwrap(), &p, &cfg).unwrap();
        let lse = out.data().iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!(lse.abs() < 1e-9);
        assert_eq!(out.numel(), 10);
    }

    #[test]
    fn overlong_input_rejected() {
        let (cfg, p) = tiny();
        let prompt = TokenSeq::prompt(vec![4; 8]).unwrap();
        let prefix = TokenSeq::transcription(vec![5; 4]).unwrap();
        assert!(matches!(lm_forward(&prompt, &prefix, &p, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn causal_positions_ignore_future_tokens() {
        let (cfg, p) = tiny();
        let full = |ids: &[usize]| {
            let mut s = Session::inference(&p);
            let v = lm_log_probs(&mut s, &cfg, ids).unwrap();
            s.graph.value(v).clone()
        };
        let a = full(&[4, 5, SOS, 6, 7, 8]);
        let b = full(&[4, 5, SOS, 6, 9, 4]);
        for r in 0..4 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn prompts_change_the_distribution() {
        let (cfg, p) = tiny();
        let prefix = TokenSeq::transcription(vec![6]).unwrap();
        let a = lm_forward(&TokenSeq::prompt(vec![4, 5]).unwrap(), &prefix, &p, &cfg).unwrap();
        let b = lm_forward(&TokenSeq::prompt(vec![7, 8]).unwrap(), &prefix, &p, &cfg).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
    }

    #[test]
    fn score_uniform_head() {
        let (cfg, mut p) = tiny();
        p.get_mut("lm/head").unwrap().data_mut().fill(0.0);
        let hyp = TokenSeq::transcription(vec![6]).unwrap();
        let score = lm_score(&hyp, &TokenSeq::empty_prompt(), &p, &cfg).unwrap();
        // word + <eos>
        assert!((score - 2.0 * -(10f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn score_matches_chain_rule() {
        let (cfg, p) = tiny();
        let prompt = TokenSeq::prompt(vec![8, 9]).unwrap();
        let w1 = 6;
        let w2 = 7;
        let hyp = TokenSeq::transcription(vec![w1, w2]).unwrap();
        let score = lm_score(&hyp, &prompt, &p, &cfg).unwrap();
        let step = |prefix: Vec<usize>, t: usize| {
            lm_forward(&prompt, &TokenSeq::transcription(prefix).unwrap(), &p, &cfg).unwrap().data()[t]
        };
        let oracle = step(vec![], w1) + step(vec![w1], w2) + step(vec![w1, w2], EOS);
        assert!((score - oracle).abs() < 1e-12);
        assert!(score < 0.0);
    }

    #[test]
    fn empty_hypothesis_scores_eos() {
        let (cfg, p) = tiny();
        let prompt = TokenSeq::prompt(vec![8]).unwrap();
        let empty = TokenSeq::transcription(vec![]).unwrap();
        let score = lm_score(&empty, &prompt, &p, &cfg).unwrap();
        let direct = lm_forward(&prompt, &empty, &p, &cfg).unwrap().data()[EOS];
        assert_eq!(score, direct);
    }

    #[test]
    fn standalone_log_softmax_agrees_with_tape() {
        let (cfg, p) = tiny();
        let mut s = Session::inference(&p);
        let lp = lm_log_probs(&mut s, &cfg, &[SOS, 4]).unwrap();
        let direct = ops::log_softmax_rows(s.graph.value(lp)).unwrap();
        assert!(direct.max_abs_diff(s.graph.value(lp)).unwrap() < 1e-12);
    }
}
