//! Length-synchronous beam search and the N-best list file format.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{fused_log_probs, ModelConfig};
use crate::numcore::{ParamStore, Session, Tensor};
use crate::speech::{encode_features, FeatureMatrix};
use crate::rerank::{group_by_recording, run_recording, Prompt, PromptSource};
use crate::synthdata::{load_features, RecordIndex, UtteranceRecord};
use crate::toklm::{decoder_input, fit_prompt, TokenSeq, Vocab, EOS, PAD, SOS};

/// Next-token distribution given the transcription emitted so far.
pub trait StepScorer {
    /// Log-probabilities indexed by token id.
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    /// Tokens the search may emit; must include `<eos>`.
    fn candidates(&self) -> &[usize];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamOptions {
    pub beam: usize,
    /// Maximum number of words; a hypothesis still open after this many
    /// steps is closed with `<eos>`.
    pub max_len: usize,
}

/// A finished search result: ids end with `<eos>`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSeq {
    pub ids: Vec<usize>,
    pub score: f64,
}

struct Live {
    ids: Vec<usize>,
    score: f64,
}

/// Beam search over `scorer`, returning up to `beam` completed sequences by
/// descending score. Ties go to the lower token id, then to the earlier
/// parent.
pub fn beam_search(scorer: &impl StepScorer, opts: BeamOptions) -> Result<Vec<ScoredSeq>> {
    if opts.beam < 1 {
        return Err(Error::arg("beam size must be at least 1"));
    }
    if opts.max_len < 1 {
        return Err(Error::arg("max_len must be at least 1"));
    }
    let cands = scorer.candidates();
    if !cands.contains(&EOS) {
        return Err(Error::arg("candidate tokens must include <eos>"));
    }
    let mut live = vec![Live {
        ids: Vec::new(),
        score: 0.0,
    }];
    let mut done: Vec<ScoredSeq> = Vec::new();
    for _ in 0..opts.max_len {
        let mut expansions: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * cands.len());
        for (parent, h) in live.iter().enumerate() {
            let lp = scorer.next_log_probs(&h.ids)?;
            for &t in cands {
                let p = *lp
                    .get(t)
                    .ok_or_else(|| Error::arg(format!("candidate token {t} outside the scorer's vocabulary")))?;
                expansions.push((h.score + p, t, parent));
            }
        }
        // stable: equal (score, token) keep parent order
        expansions.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        expansions.truncate(opts.beam);
        let mut next = Vec::with_capacity(expansions.len());
        for (score, t, parent) in expansions {
            let mut ids = live[parent].ids.clone();
            ids.push(t);
            if t == EOS {
                done.push(ScoredSeq { ids, score });
            } else {
                next.push(Live { ids, score });
            }
        }
        live = next;
        if live.is_empty() || done.len() >= opts.beam {
            break;
        }
    }
    for h in live {
        let lp = scorer.next_log_probs(&h.ids)?;
        let mut ids = h.ids;
        ids.push(EOS);
        done.push(ScoredSeq {
            ids,
            score: h.score + lp[EOS],
        });
    }
    done.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids)));
    done.truncate(opts.beam);
    Ok(done)
}

/// Scores continuations with the fused decoder for one utterance.
pub struct FusedScorer<'a> {
    params: &'a ParamStore<f32>,
    cfg: &'a ModelConfig,
    prompt: TokenSeq,
    acoustic: Tensor<f32>,
    candidates: Vec<usize>,
}

impl<'a> FusedScorer<'a> {
    /// `acoustic` are subsampled encoder states. Every token except
    /// `<pad>` and `<sos>` may be emitted.
    pub fn new(params: &'a ParamStore<f32>, cfg: &'a ModelConfig, prompt: TokenSeq, acoustic: Tensor<f32>) -> Self {
        let candidates = (0..cfg.vocab_size).filter(|&t| t != PAD && t != SOS).collect();
        FusedScorer {
            params,
            cfg,
            prompt,
            acoustic,
            candidates,
        }
    }

    /// Restricts the emittable tokens.
    pub fn with_candidates(mut self, candidates: Vec<usize>) -> Self {
        self.candidates = candidates;
        self
    }

    pub fn prompt(&self) -> &TokenSeq {
        &self.prompt
    }

    /// Log-probabilities at every position after `[prompt] [<sos>] [prefix]`.
    pub fn all_log_probs(&self, prefix: &[usize]) -> Result<Tensor<f32>> {
        let prefix = TokenSeq::transcription(prefix.to_vec())?;
        let (ids, sos) = decoder_input(&self.prompt, &prefix)?;
        let mut s = Session::inference(self.params);
        let a = s.graph.constant(self.acoustic.clone());
        let lp = fused_log_probs(&mut s, &self.cfg.decoder, &ids, sos, a, None)?;
        Ok(s.graph.value(lp).clone())
    }
}

impl StepScorer for FusedScorer<'_> {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let lp = self.all_log_probs(prefix)?;
        let rows = lp.shape()[0];
        Ok(lp.row(rows - 1).iter().map(|&v| f64::from(v)).collect())
    }

    fn candidates(&self) -> &[usize] {
        &self.candidates
    }
}

/// Runs the encoder and beam search for one utterance.
pub fn decode_utterance(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    prompt: &TokenSeq,
    features: &FeatureMatrix,
    opts: BeamOptions,
) -> Result<Vec<Hypothesis>> {
    let lm = cfg.lm();
    if prompt.len() > lm.max_prompt || opts.max_len > lm.transcription_room() {
        return Err(Error::arg(format!(
            "prompt of {} tokens or {} decoding steps exceed the decoder's {}/{} positions",
            prompt.len(),
            opts.max_len,
            lm.max_prompt,
            lm.transcription_room()
        )));
    }
    let acoustic = encode_features(params, &cfg.encoder, features)?;
    let scorer = FusedScorer::new(params, cfg, prompt.clone(), acoustic);
    Ok(beam_search(&scorer, opts)?
        .into_iter()
        .map(|s| Hypothesis::new(crate::metrics::words(&vocab.decode(&s.ids)), s.score))
        .collect())
}

/// Decodes every record (features under `base`) into an N-best list, in
/// record order. Fixed prompts decode utterances in parallel; history
/// prompts run recordings in parallel and each recording in index order,
/// feeding the top hypothesis forward in hypothesis mode. Prompts too long
/// for the decoder lose their oldest tokens.
pub fn decode_corpus(
    records: &[UtteranceRecord],
    base: &Path,
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    prompts: &PromptSource<'_>,
    opts: BeamOptions,
) -> Result<Vec<NBestList>> {
    let one = |rec: &UtteranceRecord, prompt: &Prompt| -> Result<NBestList> {
        let features = load_features(base, rec)?;
        let ids = fit_prompt(&prompt.tokens(vocab)?, opts.max_len, cfg.lm())?;
        NBestList::new(rec.id(), decode_utterance(params, cfg, vocab, &ids, &features, opts)?)
    };
    match prompts {
        PromptSource::Fixed(p) => records.par_iter().map(|r| one(r, p)).collect(),
        PromptSource::History { records: context, source } => {
            let ids: Vec<String> = records.iter().map(UtteranceRecord::id).collect();
            let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
            let groups = group_by_recording(&ids, records)?;
            let index = RecordIndex::new(context);
            let done: Vec<Vec<(usize, NBestList)>> = groups
                .par_iter()
                .map(|(positions, recs)| {
                    run_recording(positions, recs, &index, *source, |pos, prompt| {
                        let list = one(&records[pos], prompt)?;
                        let text = list.hypotheses()[0].text();
                        Ok((list, text))
                    })
                })
                .collect::<Result<_>>()?;
            let mut slots: Vec<Option<NBestList>> = vec![None; records.len()];
            for (pos, l) in done.into_iter().flatten() {
                slots[pos] = Some(l);
            }
            Ok(slots.into_iter().map(|l| l.expect("every record decoded")).collect())
        }
    }
}

/// One candidate transcription.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub words: Vec<String>,
    pub first_pass_score: f64,
    pub lm_score: Option<f64>,
}

impl Hypothesis {
    pub fn new(words: Vec<String>, first_pass_score: f64) -> Self {
        Hypothesis {
            words,
            first_pass_score,
            lm_score: None,
        }
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    /// Transcription ids terminated by `<eos>`.
    pub fn token_seq(&self, vocab: &Vocab) -> Result<TokenSeq> {
        let mut ids = vocab.encode(&self.text());
        ids.push(EOS);
        TokenSeq::transcription(ids)
    }
}

/// Ranked hypotheses for one utterance; rank 0 scores highest.
#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    pub utterance_id: String,
    hypotheses: Vec<Hypothesis>,
}

impl NBestList {
    pub fn new(utterance_id: impl Into<String>, hypotheses: Vec<Hypothesis>) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if utterance_id.is_empty() || utterance_id.contains(char::is_whitespace) {
            return Err(Error::contract(format!("invalid utterance id {utterance_id:?}")));
        }
        if hypotheses.is_empty() {
            return Err(Error::contract(format!("empty N-best list for {utterance_id}")));
        }
        for h in &hypotheses {
            if !(h.first_pass_score <= 0.0) {
                return Err(Error::contract(format!(
                    "{utterance_id}: first-pass score {} is not a log-probability",
                    h.first_pass_score
                )));
            }
            if h.words.iter().any(|w| w.is_empty() || w.contains(char::is_whitespace)) {
                return Err(Error::contract(format!("{utterance_id}: malformed hypothesis word")));
            }
        }
        if hypotheses.windows(2).any(|w| w[1].first_pass_score > w[0].first_pass_score) {
            return Err(Error::contract(format!("{utterance_id}: scores increase with rank")));
        }
        Ok(NBestList {
            utterance_id,
            hypotheses,
        })
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sets the second-pass score of every hypothesis, in rank order.
    pub fn set_lm_scores(&mut self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.hypotheses.len() {
            return Err(Error::arg("one LM score per hypothesis required"));
        }
        for (h, &s) in self.hypotheses.iter_mut().zip(scores) {
            h.lm_score = Some(s);
        }
        Ok(())
    }
}

fn fmt_score(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serializes lists as `utterance\trank\tscore\twords[\tlm_score]` lines.
pub fn format_nbest(lists: &[NBestList]) -> String {
    let mut out = String::from("# utterance\trank\tfirst_pass_score\twords\tlm_score\n");
    for list in lists {
        for (rank, h) in list.hypotheses.iter().enumerate() {
            let _ = write!(out, "{}\t{rank}\t{}\t{}", list.utterance_id, fmt_score(h.first_pass_score), h.text());
            if let Some(lm) = h.lm_score {
                let _ = write!(out, "\t{}", fmt_score(lm));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_nbest(lists: &[NBestList], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_nbest(lists)).map_err(|e| Error::io(path, e))
}

/// Parses N-best text. `origin` names the source in error messages.
pub fn parse_nbest(text: &str, origin: &str) -> Result<Vec<NBestList>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (usize, Vec<Hypothesis>)> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let err = |msg: String| Error::parse(origin, lineno, msg);
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(err(format!("expected 4 or 5 tab-separated fields, found {}", fields.len())));
        }
        let utt = fields[0];
        if utt.is_empty() {
            return Err(err("empty utterance id".into()));
        }
        let rank: usize = fields[1].parse().map_err(|_| err(format!("bad rank {:?}", fields[1])))?;
        let score = parse_score(fields[2]).map_err(err)?;
        let lm_score = fields.get(4).map(|f| parse_score(f)).transpose().map_err(err)?;
        let entry = groups.entry(utt.to_string()).or_insert_with(|| {
            order.push(utt.to_string());
            (lineno, Vec::new())
        });
        let hyps = &mut entry.1;
        if rank < hyps.len() {
            return Err(err(format!("duplicate rank {rank} for utterance {utt}")));
        }
        if rank != hyps.len() {
            return Err(err(format!("rank {rank} for utterance {utt} skips rank {}", hyps.len())));
        }
        hyps.push(Hypothesis {
            words: crate::metrics::words(fields[3]),
            first_pass_score: score,
            lm_score,
        });
    }
    order
        .into_iter()
        .map(|utt| {
            let (line, hyps) = groups.remove(&utt).expect("grouped");
            NBestList::new(utt, hyps).map_err(|e| Error::parse(origin, line, e.to_string()))
        })
        .collect()
}

fn parse_score(field: &str) -> std::result::Result<f64, String> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("bad score {field:?}")),
    }
}

pub fn read_nbest(path: impl AsRef<Path>) -> Result<Vec<NBestList>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_nbest(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{init_model, FusedDecoderConfig};
    use crate::speech::EncoderConfig;
    use crate::toklm::DecoderConfig;
    use proptest::prelude::*;

    /// Fixed table of next-token distributions keyed by prefix length.
    struct Table {
        rows: Vec<Vec<f64>>,
        cands: Vec<usize>,
    }

    impl StepScorer for Table {
        fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(self.rows[prefix.len().min(self.rows.len() - 1)].clone())
        }
        fn candidates(&self) -> &[usize] {
            &self.cands
        }
    }

    fn ln(ps: &[f64]) -> Vec<f64> {
        ps.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn beam_one_is_greedy() {
        // step 0 prefers 4, step 1 prefers eos
        let t = Table {
            rows: vec![ln(&[1e-9, 1e-9, 0.1, 1e-9, 0.6, 0.3]), ln(&[1e-9, 1e-9, 0.7, 1e-9, 0.2, 0.1])],
            cands: vec![2, 4, 5],
        };
        let out = beam_search(&t, BeamOptions { beam: 1, max_len: 5 }).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].ids, vec![4, EOS]);
        assert!((out[0].score - (0.6f64.ln() + 0.7f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_token() {
        let t = Table {
            rows: vec![ln(&[0.0, 0.0, 0.2, 0.0, 0.4, 0.4])],
            cands: vec![2, 4, 5],
        };
        let out = beam_search(&t, BeamOptions { beam: 1, max_len: 1 }).unwrap();
        assert_eq!(out[0].ids, vec![4, EOS]);
    }

    #[test]
    fn max_len_forces_eos() {
        let t = Table {
            rows: vec![ln(&[0.0, 0.0, 0.01, 0.0, 0.99])],
            cands: vec![2, 4],
        };
        let out = beam_search(&t, BeamOptions { beam: 1, max_len: 3 }).unwrap();
        assert_eq!(out[0].ids, vec![4, 4, 4, EOS]);
        assert!((out[0].score - (3.0 * 0.99f64.ln() + 0.01f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_options() {
        let t = Table {
            rows: vec![vec![0.0; 3]],
            cands: vec![2],
        };
        assert!(beam_search(&t, BeamOptions { beam: 0, max_len: 3 }).is_err());
        let no_eos = Table {
            rows: vec![vec![0.0; 5]],
            cands: vec![4],
        };
        assert!(beam_search(&no_eos, BeamOptions { beam: 2, max_len: 3 }).is_err());
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            feat_dim: 4,
            decoder: FusedDecoderConfig {
                lm: DecoderConfig {
                    layers: 2,
                    model_dim: 16,
                    heads: 2,
                    ffn_dim: 32,
                    max_len: 12,
                    max_prompt: 6,
                },
                fused_layers: 1,
                bottleneck: 8,
                heads: 2,
            },
            encoder: EncoderConfig {
                layers: 1,
                model_dim: 8,
                heads: 2,
                ffn_dim: 16,
                subsample_out_dim: 8,
            },
        }
    }

    #[test]
    fn decoding_is_deterministic_and_scores_are_consistent() {
        let cfg = small_model();
        let mut p = init_model(&cfg, 2).unwrap();
        *p.get_mut("fusion/layer1/w1").unwrap() = Tensor::scalar(0.7);
        let vocab = Vocab::from_words(["a", "b", "c", "d"]).unwrap();
        let feats = FeatureMatrix::new(Tensor::matrix(8, 4, (0..32).map(|i| (i as f32 * 0.3).cos()).collect()).unwrap()).unwrap();
        let prompt = TokenSeq::prompt(vec![4, 5]).unwrap();
        let opts = BeamOptions { beam: 4, max_len: 4 };
        let a = decode_utterance(&p, &cfg, &vocab, &prompt, &feats, opts).unwrap();
        let b = decode_utterance(&p, &cfg, &vocab, &prompt, &feats, opts).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() <= 4);
        assert!(a.windows(2).all(|w| w[0].first_pass_score >= w[1].first_pass_score));

        let acoustic = encode_features(&p, &cfg.encoder, &feats).unwrap();
        let scorer = FusedScorer::new(&p, &cfg, prompt.clone(), acoustic);
        for h in &a {
            let ids = h.token_seq(&vocab).unwrap();
            let ids = ids.ids();
            let body = &ids[..ids.len() - 1];
            let lp = scorer.all_log_probs(body).unwrap();
            let sos = prompt.len();
            let total: f64 = ids.iter().enumerate().map(|(k, &t)| f64::from(lp.row(sos + k)[t])).sum();
            assert!((total - h.first_pass_score).abs() < 1e-6);
        }
        let long = TokenSeq::prompt(vec![4; 8]).unwrap();
        assert!(decode_utterance(&p, &cfg, &vocab, &long, &feats, opts).is_err());
    }

    fn exhaustive(scorer: &impl StepScorer, max_len: usize) -> Vec<ScoredSeq> {
        let words: Vec<usize> = scorer.candidates().iter().copied().filter(|&t| t != EOS).collect();
        let mut out = Vec::new();
        let mut frontier = vec![(Vec::new(), 0.0)];
        for depth in 0..=max_len {
            let mut next = Vec::new();
            for (ids, score) in frontier {
                let lp = scorer.next_log_probs(&ids).unwrap();
                let mut done: Vec<usize> = ids.clone();
                done.push(EOS);
                out.push(ScoredSeq {
                    ids: done,
                    score: score + lp[EOS],
                });
                if depth < max_len {
                    for &w in &words {
                        let mut e = ids.clone();
                        e.push(w);
                        next.push((e, score + lp[w]));
                    }
                }
            }
            frontier = next;
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out
    }

    #[test]
    fn wide_beam_matches_enumeration() {
        let cfg = small_model();
        for seed in 0..5 {
            let mut p = init_model(&cfg, seed).unwrap();
            *p.get_mut("fusion/layer1/w1").unwrap() = Tensor::scalar(1.0);
            let ac = Tensor::matrix(2, 8, (0..16).map(|i| (i as f32 + seed as f32).sin()).collect()).unwrap();
            let scorer = FusedScorer::new(&p, &cfg, TokenSeq::empty_prompt(), ac).with_candidates(vec![EOS, 4, 5, 6]);
            let beam = beam_search(&scorer, BeamOptions { beam: 81, max_len: 4 }).unwrap();
            let all = exhaustive(&scorer, 4);
            assert_eq!(beam[0].ids, all[0].ids);
            assert!((beam[0].score - all[0].score).abs() < 1e-9);
        }
    }

    #[test]
    fn nbest_round_trip() {
        let mut l1 = NBestList::new(
            "rec-0",
            vec![
                Hypothesis::new(crate::metrics::words("a b"), -0.123_456_789_012_345_68),
                Hypothesis::new(vec![], -3.0),
            ],
        )
        .unwrap();
        l1.set_lm_scores(&[-5.5, -1.0 / 3.0]).unwrap();
        let l2 = NBestList::new("rec-1", vec![Hypothesis::new(crate::metrics::words("c"), 0.0)]).unwrap();
        let text = format_nbest(&[l1.clone(), l2.clone()]);
        assert_eq!(parse_nbest(&text, "x").unwrap(), vec![l1, l2]);
        assert!(parse_nbest("", "x").unwrap().is_empty());
        assert!(parse_nbest("# only a comment\n", "x").unwrap().is_empty());
    }

    #[test]
    fn nbest_parse_errors_name_the_line() {
        let dup = "u\t0\t-1.0\ta\nu\t0\t-2.0\tb\n";
        match parse_nbest(dup, "f").unwrap_err() {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("duplicate"));
            }
            e => panic!("{e}"),
        }
        assert!(matches!(parse_nbest("u\t0\tx\ta\n", "f"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_nbest("u\t1\t-1\ta\n", "f"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_nbest("u\t0\t-1\n", "f"), Err(Error::Parse { line: 1, .. })));
        // scores must not increase with rank
        assert!(parse_nbest("u\t0\t-2\ta\nu\t1\t-1\tb\n", "f").is_err());
    }

    proptest! {
        #[test]
        fn scores_round_trip_exactly(v in -1e6f64..0.0) {
            let l = NBestList::new("u", vec![Hypothesis::new(vec!["w".into()], v)]).unwrap();
            let back = parse_nbest(&format_nbest(std::slice::from_ref(&l)), "p").unwrap();
            prop_assert_eq!(back, vec![l]);
        }
    }
}
