//! Second-pass N-best reranking with prompt-conditioned language-model
//! scores.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::decoding::{Hypothesis, NBestList};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Real};
use crate::synthdata::{RecordIndex, UtteranceRecord};
use crate::toklm::{fit_prompt, lm_score, tokenize, DecoderConfig, Role, TokenSeq, Vocab};

/// Lowercases, keeps letters, digits, apostrophes and spaces, and collapses
/// whitespace.
pub fn normalize_prompt(raw: &str) -> String {
    let kept: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|&c| c.is_alphanumeric() || c == '\'' || c == ' ')
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    None,
    Title,
    Description,
    HistoryGt,
    HistoryHyp,
}

/// Text that conditions the language model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub raw: String,
    pub normalized: String,
    pub kind: PromptKind,
}

impl Prompt {
    pub fn none() -> Self {
        Prompt {
            raw: String::new(),
            normalized: String::new(),
            kind: PromptKind::None,
        }
    }

    pub fn new(raw: impl Into<String>, kind: PromptKind) -> Self {
        let raw = raw.into();
        Prompt {
            normalized: normalize_prompt(&raw),
            raw,
            kind,
        }
    }

    pub fn tokens(&self, vocab: &Vocab) -> Result<TokenSeq> {
        tokenize(&self.normalized, vocab, Role::Prompt)
    }
}

/// Reranked list plus the rank of the chosen hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Reranked {
    pub selected: usize,
    pub list: NBestList,
}

impl Reranked {
    pub fn hypothesis(&self) -> &Hypothesis {
        &self.list.hypotheses()[self.selected]
    }
}

/// Index of the highest score; the lowest index wins ties.
pub fn select_best(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::arg("nothing to select from"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Scores every hypothesis by its prompt-conditioned log-probability and
/// picks the best one. First-pass scores play no part in the choice. Long
/// prompts lose their oldest tokens when prompt and hypothesis would not
/// fit the decoder together.
pub fn rerank<S: Real>(
    nbest: &NBestList,
    prompt: &Prompt,
    lm: &ParamStore<S>,
    cfg: &DecoderConfig,
    vocab: &Vocab,
) -> Result<Reranked> {
    if nbest.hypotheses().is_empty() {
        return Err(Error::arg("empty N-best list"));
    }
    let prompt_ids = prompt.tokens(vocab)?;
    let scores = nbest
        .hypotheses()
        .iter()
        .map(|h| {
            let hyp = h.token_seq(vocab)?;
            let p = fit_prompt(&prompt_ids, hyp.len() - 1, cfg)?;
            lm_score(&hyp, &p, lm, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let selected = select_best(&scores)?;
    let mut list = nbest.clone();
    list.set_lm_scores(&scores)?;
    Ok(Reranked { selected, list })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistorySource {
    /// The previous utterance's reference transcript.
    GroundTruth,
    /// The system's own final output for the previous utterance.
    Hypothesis,
}

/// The previous utterance of `current`'s recording as a prompt; the first
/// utterance gets an empty prompt. `prior_outputs` maps utterance ids to
/// final outputs and is consulted in hypothesis mode only.
pub fn resolve_history_prompt(
    records: &RecordIndex<'_>,
    current: &UtteranceRecord,
    source: HistorySource,
    prior_outputs: &HashMap<String, String>,
) -> Result<Prompt> {
    if current.utterance_index == 0 {
        return Ok(Prompt::none());
    }
    let prev = records.previous(current).ok_or_else(|| {
        Error::data(format!("no utterance precedes {} in its recording", current.id()))
    })?;
    Ok(match source {
        HistorySource::GroundTruth => Prompt::new(prev.transcript.clone(), PromptKind::HistoryGt),
        HistorySource::Hypothesis => {
            let out = prior_outputs.get(&prev.id()).ok_or_else(|| {
                Error::contract(format!("no output for {} before {}", prev.id(), current.id()))
            })?;
            Prompt::new(out.clone(), PromptKind::HistoryHyp)
        }
    })
}

/// Where per-utterance prompts come from.
#[derive(Clone, Debug)]
pub enum PromptSource<'a> {
    Fixed(Prompt),
    History {
        records: &'a [UtteranceRecord],
        source: HistorySource,
    },
}

/// Processes one recording in index order so that history prompts can use
/// earlier outputs; returns `(position, output)` pairs.
pub(crate) fn run_recording<T>(
    positions: &[usize],
    records: &[&UtteranceRecord],
    index: &RecordIndex<'_>,
    source: HistorySource,
    mut step: impl FnMut(usize, &Prompt) -> Result<(T, String)>,
) -> Result<Vec<(usize, T)>> {
    let mut outputs = HashMap::new();
    let mut done = Vec::with_capacity(positions.len());
    for (&pos, rec) in positions.iter().zip(records) {
        let prompt = resolve_history_prompt(index, rec, source, &outputs)?;
        let (value, text) = step(pos, &prompt)?;
        outputs.insert(rec.id(), text);
        done.push((pos, value));
    }
    Ok(done)
}

/// Groups item positions by recording, each group sorted by utterance index.
pub(crate) fn group_by_recording<'r>(
    ids: &[&str],
    records: &'r [UtteranceRecord],
) -> Result<Vec<(Vec<usize>, Vec<&'r UtteranceRecord>)>> {
    let by_id: HashMap<String, &UtteranceRecord> = records.iter().map(|r| (r.id(), r)).collect();
    let mut groups: BTreeMap<&str, Vec<(usize, &UtteranceRecord)>> = BTreeMap::new();
    for (pos, id) in ids.iter().enumerate() {
        let rec = by_id
            .get(*id)
            .ok_or_else(|| Error::data(format!("utterance {id} is not in the manifest")))?;
        groups.entry(rec.recording_id.as_str()).or_default().push((pos, rec));
    }
    Ok(groups
        .into_values()
        .map(|mut g| {
            g.sort_by_key(|(_, r)| r.utterance_index);
            g.into_iter().unzip()
        })
        .collect())
}

/// Reranks many lists. Fixed prompts run fully in parallel; history prompts
/// run recordings in parallel and utterances in index order. The result is
/// in input order and does not depend on the thread count.
pub fn rerank_all<S: Real>(
    lists: &[NBestList],
    prompts: &PromptSource<'_>,
    lm: &ParamStore<S>,
    cfg: &DecoderConfig,
    vocab: &Vocab,
) -> Result<Vec<Reranked>> {
    match prompts {
        PromptSource::Fixed(p) => lists.par_iter().map(|l| rerank(l, p, lm, cfg, vocab)).collect(),
        PromptSource::History { records, source } => {
            let ids: Vec<&str> = lists.iter().map(|l| l.utterance_id.as_str()).collect();
            let groups = group_by_recording(&ids, records)?;
            let index = RecordIndex::new(records);
            let done: Vec<Vec<(usize, Reranked)>> = groups
                .par_iter()
                .map(|(positions, recs)| {
                    run_recording(positions, recs, &index, *source, |pos, prompt| {
                        let r = rerank(&lists[pos], prompt, lm, cfg, vocab)?;
                        let text = r.hypothesis().text();
                        Ok((r, text))
                    })
                })
                .collect::<Result<_>>()?;
            let mut slots: Vec<Option<Reranked>> = vec![None; lists.len()];
            for (pos, r) in done.into_iter().flatten() {
                slots[pos] = Some(r);
            }
            Ok(slots.into_iter().map(|r| r.expect("every list reranked")).collect())
        }
    }
}
