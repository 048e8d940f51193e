//! Word error rate and word-recall metrics.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Edit operations of a minimal word alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
}

impl EditCounts {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Errors per reference word; `NaN` for an empty total.
    pub fn wer(&self) -> f64 {
        self.edits() as f64 / self.reference_words as f64
    }
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.reference_words += o.reference_words;
    }
}

/// Minimal unit-cost word alignment of `hypothesis` against `reference`.
/// Among equally short alignments the traceback takes a substitution over an
/// insertion/deletion pair.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<EditCounts> {
    if reference.is_empty() {
        return Err(Error::arg("empty reference"));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut c = EditCounts {
        reference_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                c.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(c.edits(), d[n * w + m]);
    Ok(c)
}

/// Word error rate of one pair together with its edit counts.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<(f64, EditCounts)> {
    let c = align(reference, hypothesis)?;
    Ok((c.wer(), c))
}

/// Pooled edits over a corpus (total edits / total reference words).
pub fn corpus_edits<R: AsRef<[String]>, H: AsRef<[String]>>(references: &[R], hypotheses: &[H]) -> Result<EditCounts> {
    check_pairs(references.len(), hypotheses.len())?;
    let mut total = EditCounts::default();
    for (r, h) in references.iter().zip(hypotheses) {
        total += align(r.as_ref(), h.as_ref())?;
    }
    Ok(total)
}

fn check_pairs(r: usize, h: usize) -> Result<()> {
    if r != h {
        return Err(Error::arg(format!("{r} references but {h} hypotheses")));
    }
    Ok(())
}

/// Hit/total counter; the ratio is undefined when nothing was counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Recall {
    pub hits: usize,
    pub total: usize,
}

impl Recall {
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

fn counts<S: AsRef<str>>(words: &[S]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for w in words {
        *m.entry(w.as_ref()).or_insert(0) += 1;
    }
    m
}

/// Recall of the reference words selected by `target`: per utterance and
/// word, `min(count in ref, count in hyp)` hits out of the reference count.
pub fn recall_by<R, H>(references: &[R], hypotheses: &[H], target: impl Fn(&str) -> bool) -> Result<Recall>
where
    R: AsRef<[String]>,
    H: AsRef<[String]>,
{
    check_pairs(references.len(), hypotheses.len())?;
    let mut r = Recall::default();
    for (reference, hyp) in references.iter().zip(hypotheses) {
        let hyp = counts(hyp.as_ref());
        for (word, n) in counts(reference.as_ref()) {
            if target(word) {
                r.total += n;
                r.hits += n.min(hyp.get(word).copied().unwrap_or(0));
            }
        }
    }
    Ok(r)
}

/// Recall of gazetteer words.
pub fn entity_recall<R, H>(references: &[R], hypotheses: &[H], gazetteer: &HashSet<String>) -> Result<Recall>
where
    R: AsRef<[String]>,
    H: AsRef<[String]>,
{
    recall_by(references, hypotheses, |w| gazetteer.contains(w))
}

/// Recall of reference words that never occur in the source-domain
/// training transcripts.
pub fn oov_recall<R, H>(references: &[R], hypotheses: &[H], source_vocab: &HashSet<String>) -> Result<Recall>
where
    R: AsRef<[String]>,
    H: AsRef<[String]>,
{
    recall_by(references, hypotheses, |w| !source_vocab.contains(w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub utterances: usize,
    pub edits: EditCounts,
    pub entity: Recall,
    pub oov: Recall,
}

impl EvalReport {
    pub fn wer(&self) -> f64 {
        self.edits.wer()
    }

    /// `key=value` lines, one metric or count per line.
    pub fn to_text(&self) -> String {
        let ratio = |r: &Recall| r.value().map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        let e = &self.edits;
        let mut s = String::new();
        let _ = writeln!(s, "wer={:.6}", self.wer());
        let _ = writeln!(s, "entity_recall={}", ratio(&self.entity));
        let _ = writeln!(s, "oov_recall={}", ratio(&self.oov));
        let _ = writeln!(s, "utterances={}", self.utterances);
        let _ = writeln!(s, "reference_words={}", e.reference_words);
        let _ = writeln!(s, "substitutions={}", e.substitutions);
        let _ = writeln!(s, "insertions={}", e.insertions);
        let _ = writeln!(s, "deletions={}", e.deletions);
        let _ = writeln!(s, "entity_hits={}", self.entity.hits);
        let _ = writeln!(s, "entity_total={}", self.entity.total);
        let _ = writeln!(s, "oov_hits={}", self.oov.hits);
        let _ = writeln!(s, "oov_total={}", self.oov.total);
        s
    }
}

/// WER, entity recall and OOV recall over aligned reference/hypothesis pairs.
pub fn evaluate<R, H>(
    references: &[R],
    hypotheses: &[H],
    gazetteer: &HashSet<String>,
    source_vocab: &HashSet<String>,
) -> Result<EvalReport>
where
    R: AsRef<[String]>,
    H: AsRef<[String]>,
{
    Ok(EvalReport {
        utterances: references.len(),
        edits: corpus_edits(references, hypotheses)?,
        entity: entity_recall(references, hypotheses, gazetteer)?,
        oov: oov_recall(references, hypotheses, source_vocab)?,
    })
}

/// Whitespace tokenization into owned words.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}
