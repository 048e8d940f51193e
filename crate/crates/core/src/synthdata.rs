//! Deterministic two-domain long-form corpus with homophone ambiguity.
//!
//! Every recording has a latent flavor (source-like or target-like); the
//! source domain draws 95% source-flavored recordings, the target domain
//! 95% target-flavored ones by default. A flavor fixes which
//! domain-specific words occur and which member of each homophone pair is
//! spoken. Homophone members share one acoustic codebook vector, so only
//! textual context — earlier words, the previous utterance, or a domain
//! prompt — tells them apart.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::decoding::{Hypothesis, NBestList};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::speech::FeatureMatrix;
use crate::toklm::{Vocab, SPECIALS};

pub const SOURCE: &str = "source";
pub const TARGET: &str = "target";

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub recording_id: String,
    pub utterance_index: usize,
    /// Relative to the manifest's directory; `-` for text-only records.
    pub feature_path: String,
    pub domain: String,
    pub transcript: String,
}

impl UtteranceRecord {
    pub fn id(&self) -> String {
        format!("{}-{}", self.recording_id, self.utterance_index)
    }

    pub fn words(&self) -> Vec<String> {
        crate::metrics::words(&self.transcript)
    }

    pub fn has_features(&self) -> bool {
        self.feature_path != "-"
    }
}

pub fn format_manifest(records: &[UtteranceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.recording_id, r.utterance_index, r.feature_path, r.domain, r.transcript
        );
    }
    s
}

pub fn write_manifest(records: &[UtteranceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_manifest(records)).map_err(|e| Error::io(path, e))
}

/// Parses manifest text; records come back sorted by recording, then
/// index, with indices checked to be unique and contiguous from zero.
pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<UtteranceRecord>> {
    let mut rows: BTreeMap<(String, usize), (usize, UtteranceRecord)> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::parse(origin, lineno, m);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", f.len())));
        }
        if f[0].is_empty() || f[0].contains(char::is_whitespace) {
            return Err(err(format!("bad recording id {:?}", f[0])));
        }
        let index: usize = f[1].parse().map_err(|_| err(format!("bad utterance index {:?}", f[1])))?;
        let rec = UtteranceRecord {
            recording_id: f[0].to_string(),
            utterance_index: index,
            feature_path: f[2].to_string(),
            domain: f[3].to_string(),
            transcript: f[4].split_whitespace().collect::<Vec<_>>().join(" "),
        };
        if rows.insert((rec.recording_id.clone(), index), (lineno, rec)).is_some() {
            return Err(err(format!("duplicate utterance {}-{index}", f[0])));
        }
    }
    let mut expected: HashMap<&str, usize> = HashMap::new();
    for ((rec, idx), (line, _)) in &rows {
        let next = expected.entry(rec.as_str()).or_insert(0);
        if idx != next {
            return Err(Error::parse(origin, *line, format!("recording {rec} lacks utterance index {next}")));
        }
        *next += 1;
    }
    Ok(rows.into_values().map(|(_, r)| r).collect())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

/// Lookup of utterances by `(recording, index)`.
pub struct RecordIndex<'a> {
    map: HashMap<(&'a str, usize), &'a UtteranceRecord>,
}

impl<'a> RecordIndex<'a> {
    pub fn new(records: &'a [UtteranceRecord]) -> Self {
        RecordIndex {
            map: records
                .iter()
                .map(|r| ((r.recording_id.as_str(), r.utterance_index), r))
                .collect(),
        }
    }

    /// The preceding utterance of the same recording, if listed.
    pub fn previous(&self, record: &UtteranceRecord) -> Option<&'a UtteranceRecord> {
        let idx = record.utterance_index.checked_sub(1)?;
        self.map.get(&(record.recording_id.as_str(), idx)).copied()
    }
}

/// Loads the feature file of a record listed in a manifest under `base`.
pub fn load_features(base: &Path, record: &UtteranceRecord) -> Result<FeatureMatrix> {
    if !record.has_features() {
        return Err(Error::data(format!("utterance {} has no features", record.id())));
    }
    FeatureMatrix::read(base.join(&record.feature_path))
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    /// Vocabulary size including the four special tokens.
    pub vocab_size: usize,
    pub homophone_pairs: usize,
    pub frames_per_token: usize,
    pub feat_dim: usize,
    pub noise_std: f64,
    /// Source-domain training recordings.
    pub train_recordings: usize,
    /// Held-out recordings per domain.
    pub eval_recordings: usize,
    /// Text-only recordings per domain for language-model training.
    pub lm_recordings: usize,
    pub utterances_per_recording: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Share of domain-specific words listed in the gazetteer.
    pub entity_fraction: f64,
    /// Share of target-specific words that never occur in the source domain.
    pub oov_fraction: f64,
    /// Probability that a recording has its domain's own flavor.
    pub domain_purity: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            vocab_size: 50,
            homophone_pairs: 5,
            frames_per_token: 4,
            feat_dim: 16,
            noise_std: 0.5,
            train_recordings: 200,
            eval_recordings: 60,
            lm_recordings: 1000,
            utterances_per_recording: 10,
            min_words: 4,
            max_words: 8,
            entity_fraction: 0.5,
            oov_fraction: 0.3,
            domain_purity: 0.95,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let words = self.vocab_size.saturating_sub(SPECIALS.len());
        if words < 2 * self.homophone_pairs + 6 {
            return Err(Error::arg(format!(
                "vocab_size {} too small for {} homophone pairs",
                self.vocab_size, self.homophone_pairs
            )));
        }
        if self.frames_per_token == 0 || self.feat_dim == 0 {
            return Err(Error::arg("frames_per_token and feat_dim must be positive"));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::arg("need 1 <= min_words <= max_words"));
        }
        if self.min_words * self.frames_per_token < crate::speech::MIN_FRAMES {
            return Err(Error::arg("shortest utterance would have too few frames"));
        }
        for (name, v) in [
            ("entity_fraction", self.entity_fraction),
            ("oov_fraction", self.oov_fraction),
            ("domain_purity", self.domain_purity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::arg(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::arg("noise_std must be finite and non-negative"));
        }
        if self.utterances_per_recording == 0 {
            return Err(Error::arg("utterances_per_recording must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Flavor {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Item {
    Word(usize),
    Slot(usize),
}

/// Word inventory shared by every split.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    /// All words in vocabulary order.
    pub words: Vec<String>,
    pub common: Vec<usize>,
    pub source_specific: Vec<usize>,
    pub target_specific: Vec<usize>,
    /// Target-specific words barred from the source domain.
    pub oov: Vec<usize>,
    /// `(source-leaning, target-leaning)` member pairs.
    pub homophones: Vec<(usize, usize)>,
}

fn make_words(n: usize) -> Vec<String> {
    const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    // fixed stream: word spellings do not depend on the corpus seed
    let mut rng = ChaCha8Rng::seed_from_u64(0x005e_ed0f_70c5);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = 2 + usize::from(rng.random_bool(0.3));
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS[rng.random_range(0..ONSETS.len())], VOWELS[rng.random_range(0..5)]))
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl Lexicon {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.vocab_size - SPECIALS.len();
        let words = make_words(n);
        let h = 2 * spec.homophone_pairs;
        let rest = n - h;
        let specific = (rest - rest * 2 / 5) / 2;
        let common_n = rest - 2 * specific;
        let mut ids = 0..n;
        let common: Vec<usize> = ids.by_ref().take(common_n).collect();
        let source_specific: Vec<usize> = ids.by_ref().take(specific).collect();
        let target_specific: Vec<usize> = ids.by_ref().take(specific).collect();
        let homophones: Vec<(usize, usize)> = (0..spec.homophone_pairs)
            .map(|_| (ids.next().expect("sized"), ids.next().expect("sized")))
            .collect();
        let n_oov = ((spec.oov_fraction * specific as f64).round() as usize).min(specific.saturating_sub(1));
        let oov = target_specific[specific - n_oov..].to_vec();
        Ok(Lexicon {
            words,
            common,
            source_specific,
            target_specific,
            oov,
            homophones,
        })
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_words(self.words.iter().cloned())
    }

    fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    /// Gazetteer: every homophone word plus the leading share of each
    /// domain-specific list.
    pub fn gazetteer(&self, entity_fraction: f64) -> Vec<String> {
        let take = |v: &Vec<usize>| v.iter().take((entity_fraction * v.len() as f64).round() as usize).copied().collect::<Vec<_>>();
        let mut ids: Vec<usize> = self.homophones.iter().flat_map(|&(a, b)| [a, b]).collect();
        ids.extend(take(&self.source_specific));
        ids.extend(take(&self.target_specific));
        ids.sort_unstable();
        ids.into_iter().map(|i| self.words[i].clone()).collect()
    }

    pub fn homophone_words(&self) -> Vec<String> {
        self.homophones
            .iter()
            .flat_map(|&(a, b)| [self.words[a].clone(), self.words[b].clone()])
            .collect()
    }

    /// Map from each homophone word to its partner.
    pub fn partners(&self) -> HashMap<String, String> {
        self.homophones
            .iter()
            .flat_map(|&(a, b)| {
                [
                    (self.words[a].clone(), self.words[b].clone()),
                    (self.words[b].clone(), self.words[a].clone()),
                ]
            })
            .collect()
    }
}

/// Bigram transcript model for one flavor.
struct FlavorModel {
    items: Vec<Item>,
    unigram: Vec<f64>,
    successors: HashMap<Item, [usize; 3]>,
    member_bias: f64,
}

const MEMBER_PURITY: f64 = 0.95;

impl FlavorModel {
    fn new(lex: &Lexicon, flavor: Flavor, rng: &mut ChaCha8Rng) -> Self {
        let specific = match flavor {
            Flavor::Source => &lex.source_specific,
            Flavor::Target => &lex.target_specific,
        };
        let mut items = Vec::new();
        let mut unigram = Vec::new();
        let mut push = |group: Vec<Item>, mass: f64| {
            let each = mass / group.len() as f64;
            for it in group {
                items.push(it);
                unigram.push(each);
            }
        };
        push(lex.common.iter().map(|&w| Item::Word(w)).collect(), 0.45);
        push(specific.iter().map(|&w| Item::Word(w)).collect(), 0.30);
        push((0..lex.homophones.len()).map(Item::Slot).collect(), 0.25);
        let mut successors = HashMap::new();
        for &it in &items {
            let picks = [0; 3].map(|_| rng.random_range(0..items.len()));
            successors.insert(it, picks);
        }
        let member_bias = match flavor {
            Flavor::Source => MEMBER_PURITY,
            Flavor::Target => 1.0 - MEMBER_PURITY,
        };
        FlavorModel {
            items,
            unigram,
            successors,
            member_bias,
        }
    }

    /// Samples `len` words; `banned` words are never emitted.
    fn sample(&self, lex: &Lexicon, len: usize, banned: &BTreeSet<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut prev: Option<Item> = None;
        while out.len() < len {
            let mut weights: Vec<f64> = self.unigram.iter().map(|p| p * 0.5).collect();
            match prev.and_then(|p| self.successors.get(&p)) {
                Some(succ) => succ.iter().for_each(|&i| weights[i] += 0.5 / 3.0),
                None => weights.iter_mut().for_each(|w| *w *= 2.0),
            }
            for (w, it) in weights.iter_mut().zip(&self.items) {
                if matches!(it, Item::Word(id) if banned.contains(id)) {
                    *w = 0.0;
                }
            }
            let dist = WeightedIndex::new(&weights).expect("positive mass");
            let it = self.items[dist.sample(rng)];
            let word = match it {
                Item::Word(w) => w,
                Item::Slot(k) => {
                    let (a, b) = lex.homophones[k];
                    if rng.random_bool(self.member_bias) {
                        a
                    } else {
                        b
                    }
                }
            };
            out.push(word);
            prev = Some(it);
        }
        out
    }
}

/// Everything written by [`generate`], in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<UtteranceRecord>,
    pub eval_source: Vec<UtteranceRecord>,
    pub eval_target: Vec<UtteranceRecord>,
    pub lm_train: Vec<UtteranceRecord>,
    pub gazetteer: Vec<String>,
    pub source_vocab: Vec<String>,
    pub homophones: Vec<(String, String)>,
    /// Raw (un-normalized) prompt text per domain.
    pub prompts: BTreeMap<String, String>,
}

impl Corpus {
    pub fn prompt(&self, domain: &str) -> Result<&str> {
        self.prompts
            .get(domain)
            .map(String::as_str)
            .ok_or_else(|| Error::data(format!("no prompt for domain {domain}")))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let list = |name: &str| -> Result<Vec<String>> { Ok(read(name)?.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect()) };
        let homophones = list("homophones.txt")?
            .into_iter()
            .map(|l| {
                let mut it = l.split('\t');
                match (it.next(), it.next(), it.next()) {
                    (Some(a), Some(b), None) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::data(format!("bad homophone line {l:?}"))),
                }
            })
            .collect::<Result<_>>()?;
        let mut prompts = BTreeMap::new();
        for d in [SOURCE, TARGET] {
            prompts.insert(d.to_string(), read(&format!("prompt_{d}.txt"))?.trim_end().to_string());
        }
        Ok(Corpus {
            vocab: Vocab::read(dir.join("vocab.txt"))?,
            train: read_manifest(dir.join("train.manifest"))?,
            eval_source: read_manifest(dir.join("eval_source.manifest"))?,
            eval_target: read_manifest(dir.join("eval_target.manifest"))?,
            lm_train: read_manifest(dir.join("lm_train.manifest"))?,
            gazetteer: list("gazetteer.txt")?,
            source_vocab: list("source_vocab.txt")?,
            homophones,
            prompts,
        })
    }
}

/// A "title" prompt: the domain's specific words followed by the homophone
/// members it leans towards, capitalized and punctuated like a keyword list.
fn prompt_sentence(lex: &Lexicon, specific: &[usize], members: &[usize]) -> String {
    let cap = |w: &str| {
        let mut c = w.chars();
        c.next().map(|f| f.to_uppercase().chain(c).collect::<String>()).unwrap_or_default()
    };
    let words: Vec<String> = specific.iter().chain(members).map(|&w| cap(lex.word(w))).collect();
    let groups: Vec<String> = words.chunks(4).map(|g| g.join(", ")).collect();
    format!("{}.", groups.join("; "))
}

struct Writer<'a> {
    lex: &'a Lexicon,
    spec: &'a CorpusSpec,
    codebook: Vec<Vec<f32>>,
    out: Option<&'a Path>,
}

impl Writer<'_> {
    fn features(&self, words: &[usize], rng: &mut ChaCha8Rng) -> Result<FeatureMatrix> {
        let (fpt, d) = (self.spec.frames_per_token, self.spec.feat_dim);
        let noise = Normal::new(0.0, self.spec.noise_std).map_err(|e| Error::arg(e.to_string()))?;
        let mut data = Vec::with_capacity(words.len() * fpt * d);
        for &w in words {
            for _ in 0..fpt {
                for &c in &self.codebook[w] {
                    let n = if self.spec.noise_std > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
                    data.push(c + n);
                }
            }
        }
        FeatureMatrix::new(Tensor::matrix(words.len() * fpt, d, data)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn split(
        &self,
        name: &str,
        domain: &str,
        recordings: usize,
        with_audio: bool,
        models: &BTreeMap<Flavor, FlavorModel>,
        stream: u64,
    ) -> Result<Vec<UtteranceRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream);
        let own = if domain == SOURCE { Flavor::Source } else { Flavor::Target };
        let other = if own == Flavor::Source { Flavor::Target } else { Flavor::Source };
        let banned: BTreeSet<usize> = if domain == SOURCE { self.lex.oov.iter().copied().collect() } else { BTreeSet::new() };
        let mut records = Vec::new();
        for r in 0..recordings {
            let flavor = if rng.random_bool(self.spec.domain_purity) { own } else { other };
            let recording_id = format!("{name}-{r:04}");
            for u in 0..self.spec.utterances_per_recording {
                let len = rng.random_range(self.spec.min_words..=self.spec.max_words);
                let words = models[&flavor].sample(self.lex, len, &banned, &mut rng);
                let transcript = words.iter().map(|&w| self.lex.word(w)).collect::<Vec<_>>().join(" ");
                let feature_path = if with_audio {
                    let rel = format!("features/{recording_id}-{u}.gfaf");
                    let fm = self.features(&words, &mut rng)?;
                    if let Some(dir) = self.out {
                        fm.write(dir.join(&rel))?;
                    }
                    rel
                } else {
                    "-".to_string()
                };
                records.push(UtteranceRecord {
                    recording_id: recording_id.clone(),
                    utterance_index: u,
                    feature_path,
                    domain: domain.to_string(),
                    transcript,
                });
            }
        }
        Ok(records)
    }
}

fn build(spec: &CorpusSpec, out: Option<&Path>) -> Result<Corpus> {
    let lex = Lexicon::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut codebook: Vec<Vec<f32>> = (0..lex.words.len())
        .map(|_| (0..spec.feat_dim).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect())
        .collect();
    for &(a, b) in &lex.homophones {
        codebook[b] = codebook[a].clone();
    }
    let models: BTreeMap<Flavor, FlavorModel> = [Flavor::Source, Flavor::Target]
        .into_iter()
        .map(|f| (f, FlavorModel::new(&lex, f, &mut rng)))
        .collect();
    let w = Writer {
        lex: &lex,
        spec,
        codebook,
        out,
    };
    let train = w.split("train", SOURCE, spec.train_recordings, true, &models, 1)?;
    let eval_source = w.split("evsrc", SOURCE, spec.eval_recordings, true, &models, 2)?;
    let eval_target = w.split("evtgt", TARGET, spec.eval_recordings, true, &models, 3)?;
    let mut lm_train = w.split("lmsrc", SOURCE, spec.lm_recordings, false, &models, 4)?;
    lm_train.extend(w.split("lmtgt", TARGET, spec.lm_recordings, false, &models, 5)?);

    let source_vocab: BTreeSet<String> = train.iter().flat_map(|r| r.words()).collect();
    let prompts = [
        (SOURCE.to_string(), prompt_sentence(&lex, &lex.source_specific, &lex.homophones.iter().map(|h| h.0).collect::<Vec<_>>())),
        (TARGET.to_string(), prompt_sentence(&lex, &lex.target_specific, &lex.homophones.iter().map(|h| h.1).collect::<Vec<_>>())),
    ]
    .into_iter()
    .collect();
    Ok(Corpus {
        vocab: lex.vocab()?,
        train,
        eval_source,
        eval_target,
        lm_train,
        gazetteer: lex.gazetteer(spec.entity_fraction),
        source_vocab: source_vocab.into_iter().collect(),
        homophones: lex.homophones.iter().map(|&(a, b)| (lex.words[a].clone(), lex.words[b].clone())).collect(),
        prompts,
    })
}

/// Transcripts and metadata without touching the file system.
pub fn generate_in_memory(spec: &CorpusSpec) -> Result<Corpus> {
    build(spec, None)
}

/// Writes the corpus under `out_dir`, which must be absent or empty unless
/// `force` is set.
pub fn generate(spec: &CorpusSpec, out_dir: impl AsRef<Path>, force: bool) -> Result<Corpus> {
    let out = out_dir.as_ref();
    if out.exists() {
        let non_empty = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::arg(format!("{} exists and is not empty", out.display())));
        }
    }
    let features = out.join("features");
    std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let corpus = build(spec, Some(out))?;
    let put = |name: &str, text: String| -> Result<()> {
        let p: PathBuf = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    let lines = |v: &[String]| v.iter().map(|s| format!("{s}\n")).collect::<String>();
    write_manifest(&corpus.train, out.join("train.manifest"))?;
    write_manifest(&corpus.eval_source, out.join("eval_source.manifest"))?;
    write_manifest(&corpus.eval_target, out.join("eval_target.manifest"))?;
    write_manifest(&corpus.lm_train, out.join("lm_train.manifest"))?;
    corpus.vocab.write(out.join("vocab.txt"))?;
    put("gazetteer.txt", lines(&corpus.gazetteer))?;
    put("source_vocab.txt", lines(&corpus.source_vocab))?;
    put(
        "homophones.txt",
        corpus.homophones.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect(),
    )?;
    for (d, p) in &corpus.prompts {
        put(&format!("prompt_{d}.txt"), format!("{p}\n"))?;
    }
    Ok(corpus)
}

/// Corruption settings for synthetic first-pass N-best lists.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub n: usize,
    pub substitution_rate: f64,
    pub insertion_rate: f64,
    pub deletion_rate: f64,
    /// Probability that a substitution of a homophone word picks its partner.
    pub homophone_bias: f64,
    /// Rank at which the uncorrupted reference is placed; `None` leaves it out.
    pub reference_rank: Option<usize>,
    /// Corruption-rate growth per rank below the top.
    pub rank_growth: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            n: 8,
            substitution_rate: 0.15,
            insertion_rate: 0.03,
            deletion_rate: 0.03,
            homophone_bias: 0.8,
            reference_rank: Some(3),
            rank_growth: 0.25,
            seed: 0,
        }
    }
}

/// Counts of edits the generator applied to rank-0 hypotheses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorruptionCounts {
    pub words: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

fn corrupt(
    reference: &[String],
    rates: (f64, f64, f64),
    bias: f64,
    vocabulary: &[String],
    partners: &HashMap<String, String>,
    rng: &mut ChaCha8Rng,
    counts: &mut CorruptionCounts,
) -> Vec<String> {
    let (sub, ins, del) = rates;
    let mut out = Vec::with_capacity(reference.len() + 2);
    let other = |w: &str, rng: &mut ChaCha8Rng| loop {
        let c = &vocabulary[rng.random_range(0..vocabulary.len())];
        if c != w {
            break c.clone();
        }
    };
    for w in reference {
        let r: f64 = rng.random();
        if r < del {
            counts.deletions += 1;
        } else if r < del + sub {
            counts.substitutions += 1;
            match partners.get(w) {
                Some(p) if rng.random_bool(bias) => out.push(p.clone()),
                _ => out.push(other(w, rng)),
            }
        } else {
            out.push(w.clone());
        }
        if rng.random_bool(ins) {
            counts.insertions += 1;
            out.push(vocabulary[rng.random_range(0..vocabulary.len())].clone());
        }
    }
    counts.words += reference.len();
    out
}

/// Synthetic N-best lists: rank 0 is corrupted at the base rates, lower
/// ranks progressively more, and the reference itself sits at
/// `reference_rank`. Scores are `-(rank + 1)`.
pub fn corrupt_nbest(
    records: &[UtteranceRecord],
    vocabulary: &[String],
    homophones: &[(String, String)],
    spec: &CorruptionSpec,
) -> Result<(Vec<NBestList>, CorruptionCounts)> {
    if spec.n < 1 {
        return Err(Error::arg("N-best size must be at least 1"));
    }
    for (name, v) in [
        ("substitution_rate", spec.substitution_rate),
        ("insertion_rate", spec.insertion_rate),
        ("deletion_rate", spec.deletion_rate),
        ("homophone_bias", spec.homophone_bias),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::arg(format!("{name} must lie in [0, 1]")));
        }
    }
    if spec.substitution_rate + spec.deletion_rate > 1.0 {
        return Err(Error::arg("substitution_rate + deletion_rate exceeds 1"));
    }
    if vocabulary.len() < 2 {
        return Err(Error::arg("need at least two words to corrupt with"));
    }
    let partners: HashMap<String, String> = homophones
        .iter()
        .flat_map(|(a, b)| [(a.clone(), b.clone()), (b.clone(), a.clone())])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut counts = CorruptionCounts::default();
    let mut lists = Vec::with_capacity(records.len());
    for rec in records {
        let reference = rec.words();
        let mut hyps: Vec<Vec<String>> = Vec::with_capacity(spec.n);
        let mut level = 0usize;
        for rank in 0..spec.n {
            if spec.reference_rank == Some(rank) {
                hyps.push(reference.clone());
                continue;
            }
            let scale = 1.0 + spec.rank_growth * level as f64;
            let rates = (
                (spec.substitution_rate * scale).min(1.0),
                (spec.insertion_rate * scale).min(1.0),
                (spec.deletion_rate * scale).min(1.0),
            );
            let rates = (rates.0.min(1.0 - rates.2), rates.1, rates.2);
            let h = if level == 0 {
                corrupt(&reference, rates, spec.homophone_bias, vocabulary, &partners, &mut rng, &mut counts)
            } else {
                // a few redraws keep lists mostly free of duplicates
                let mut scratch = CorruptionCounts::default();
                let mut h = Vec::new();
                for _ in 0..20 {
                    h = corrupt(&reference, rates, spec.homophone_bias, vocabulary, &partners, &mut rng, &mut scratch);
                    if !hyps.contains(&h) && h != reference {
                        break;
                    }
                }
                h
            };
            hyps.push(h);
            level += 1;
        }
        let hyps = hyps
            .into_iter()
            .enumerate()
            .map(|(rank, words)| Hypothesis::new(words, -(rank as f64 + 1.0)))
            .collect();
        lists.push(NBestList::new(rec.id(), hyps)?);
    }
    Ok((lists, counts))
}
