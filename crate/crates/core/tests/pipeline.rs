//! End-to-end checks through the public library surface: corpus files,
//! checkpoints, N-best files, a short training run, decoding and reranking.

use std::collections::BTreeMap;
use std::path::Path;

use promptfuse::decoding::{decode_corpus, format_nbest, parse_nbest, BeamOptions, NBestList};
use promptfuse::fusion::{gate_report, init_model};
use promptfuse::metrics::corpus_edits;
use promptfuse::numcore::ParamStore;
use promptfuse::rerank::{rerank_all, HistorySource, Prompt, PromptKind, PromptSource};
use promptfuse::synthdata::{corrupt_nbest, generate, Corpus, CorpusSpec, CorruptionSpec, TARGET};
use promptfuse::trainer::{phase_seed, train_phase, TrainConfig, TrainData};

fn spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        train_recordings: 6,
        eval_recordings: 2,
        lm_recordings: 4,
        utterances_per_recording: 4,
        seed,
        ..Default::default()
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn refs(records: &[promptfuse::synthdata::UtteranceRecord]) -> Vec<Vec<String>> {
    records.iter().map(|r| r.words()).collect()
}

#[test]
fn corpus_generation_is_reproducible_and_reloads() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = generate(&spec(9), a.path(), false).unwrap();
    generate(&spec(9), b.path(), false).unwrap();
    generate(&spec(10), c.path(), false).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
    assert_ne!(tree(a.path()), tree(c.path()));
    assert_eq!(Corpus::load(a.path()).unwrap(), first);
    // a populated directory is only overwritten on request
    assert!(generate(&spec(9), a.path(), false).is_err());
    assert!(generate(&spec(9), a.path(), true).is_ok());
}

#[test]
fn nbest_files_round_trip_and_contain_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate(&spec(2), dir.path(), false).unwrap();
    let words: Vec<String> = c.vocab.words().map(String::from).collect();
    let (lists, _) = corrupt_nbest(&c.eval_target, &words, &c.homophones, &CorruptionSpec { n: 5, ..Default::default() }).unwrap();
    let back = parse_nbest(&format_nbest(&lists), "mem").unwrap();
    assert_eq!(back, lists);

    let reference = refs(&c.eval_target);
    let top: Vec<Vec<String>> = lists.iter().map(|l| l.hypotheses()[0].words.clone()).collect();
    let oracle: Vec<Vec<String>> = lists
        .iter()
        .zip(&reference)
        .map(|(l, r)| {
            l.hypotheses()
                .iter()
                .min_by_key(|h| corpus_edits(&[r], &[&h.words]).unwrap().edits())
                .unwrap()
                .words
                .clone()
        })
        .collect();
    assert_eq!(corpus_edits(&reference, &oracle).unwrap().edits(), 0);
    assert!(corpus_edits(&reference, &top).unwrap().edits() > 0);
}

#[test]
fn checkpoints_round_trip_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::new(50, 16);
    let p = init_model(&cfg.model, 4).unwrap();
    let path = dir.path().join("m.ckpt");
    p.save(&path).unwrap();
    let q: ParamStore<f32> = ParamStore::load(&path).unwrap();
    assert_eq!(p.len(), q.len());
    for ((ka, ta), (kb, tb)) in p.iter().zip(q.iter()) {
        assert_eq!(ka, kb);
        assert_eq!(ta.shape(), tb.shape());
        let bits = |t: &promptfuse::numcore::Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb), "{ka}");
    }
    std::fs::write(&path, b"garbage").unwrap();
    assert!(ParamStore::<f32>::load(&path).is_err());
}

#[test]
fn short_training_then_decode_and_rerank() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate(&spec(1), dir.path(), false).unwrap();
    let mut cfg = TrainConfig::new(c.vocab.len(), 16);
    let steps = [20, 20, 10, 10];
    for (p, s) in cfg.phases.iter_mut().zip(steps) {
        p.steps = s;
        p.warmup_steps = 2;
    }
    let text = TrainData::text(c.lm_train.clone(), &c.vocab).unwrap();
    let paired = TrainData::paired(c.train.clone(), dir.path(), &c.vocab).unwrap();
    let mut params = init_model(&cfg.model, 1).unwrap();
    for (i, phase) in cfg.phases.clone().iter().enumerate() {
        let data = if i == 0 { &text } else { &paired };
        let report = train_phase(phase, data, &mut params, &cfg, phase_seed(1, i as u8)).unwrap();
        assert_eq!(report.log.len(), phase.steps);
        assert!(report.log.iter().all(|r| r.loss.is_finite()));
    }
    assert!(gate_report(&params).unwrap().iter().any(|g| g.xattn > 0.0));

    let opts = BeamOptions { beam: 3, max_len: cfg.model.lm().transcription_room() };
    let title = Prompt::new(c.prompt(TARGET).unwrap(), PromptKind::Title);
    let decoded = decode_corpus(&c.eval_target, dir.path(), &params, &cfg.model, &c.vocab, &PromptSource::Fixed(title.clone()), opts).unwrap();
    assert_eq!(decoded.len(), c.eval_target.len());
    for (l, r) in decoded.iter().zip(&c.eval_target) {
        assert_eq!(l.utterance_id, r.id());
        assert!(!l.is_empty() && l.len() <= 3);
        let scores: Vec<f64> = l.hypotheses().iter().map(|h| h.first_pass_score).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]) && scores[0] <= 0.0, "{scores:?}");
    }

    let history = PromptSource::History { records: &c.eval_target, source: HistorySource::Hypothesis };
    let reranked = rerank_all(&decoded, &history, &params, cfg.model.lm(), &c.vocab).unwrap();
    for r in &reranked {
        let scores: Vec<f64> = r.list.hypotheses().iter().map(|h| h.lm_score.unwrap()).collect();
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(scores[r.selected], best);
    }
    let lists: Vec<NBestList> = reranked.into_iter().map(|r| r.list).collect();
    assert_eq!(parse_nbest(&format_nbest(&lists), "mem").unwrap(), lists);
}
