use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use promptfuse::decoding::{decode_corpus, parse_nbest, read_nbest, write_nbest, BeamOptions, NBestList};
use promptfuse::fusion::{format_gate_report, gate_report as gates, init_model};
use promptfuse::metrics::{evaluate, recall_by};
use promptfuse::rerank::{rerank_all, select_best, HistorySource, Prompt, PromptKind, PromptSource};
use promptfuse::synthdata::{
    corrupt_nbest, generate, load_features, parse_manifest, read_manifest, CorpusSpec, CorruptionSpec, UtteranceRecord,
};
use promptfuse::toklm::Vocab;
use promptfuse::trainer::{format_loss_log, phase3_grad_check, phase_seed, train_phase, TrainConfig, TrainData};
use promptfuse::Error;

use crate::bundle::Bundle;
use crate::{
    DecodeArgs, DecodePromptMode, EvalArgs, GateReportArgs, GradcheckArgs, PhaseArg, RerankArgs, RerankPromptMode,
    SynthGenArgs, TrainArgs,
};

/// A command that ran to completion but whose verdict is a failure.
#[derive(Debug)]
pub struct Failed {
    pub code: u8,
    pub msg: String,
}

impl fmt::Display for Failed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Argument(msg.into()).into()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

/// Refuses to let an output overwrite one of the command's inputs.
fn distinct_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let Ok(out) = out.canonicalize() else {
        return Ok(());
    };
    for input in inputs {
        if input.canonicalize().is_ok_and(|i| i == out) {
            return Err(usage(format!("output {} would overwrite an input", out.display())));
        }
    }
    Ok(())
}

fn parent(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn word_list(path: &Path) -> Result<HashSet<String>> {
    Ok(read_text(path)?.split_whitespace().map(str::to_owned).collect())
}

pub fn synth_gen(a: &SynthGenArgs) -> Result<()> {
    let spec = CorpusSpec {
        vocab_size: a.vocab_size,
        train_recordings: a.train_recordings,
        eval_recordings: a.eval_recordings,
        lm_recordings: a.lm_recordings,
        utterances_per_recording: a.utterances_per_recording,
        noise_std: a.noise_std,
        domain_purity: a.domain_purity,
        seed: a.seed,
        ..CorpusSpec::default()
    };
    let reference_rank = match a.nbest_reference_rank.as_str() {
        "none" => None,
        r => Some(r.parse().map_err(|_| usage(format!("--nbest-reference-rank: bad value {r:?}")))?),
    };
    let corpus = generate(&spec, &a.out, a.force)?;
    println!(
        "wrote {}: {} train, {} source eval, {} target eval, {} LM utterances; {} tokens",
        a.out.display(),
        corpus.train.len(),
        corpus.eval_source.len(),
        corpus.eval_target.len(),
        corpus.lm_train.len(),
        corpus.vocab.len()
    );
    if let Some(n) = a.nbest {
        let words: Vec<String> = corpus.vocab.words().map(str::to_owned).collect();
        for (split, records) in [("eval_source", &corpus.eval_source), ("eval_target", &corpus.eval_target)] {
            let cspec = CorruptionSpec {
                n,
                substitution_rate: a.nbest_substitution_rate,
                insertion_rate: a.nbest_insertion_rate,
                deletion_rate: a.nbest_deletion_rate,
                homophone_bias: a.nbest_homophone_bias,
                reference_rank,
                seed: a.seed,
                ..CorruptionSpec::default()
            };
            let (lists, counts) = corrupt_nbest(records, &words, &corpus.homophones, &cspec)?;
            let path = a.out.join(format!("nbest_{split}.txt"));
            write_nbest(&lists, &path)?;
            println!(
                "wrote {}: rank-0 edits {} sub / {} ins / {} del over {} words",
                path.display(),
                counts.substitutions,
                counts.insertions,
                counts.deletions,
                counts.words
            );
        }
    }
    Ok(())
}

fn feature_dim(data: &Path, records: &[UtteranceRecord]) -> Result<usize> {
    let first = records
        .iter()
        .find(|r| r.has_features())
        .ok_or_else(|| Error::Data(format!("{}: no utterance with features", data.display())))?;
    Ok(load_features(data, first)?.dim())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let vocab = Vocab::read(a.data.join("vocab.txt"))?;
    let train_records = read_manifest(a.data.join("train.manifest"))?;
    let (mut config, mut params) = match &a.resume {
        Some(ckpt) => {
            let b = Bundle::load(ckpt)?;
            if b.vocab != vocab {
                return Err(Error::Data(format!("{} was trained with a different vocabulary", ckpt.display())).into());
            }
            (b.config, b.params)
        }
        None => {
            let config = TrainConfig::new(vocab.len(), feature_dim(&a.data, &train_records)?);
            (config, promptfuse::numcore::ParamStore::new())
        }
    };
    if let Some(path) = &a.config {
        config = TrainConfig::read(path, config)?;
    }
    if a.unfreeze_last_lm_layer {
        config = config.apply_text("phase3.unfreeze_last_lm_layer = true", "--unfreeze-last-lm-layer")?;
    }
    if a.resume.is_none() {
        params = init_model(&config.model, a.seed)?;
    }
    let phases: Vec<u8> = match a.phase {
        PhaseArg::P0 => vec![0],
        PhaseArg::P1 => vec![1],
        PhaseArg::P2 => vec![2],
        PhaseArg::P3 => vec![3],
        PhaseArg::All => vec![0, 1, 2, 3],
    };

    let mut text_data = None;
    let mut paired_data = None;
    let mut log = Vec::new();
    for n in phases {
        let spec = config.phase(n)?.clone();
        let data = if n == 0 {
            if text_data.is_none() {
                text_data = Some(TrainData::text(read_manifest(a.data.join("lm_train.manifest"))?, &vocab)?);
            }
            text_data.as_ref().expect("loaded")
        } else {
            if paired_data.is_none() {
                paired_data = Some(TrainData::paired(train_records.clone(), &a.data, &vocab)?);
            }
            paired_data.as_ref().expect("loaded")
        };
        let report = train_phase(&spec, data, &mut params, &config, phase_seed(a.seed, n))?;
        let tail = &report.log[report.log.len().saturating_sub(50)..];
        let mean = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
        println!(
            "phase {n}: {} trainable parameters, {} steps, mean loss over last {} steps {mean:.4}",
            report.trainable_params,
            spec.steps,
            tail.len()
        );
        log.extend(report.log);
    }
    params.unfreeze_all();
    Bundle { params, config, vocab }.save(&a.out)?;
    if let Some(path) = &a.log {
        write_text(path, &format_loss_log(&log))?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn decode(a: &DecodeArgs) -> Result<()> {
    distinct_output(&a.out, &[&a.manifest, &a.model])?;
    let b = Bundle::load(&a.model)?;
    let records = read_manifest(&a.manifest)?;
    let base = parent(&a.manifest);
    let prompts = match a.prompt_mode {
        DecodePromptMode::None => PromptSource::Fixed(Prompt::none()),
        DecodePromptMode::File => {
            let path = a
                .prompt_file
                .as_ref()
                .ok_or_else(|| usage("--prompt-mode file needs --prompt-file"))?;
            PromptSource::Fixed(Prompt::new(read_text(path)?, PromptKind::Description))
        }
        DecodePromptMode::HistoryGt => PromptSource::History {
            records: &records,
            source: HistorySource::GroundTruth,
        },
        DecodePromptMode::HistoryHyp => PromptSource::History {
            records: &records,
            source: HistorySource::Hypothesis,
        },
    };
    if a.prompt_file.is_some() && a.prompt_mode != DecodePromptMode::File {
        return Err(usage("--prompt-file requires --prompt-mode file"));
    }
    let opts = BeamOptions {
        beam: a.beam,
        max_len: a.max_len.unwrap_or(b.config.model.lm().transcription_room()),
    };
    let lists = decode_corpus(&records, &base, &b.params, &b.config.model, &b.vocab, &prompts, opts)?;
    write_nbest(&lists, &a.out)?;
    println!("decoded {} utterances into {}", lists.len(), a.out.display());
    Ok(())
}

pub fn rerank(a: &RerankArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.nbest, &a.lm];
    inputs.extend(a.manifest.as_deref());
    distinct_output(&a.out, &inputs)?;
    let lists = read_nbest(&a.nbest)?;
    let b = Bundle::load(&a.lm)?;
    let records = a.manifest.as_ref().map(read_manifest).transpose()?;
    let history = |source| -> Result<PromptSource<'_>> {
        let records = records
            .as_deref()
            .ok_or_else(|| usage("history prompts need --manifest"))?;
        Ok(PromptSource::History { records, source })
    };
    let prompts = match (&a.prompt_file, a.prompt_mode) {
        (Some(path), _) => PromptSource::Fixed(Prompt::new(read_text(path)?, PromptKind::Description)),
        (None, None | Some(RerankPromptMode::None)) => PromptSource::Fixed(Prompt::none()),
        (None, Some(RerankPromptMode::HistoryGt)) => history(HistorySource::GroundTruth)?,
        (None, Some(RerankPromptMode::HistoryHyp)) => history(HistorySource::Hypothesis)?,
    };
    let reranked = rerank_all(&lists, &prompts, &b.params, b.config.model.lm(), &b.vocab)?;
    let changed = reranked.iter().filter(|r| r.selected != 0).count();
    let out: Vec<NBestList> = reranked.into_iter().map(|r| r.list).collect();
    write_nbest(&out, &a.out)?;
    println!(
        "reranked {} lists into {} ({changed} selections differ from rank 0)",
        out.len(),
        a.out.display()
    );
    Ok(())
}

/// The words a hypothesis file proposes per utterance id.
fn read_hypotheses(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    let text = read_text(path)?;
    let origin = path.display().to_string();
    match parse_nbest(&text, &origin) {
        Ok(lists) => lists
            .into_iter()
            .map(|l| {
                let hyps = l.hypotheses();
                let pick = if hyps.iter().all(|h| h.lm_score.is_some()) {
                    let scores: Vec<f64> = hyps.iter().map(|h| h.lm_score.expect("checked")).collect();
                    select_best(&scores)?
                } else {
                    0
                };
                Ok((l.utterance_id.clone(), hyps[pick].words.clone()))
            })
            .collect(),
        Err(nbest_err) => match parse_manifest(&text, &origin) {
            Ok(records) => Ok(records.iter().map(|r| (r.id(), r.words())).collect()),
            Err(_) => Err(nbest_err).context("hypotheses are neither an N-best file nor a manifest"),
        },
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let refs = read_manifest(&a.reference)?;
    let mut hyps = read_hypotheses(&a.hyp)?;
    let dir = parent(&a.reference);
    let gazetteer = word_list(&a.gazetteer.clone().unwrap_or_else(|| dir.join("gazetteer.txt")))?;
    let source_vocab = word_list(&a.source_vocab.clone().unwrap_or_else(|| dir.join("source_vocab.txt")))?;

    let references: Vec<Vec<String>> = refs.iter().map(UtteranceRecord::words).collect();
    let hypotheses: Vec<Vec<String>> = refs
        .iter()
        .map(|r| {
            hyps.remove(&r.id())
                .ok_or_else(|| Error::Data(format!("{}: no hypothesis for {}", a.hyp.display(), r.id())))
        })
        .collect::<Result<_, _>>()?;
    if let Some(extra) = hyps.keys().min() {
        return Err(Error::Data(format!("{}: utterance {extra} is not in the reference", a.hyp.display())).into());
    }
    let report = evaluate(&references, &hypotheses, &gazetteer, &source_vocab)?;
    print!("{}", report.to_text());
    if let Some(path) = &a.homophones {
        let words = word_list(path)?;
        let r = recall_by(&references, &hypotheses, |w| words.contains(w))?;
        match r.value() {
            Some(v) => println!("homophone_recall={v:.6}"),
            None => println!("homophone_recall=undefined"),
        }
        println!("homophone_hits={}\nhomophone_total={}", r.hits, r.total);
    }
    Ok(())
}

pub fn gate_report(a: &GateReportArgs) -> Result<()> {
    let b = Bundle::load(&a.model)?;
    print!("{}", format_gate_report(&gates(&b.params)?));
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut config = TrainConfig::new(50, 16);
    if let Some(path) = &a.config {
        config = TrainConfig::read(path, config)?;
    }
    let report = phase3_grad_check(&config.model, a.gate, a.samples, a.seed)?;
    println!("coordinates={}", report.checks.len());
    println!("max_rel_error={:.3e}", report.max_rel_error);
    if let Some(w) = report.worst() {
        println!(
            "worst={}[{}] analytic={:.9e} numeric={:.9e}",
            w.path, w.index, w.analytic, w.numeric
        );
    }
    if !(report.max_rel_error < a.tolerance) {
        return Err(Failed {
            code: 3,
            msg: format!("max relative error {:.3e} is not below {:e}", report.max_rel_error, a.tolerance),
        }
        .into());
    }
    println!("ok");
    Ok(())
}
