use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use promptfuse::decoding::{decode_utterance, BeamOptions};
use promptfuse::fusion::{fused_forward, init_model, ModelConfig};
use promptfuse::metrics::wer;
use promptfuse::numcore::Tensor;
use promptfuse::speech::FeatureMatrix;
use promptfuse::synthdata::{Lexicon, CorpusSpec};
use promptfuse::toklm::{lm_score, TokenSeq};

/// Deterministic pseudo-features; the values only need to be non-degenerate.
fn features(frames: usize, dim: usize) -> Tensor<f32> {
    let data = (0..frames * dim).map(|i| ((i * 7919) % 97) as f32 / 48.5 - 1.0).collect();
    Tensor::matrix(frames, dim, data).unwrap()
}

fn bench(c: &mut Criterion) {
    let cfg = ModelConfig::new(50, 16);
    let params = init_model(&cfg, 0).unwrap();
    let vocab = Lexicon::new(&CorpusSpec::default()).unwrap().vocab().unwrap();
    let prompt = TokenSeq::prompt((10..22).collect()).unwrap();
    let hyp = TokenSeq::transcription((30..38).collect()).unwrap();
    let states = features(8, cfg.encoder.subsample_out_dim);

    c.bench_function("lm_score/8 words, 12-token prompt", |b| {
        b.iter(|| lm_score(black_box(&hyp), &prompt, &params, cfg.lm()).unwrap())
    });
    c.bench_function("fused_forward/8-token prefix", |b| {
        b.iter(|| fused_forward(&prompt, black_box(&hyp), &states, &params, &cfg.decoder).unwrap())
    });
    let fm = FeatureMatrix::new(features(32, 16)).unwrap();
    for beam in [1, 4] {
        c.bench_function(&format!("decode_utterance/beam {beam}"), |b| {
            b.iter(|| decode_utterance(&params, &cfg, &vocab, &prompt, black_box(&fm), BeamOptions { beam, max_len: 8 }).unwrap())
        });
    }
    let r: Vec<u32> = (0..200).map(|i| (i * 31 % 17) as u32).collect();
    let h: Vec<u32> = (0..190).map(|i| (i * 29 % 17) as u32).collect();
    c.bench_function("wer/200 words", |b| b.iter(|| wer(black_box(&r), black_box(&h)).unwrap()));
}

criterion_group!(benches, bench);
criterion_main!(benches);
