use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use acrodis::corpus::{build_pairs, gen_synthetic, SynthConfig, Upsample};
use acrodis::eval::{evaluate, ClassSet, ModelScorer};
use acrodis::exec::ExecMode;
use acrodis::grad::backward;
use acrodis::model::{DualPathModel, EncodedPair, ModelConfig, PathMode, TokenizerOptions, Tokenizers};

fn setup() -> (acrodis::corpus::SynthCorpus, Tokenizers, DualPathModel) {
    let cfg = SynthConfig {
        num_acronyms: 8,
        sentences_per_long_form: 8,
        ..SynthConfig::default()
    };
    let corpus = gen_synthetic(&cfg).unwrap();
    let tok = Tokenizers::train(&corpus.train, &corpus.dictionary, &TokenizerOptions::default()).unwrap();
    let model = DualPathModel::new(
        ModelConfig::toy(tok.bpe.vocab_size(), tok.wordpiece.vocab_size(), PathMode::Dual),
        0,
    )
    .unwrap();
    (corpus, tok, model)
}

fn modes() -> [(&'static str, ExecMode); 2] {
    [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)]
}

fn bench(c: &mut Criterion) {
    let (corpus, tok, model) = setup();
    let pairs = build_pairs(&corpus.train, &corpus.dictionary, Upsample::Off).unwrap();
    let batch: Vec<EncodedPair> = pairs.iter().take(32).map(|p| tok.encode_pair(p).unwrap()).collect();

    let mut g = c.benchmark_group("batch_gradient");
    g.sample_size(10);
    for (name, mode) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &m| {
            b.iter(|| backward(&model, &batch, None, m).unwrap())
        });
    }
    g.finish();

    let scorer = ModelScorer {
        model: &model,
        tokenizers: &tok,
    };
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, mode) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &m| {
            b.iter(|| evaluate(&scorer, &corpus.dev, &corpus.dictionary, ClassSet::Union, m).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
