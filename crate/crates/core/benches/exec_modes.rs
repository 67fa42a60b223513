use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use stner_core::data::{gen_corpus, CorpusConfig, Split, Task, TaskSpec};
use stner_core::decode::{decode_all, DecodeConfig};
use stner_core::model::LossWeights;
use stner_core::par::ExecMode;
use stner_core::train::{mean_loss, prepare};
use stner_core::{Model, ModelConfig, Variant};

fn setup() -> (Task, stner_core::data::SyntheticCorpus, Model) {
    let task = Task::new(&TaskSpec::default()).unwrap();
    let corpus = gen_corpus(
        &task,
        &CorpusConfig {
            n_train: 16,
            n_valid: 16,
            n_test: 8,
            ..CorpusConfig::default()
        },
    )
    .unwrap();
    let model = Model::new(
        ModelConfig::toy(Variant::Parallel),
        task.src_vocab.clone(),
        task.target_vocab(Variant::Parallel),
        1,
    )
    .unwrap();
    (task, corpus, model)
}

fn exec_modes(c: &mut Criterion) {
    let (_, corpus, model) = setup();
    let batch = corpus.split(Split::Train);
    let prepared = prepare(&model, &batch).unwrap();
    let test = corpus.split(Split::Test);
    let weights = LossWeights::default();
    let decode = DecodeConfig {
        beam: 2,
        ..DecodeConfig::default()
    };

    let mut g = c.benchmark_group("batch_loss");
    g.sample_size(10);
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| mean_loss(&model, &prepared, &weights, m).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("decode");
    g.sample_size(10);
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| decode_all(&model, &test, &decode, m).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, exec_modes);
criterion_main!(benches);
