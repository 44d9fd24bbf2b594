use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use vistex::evaluation::detect_queries;
use vistex::exec::Exec;
use vistex::synthdata::{render_with, Dataset, DatasetConfig};
use vistex::toyovlm::{DecodeParams, OvlmConfig, ToyOvlm, Vocab};
use vistex::training::base_text_classes;

fn setup() -> (Dataset, ToyOvlm) {
    let ds = Dataset::render(&DatasetConfig { images_per_class: 2, ..Default::default() }, 0).expect("dataset");
    let names: Vec<String> = base_text_classes(&ds).into_iter().map(|(_, n)| n).collect();
    let cfg = OvlmConfig::default();
    let vocab = Vocab::new(&names, cfg.vocab_size).expect("vocab");
    let ovlm = ToyOvlm::new(cfg, vocab, 0).expect("model");
    (ds, ovlm)
}

fn batch_forward(c: &mut Criterion) {
    let (ds, ovlm) = setup();
    let prompt = ovlm.tokenize_text(&base_text_classes(&ds)).expect("prompt");
    let ids: Vec<usize> = (0..16).collect();
    let mut group = c.benchmark_group("detect_16_images");
    group.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| detect_queries(&ovlm, black_box(&prompt), &ds, &ids, &DecodeParams::default(), exec).expect("detect"))
        });
    }
    group.finish();
}

fn dataset_render(c: &mut Criterion) {
    let cfg = DatasetConfig { images_per_class: 4, ..Default::default() };
    let mut group = c.benchmark_group("render_64_images");
    group.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| render_with(black_box(&cfg), 0, exec).expect("render"))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_forward, dataset_render);
criterion_main!(benches);
