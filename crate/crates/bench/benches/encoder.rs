use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use longnote::attention::{AttentionMode, WindowConfig};
use longnote_bench::{encoder, tokens};

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("encoder_forward");
    g.sample_size(10);
    let dense = encoder(512, AttentionMode::Dense);
    let ids = tokens(512);
    g.bench_function("dense_512", |b| b.iter(|| dense.forward(&ids).unwrap()));
    for len in [1024usize, 2048, 4096] {
        let m = encoder(len, AttentionMode::Windowed(WindowConfig::new(64, vec![0])));
        let ids = tokens(len);
        g.bench_with_input(BenchmarkId::new("windowed_w64", len), &len, |b, _| {
            b.iter(|| m.forward(&ids).unwrap())
        });
    }
    g.finish();
}

fn backward(c: &mut Criterion) {
    let m = encoder(1024, AttentionMode::Windowed(WindowConfig::new(64, vec![0])));
    let ids = tokens(1024);
    c.bench_function("encoder_loss_and_grads_windowed_1024", |b| {
        b.iter(|| m.loss_and_grads(&ids, &longnote::model::Target::Flag(true), None).unwrap())
    });
}

criterion_group!(benches, forward, backward);
criterion_main!(benches);
