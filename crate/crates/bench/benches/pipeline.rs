use criterion::{black_box, criterion_group, criterion_main, Criterion};

use mtfa::features::logmel;
use mtfa::postproc::detect_events;
use mtfa::synthesis::synth_background;
use mtfa::{ModelConfig, Mtfa};

fn pipeline(c: &mut Criterion) {
    let clip = synth_background(10.0, 44100, 1);
    c.bench_function("logmel 10 s @ 44.1 kHz", |b| b.iter(|| logmel(black_box(&clip)).unwrap()));

    let spec = logmel(&clip).unwrap();
    let toy = Mtfa::new(
        ModelConfig {
            channels: 8,
            gru_units: 8,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    c.bench_function("predict 10 s, C=8 U=8", |b| b.iter(|| toy.predict(black_box(&spec)).unwrap()));

    let probs = toy.predict(&spec).unwrap().probs;
    c.bench_function("detect_events 501 frames", |b| {
        b.iter(|| detect_events(black_box(&probs), 0.4, 27, 0.02, "event").unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = pipeline
}
criterion_main!(benches);
