use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use cosim::components::rover::{rover_step, DriveCommand, PhysicsConfig, RoverState};
use cosim::falsify::{robustness, Requirement};
use cosim::transport::{decode_frame, encode_frame, MessageEnvelope, Topic};
use cosim::Trace;
use serde_json::json;

fn bench_rover(c: &mut Criterion) {
    let cfg = PhysicsConfig::default();
    let cmd = DriveCommand { v: 5.0, phi: 0.3 };
    c.bench_function("rover_step/10_substeps", |b| {
        b.iter_batched(
            RoverState::default,
            |s| rover_step(black_box(&s), cmd, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("rover_step/1000_steps", |b| {
        b.iter(|| {
            let mut s = RoverState::default();
            for _ in 0..1000 {
                s = rover_step(&s, cmd, &cfg).unwrap();
            }
            s
        })
    });
}

fn bench_frames(c: &mut Criterion) {
    let env = MessageEnvelope::new(
        Topic::new("state").unwrap(),
        42,
        1_000_000,
        json!({"x": 1.25, "y": -3.5, "theta": 0.7, "t": 12.0, "step": 1200}),
    );
    let frame = encode_frame(&env).unwrap();
    c.bench_function("frame/encode", |b| b.iter(|| encode_frame(black_box(&env)).unwrap()));
    c.bench_function("frame/decode", |b| {
        b.iter(|| decode_frame(&mut black_box(frame.as_slice())).unwrap())
    });
}

fn bench_robustness(c: &mut Criterion) {
    let mut trace = Trace::with_signals(["alt"]);
    for i in 0..10_000 {
        let t = i as f64 * 0.01;
        trace.push("alt", t, 25.0 + (t * 0.3).sin());
    }
    let req: Requirement = "always alt > 0.0".parse().unwrap();
    c.bench_function("robustness/10k_samples", |b| b.iter(|| robustness(black_box(&trace), &req).unwrap()));
}

criterion_group!(benches, bench_rover, bench_frames, bench_robustness);
criterion_main!(benches);
