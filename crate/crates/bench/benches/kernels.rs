use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use losh::model::forward;
use losh::train::{compute_flows, objective, objective_grads, ObjectiveInput};
use losh::{
    farneback_flow, fbc_loss, select_best, ConsistencyMode, FlowParams, LossWeights, ToyConfig, ToyParams,
};
use losh_bench::easy_sample;

fn flow(c: &mut Criterion) {
    let s = easy_sample(0);
    let a = s.clip.frames()[1].to_gray();
    let b = s.clip.frames()[2].to_gray();
    let p = FlowParams::default();
    c.bench_function("farneback_64x64", |bench| {
        bench.iter(|| farneback_flow(black_box(&a), black_box(&b), &p).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let s = easy_sample(1);
    let cfg = ToyConfig::default();
    let params = ToyParams::init(&cfg).unwrap();
    let frames = s.clip.frames();
    let (long, short) = (&s.expression.long, &s.expression.short);
    c.bench_function("toy_forward_5_frames", |bench| {
        bench.iter(|| forward(&params, &cfg, black_box(frames), long, Some(short)).unwrap())
    });

    let out = forward(&params, &cfg, frames, long, Some(short)).unwrap();
    let w = LossWeights::default();
    let (fh, fw) = out.cache.feature_size();
    let gt = s.gt.resized(fh, fw).unwrap();
    c.bench_function("select_best_4_queries", |bench| {
        bench.iter(|| select_best(black_box(&out.predictions), &gt, &w).unwrap())
    });

    let flows = compute_flows(&s, &FlowParams::default(), 2, false).unwrap();
    let k = s.clip.annotated()[1];
    let nf = flows.iter().find(|(a, _)| *a == k).unwrap().1.downscaled(fh, fw).unwrap();
    c.bench_function("fbc_loss_4_neighbours", |bench| {
        bench.iter(|| fbc_loss(black_box(&out.features), k, &nf, ConsistencyMode::ForwardBackward, false).unwrap())
    });

    let input = ObjectiveInput {
        frames,
        gt: &s.gt,
        long,
        short: Some(short),
        fbc: Some((k, &nf)),
    };
    let obj = objective(&params, &cfg, &input, &w, ConsistencyMode::ForwardBackward, false).unwrap();
    c.bench_function("toy_objective_backward", |bench| {
        bench.iter(|| objective_grads(&params, &cfg, black_box(&obj)).unwrap())
    });
}

criterion_group!(benches, flow, model);
criterion_main!(benches);
