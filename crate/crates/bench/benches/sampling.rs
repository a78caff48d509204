use criterion::{criterion_group, criterion_main, Criterion};
use lvfm_bench::fixture;
use lvfm_core::samplers::{Network, SamplerKind};

fn forward(c: &mut Criterion) {
    let (model, params, cond) = fixture();
    let x = cond.x_m().clone();
    c.bench_function("forward", |b| {
        b.iter(|| model.forward(&params, &x, 0.0, 1.0, &cond).unwrap())
    });
}

fn samplers(c: &mut Criterion) {
    let (model, params, cond) = fixture();
    let field = Network::new(&model, &params);
    let mut group = c.benchmark_group("sampler");
    group.sample_size(10);
    for kind in [
        SamplerKind::OneStep,
        SamplerKind::Euler { steps: 25 },
        SamplerKind::Cfg { guidance: 2.0, steps: 25 },
    ] {
        let mut seed = 0;
        group.bench_function(kind.label(), |b| {
            b.iter(|| {
                seed += 1;
                kind.run(&field, &cond, seed).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, samplers);
criterion_main!(benches);
