use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use favae::datasets::gen_2d_reaching;
use favae::model::LadderConfig;
use favae::train::{TrainConfig, Trainer};

fn train_step(c: &mut Criterion) {
    let data = gen_2d_reaching(100).unwrap();
    let mut group = c.benchmark_group("train_step_reaching_t100");
    group.sample_size(20);
    for &ch in &[16usize, 32, 64] {
        let cfg = TrainConfig {
            model: LadderConfig { channels: ch, ..LadderConfig::default() },
            epochs: 1_000_000,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg, data.clone()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(ch), &ch, |b, _| b.iter(|| trainer.step().unwrap()));
    }
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
