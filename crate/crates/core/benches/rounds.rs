use criterion::{criterion_group, criterion_main, Criterion};
use formseek::config::RunConfig;
use formseek::simkernel::run;
use formseek::Execution;

fn rounds(c: &mut Criterion) {
    let mut group = c.benchmark_group("500 rounds, 6 agents");
    group.sample_size(10);
    for (name, execution) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        let setup = RunConfig { rounds: 500, execution, ..RunConfig::default() }.build().unwrap();
        group.bench_function(name, |b| b.iter(|| run(&setup).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, rounds);
criterion_main!(benches);
