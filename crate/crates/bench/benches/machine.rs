use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use guard_core::demos;
use guard_core::verify::fuzz_programs;
use guard_core::{assemble, translate, AccessKind, Descriptor, Layer, Machine, Suid};

fn netfilter(c: &mut Criterion) {
    let img = demos::netfilter();
    let packets = demos::netfilter_packets(7, 200);
    let mut g = c.benchmark_group("netfilter");
    g.throughput(Throughput::Elements(200));
    g.bench_function("run_200_packets", |b| {
        b.iter_batched(
            || Machine::load(&img).with_input(packets.clone()),
            |mut m| black_box(m.run(10_000_000).steps),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn tutorial(c: &mut Criterion) {
    let img = demos::tutorial();
    c.bench_function("tutorial_load_and_run", |b| {
        b.iter(|| {
            let mut m = Machine::load(black_box(&img));
            black_box(m.run(1000).outcome)
        })
    });
}

fn toolchain(c: &mut Criterion) {
    let corpus = demos::corpus();
    c.bench_function("assemble_corpus", |b| {
        b.iter(|| {
            for (_, src) in &corpus {
                black_box(assemble(src).unwrap());
            }
        })
    });
}

fn mmu(c: &mut Criterion) {
    let d = Descriptor {
        suid: Suid(0x1000),
        length: 64,
        perms: "S:r-- U:rw- K:---".parse().unwrap(),
        gate_to: None,
        handler: false,
    };
    c.bench_function("translate", |b| {
        b.iter(|| {
            for off in 0..80u64 {
                let _ = black_box(translate(&d, off, AccessKind::Write, Layer::Utilities));
            }
        })
    });
}

fn fuzz(c: &mut Criterion) {
    let mut g = c.benchmark_group("fuzz");
    g.sample_size(10);
    g.bench_function("100_programs", |b| {
        b.iter(|| black_box(fuzz_programs(42, 100).ok()))
    });
    g.finish();
}

criterion_group!(benches, netfilter, tutorial, toolchain, mmu, fuzz);
criterion_main!(benches);
