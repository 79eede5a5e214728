use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use chn_bench::random_codes;
use chn_core::hashing::{hamming, search};

fn bench_hamming_pair(c: &mut Criterion) {
    let mut group = c.benchmark_group("hamming_pair");
    for bits in [16usize, 64, 128] {
        let codes = random_codes(2, bits, 1);
        group.bench_with_input(BenchmarkId::from_parameter(bits), &bits, |b, &bits| {
            b.iter(|| hamming(black_box(codes.item(0)), black_box(codes.item(1)), bits).unwrap())
        });
    }
    group.finish();
}

fn bench_search_scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("search_scan");
    for n in [1_000usize, 10_000, 100_000] {
        let db = random_codes(n, 64, 2);
        let query = random_codes(1, 64, 3);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| search(black_box(&db), black_box(query.item(0)), 50).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_hamming_pair, bench_search_scan);
criterion_main!(benches);
