// SPDX-License-Identifier: Apache-2.0

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::{RngCore, SeedableRng};

use vtpm_bench::{device_pair, extend_frame, read_frame, startup_frame};
use vtpm_core::bench::stats::{empirical_cdf, p95};
use vtpm_core::microvm::boot;
use vtpm_core::pool::CostModel;
use vtpm_core::wire::{decode_command, decode_response};
use vtpm_core::{LocalProvisioner, MockTpmState, PoolState, Setup, VmConfig};

fn wire(c: &mut Criterion) {
    let mut g = c.benchmark_group("wire");
    let frame = extend_frame(11, &[7; 32]);
    g.throughput(Throughput::Bytes(frame.len() as u64));
    g.bench_function("decode_command", |b| b.iter(|| decode_command(&frame).unwrap()));
    let rsp = MockTpmState::new(1).execute_frame(&startup_frame());
    g.bench_function("decode_response", |b| b.iter(|| decode_response(&rsp).unwrap()));
    g.finish();
}

fn pcr(c: &mut Criterion) {
    let mut tpm = MockTpmState::new(1);
    tpm.execute_frame(&startup_frame());
    let extend = extend_frame(11, &[7; 32]);
    let read = read_frame(11);
    c.bench_function("tpm/pcr_extend", |b| b.iter(|| tpm.execute_frame(&extend)));
    c.bench_function("tpm/pcr_read", |b| b.iter(|| tpm.execute_frame(&read)));
}

fn virtqueue(c: &mut Criterion) {
    let (mut driver, mut device) = device_pair(64);
    let frame = read_frame(0);
    c.bench_function("virtqueue/round_trip", |b| {
        b.iter(|| {
            driver.submit(&frame, 4096).unwrap();
            device.process_queue().unwrap();
            driver.poll_used().unwrap().unwrap()
        })
    });
}

fn pool(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let prov = LocalProvisioner::new(dir.path(), 1).with_cost(CostModel {
        seed_derivation_rounds: 10,
    });
    let mut g = c.benchmark_group("pool");
    g.sample_size(10);
    g.bench_function("acquire_and_retire_16", |b| {
        b.iter_batched(
            || PoolState::create(16, &prov).unwrap(),
            |pool| {
                while let Ok(inst) = pool.acquire() {
                    pool.retire(&inst.instance_id).unwrap();
                }
                pool
            },
            BatchSize::PerIteration,
        )
    });
    g.finish();
}

fn boots(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let prov = LocalProvisioner::new(dir.path(), 1);
    let mut g = c.benchmark_group("boot");
    g.sample_size(20);
    for setup in Setup::ALL {
        let cfg = VmConfig::new(setup);
        g.bench_function(setup.label(), |b| {
            b.iter_batched(
                || match setup {
                    Setup::Pool => Some(PoolState::create(1, &prov).unwrap()),
                    _ => None,
                },
                |pool| boot(&cfg, 0, pool.as_ref(), Some(&prov)).unwrap(),
                BatchSize::PerIteration,
            )
        });
    }
    g.finish();
}

fn stats(c: &mut Criterion) {
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    let xs: Vec<f64> = (0..1000).map(|_| (rng.next_u32() % 100_000) as f64 / 100.0).collect();
    c.bench_function("stats/p95_1000", |b| b.iter(|| p95(&xs).unwrap()));
    c.bench_function("stats/cdf_1000", |b| b.iter(|| empirical_cdf(&xs)));
}

criterion_group!(benches, wire, pcr, virtqueue, pool, boots, stats);
criterion_main!(benches);
