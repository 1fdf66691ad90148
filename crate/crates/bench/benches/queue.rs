use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use prompt_kit::queue::{create, LockedQueue, QueueConfig};
use prompt_kit::workload::WorkloadKind;
use prompt_kit_bench::EncodedTrace;

fn spmc(trace: &EncodedTrace, consumers: usize, buffer_bytes: usize) -> u64 {
    let (mut producer, cs) = create(QueueConfig::new(buffer_bytes, consumers)).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = cs
            .into_iter()
            .map(|mut c| {
                s.spawn(move || {
                    let mut n = 0u64;
                    while let Some(chunk) = c.next_chunk().unwrap() {
                        n += chunk.len() as u64;
                    }
                    n
                })
            })
            .collect();
        for ev in trace.events() {
            producer.produce(ev).unwrap();
        }
        producer.end_stream().unwrap();
        producer.close().unwrap();
        handles.into_iter().map(|h| h.join().unwrap()).sum()
    })
}

fn locked(trace: &EncodedTrace, consumers: usize, buffer_bytes: usize) -> u64 {
    let (tx, rxs) = LockedQueue::create(buffer_bytes / 8, consumers);
    std::thread::scope(|s| {
        let handles: Vec<_> = rxs
            .into_iter()
            .map(|rx| {
                s.spawn(move || {
                    let mut buf = Vec::new();
                    let mut n = 0u64;
                    while rx.recv(&mut buf) {
                        n += buf.len() as u64;
                    }
                    n
                })
            })
            .collect();
        for ev in trace.events() {
            tx.send(ev);
        }
        tx.close();
        handles.into_iter().map(|h| h.join().unwrap()).sum()
    })
}

fn queue(c: &mut Criterion) {
    let trace = EncodedTrace::new(WorkloadKind::PointerChase, 100_000);
    let mut g = c.benchmark_group("queue");
    g.sample_size(10);
    g.throughput(Throughput::Elements(trace.len() as u64));
    for consumers in [1, 2, 4] {
        for buffer in [64 << 10, 2 << 20] {
            let id = format!("{consumers}c/{}KiB", buffer >> 10);
            g.bench_with_input(BenchmarkId::new("spmc", &id), &(consumers, buffer), |b, &(c, buf)| {
                b.iter(|| spmc(&trace, c, buf))
            });
        }
    }
    g.bench_function("locked/1c", |b| b.iter(|| locked(&trace, 1, 2 << 20)));
    g.finish();
}

criterion_group!(benches, queue);
criterion_main!(benches);
