use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dspert_core::train::{build_target_grid, loss_all_spans, Smoothing};
use dspert_core::{Graph, HeadKind, Model, ModelConfig};

fn model(head: HeadKind, depth: usize) -> Model {
    let mut c = ModelConfig::toy(40, 3);
    c.head = head;
    c.span_depth = depth;
    if head.is_biaffine() {
        c.use_bilstm = false;
    }
    Model::new(c, 1).unwrap()
}

fn sentence(t: usize) -> Vec<usize> {
    (0..t).map(|i| 2 + (i * 7) % 38).collect()
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for t in [8, 16, 32] {
        let ids = sentence(t);
        for (name, m) in [
            ("dspert-depth2", model(HeadKind::Dspert, 2)),
            ("dspert-depth0", model(HeadKind::Dspert, 0)),
            ("biaffine", model(HeadKind::Biaffine, 0)),
        ] {
            group.bench_with_input(BenchmarkId::new(name, t), &ids, |b, ids| {
                b.iter(|| black_box(m.score_spans(ids).unwrap()))
            });
        }
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    for t in [8, 16, 32] {
        let ids = sentence(t);
        let m = model(HeadKind::Dspert, 2);
        let gold = [(0, 3, 1), (1, 2, 2), (4, 6, 3)];
        let grid = build_target_grid(
            &gold,
            t,
            m.config.max_span,
            m.config.classes(),
            Smoothing {
                epsilon: 0.1,
                distance: 1,
            },
        )
        .unwrap();
        group.bench_with_input(BenchmarkId::new("dspert-depth2", t), &ids, |b, ids| {
            b.iter(|| {
                let mut g = Graph::with_params(&m.store).training(3);
                let out = m.forward(&mut g, ids).unwrap();
                let loss = loss_all_spans(&mut g, out.logits, &grid).unwrap();
                g.backward(loss).unwrap();
                black_box(g.into_param_grads())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, forward_backward);
criterion_main!(benches);
