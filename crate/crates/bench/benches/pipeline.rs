use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use aste_bench::{random_embeddings, random_matrix, synthetic_corpus, synthetic_sentence};
use aste_core::cells::{mdgru_step, MdgruParams};
use aste_core::corpus::{self, Vocabulary};
use aste_core::decode;
use aste_core::model::{Model, ModelConfig};
use aste_core::{Graph, RunRng};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for size in [64usize, 128, 256] {
        let mut rng = RunRng::named(1, "matmul");
        let a = random_matrix(&mut rng, size, size);
        let b = random_matrix(&mut rng, size, size);
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let av = g.input(a.clone());
                let bv = g.input(b.clone());
                let out = g.matmul(av, bv).unwrap();
                black_box(g.value(out).data()[0])
            });
        });
    }
    group.finish();
}

fn bench_mdgru_step(c: &mut Criterion) {
    let d = 200;
    let mut rng = RunRng::named(2, "mdgru");
    let params = MdgruParams::init("bench", d, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 1, d);
    let h: Vec<_> = (0..3).map(|_| random_matrix(&mut rng, 1, d)).collect();
    c.bench_function("mdgru_step_d200", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let xv = g.input(x.clone());
            let h1 = g.input(h[0].clone());
            let h2 = g.input(h[1].clone());
            let h3 = g.input(h[2].clone());
            let out = mdgru_step(&mut g, &bound, xv, h1, h2, h3).unwrap();
            black_box(g.value(out).data()[0])
        });
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let corpus_set = synthetic_corpus(3, 6, 12);
    let embeddings = random_embeddings(&corpus_set, 64, 3);
    let cfg = ModelConfig {
        d_w: 64,
        d_h: 64,
        layers: 2,
        heads: 4,
        dropout: 0.5,
        max_len: 32,
    };
    let mut mrng = RunRng::named(3, "init");
    let model = Model::init(cfg, &mut mrng).unwrap();
    let encoded = corpus::encode(&corpus_set, embeddings.vocab());
    let batch = corpus::batchify_in_order(&encoded, 6).remove(0);

    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("train_step_n12_d64_l2", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &batch, &embeddings, None).unwrap();
            let v = g.value(loss).scalar_value();
            g.backward(loss).unwrap();
            for p in model.params.all() {
                p.zero_grad();
            }
            black_box(v)
        });
    });
    group.bench_function("infer_n12_d64_l2", |bench| {
        let ids: Vec<usize> = corpus_set[0]
            .tokens
            .iter()
            .map(|t| embeddings.vocab().lookup(t))
            .collect();
        bench.iter(|| {
            let logits = model.infer(&embeddings, &ids).unwrap();
            black_box(logits.seq.data()[0])
        });
    });
    group.finish();
}

fn bench_decode(c: &mut Criterion) {
    let mut rng = RunRng::named(4, "decode");
    let sentence = synthetic_sentence(&mut rng, 40);
    let logits = decode::oracle_logits(&sentence.gold_tags, &sentence.gold_table);
    c.bench_function("decode_triplets_n40", |bench| {
        bench.iter(|| black_box(decode::decode_triplets(&logits).triplets.len()));
    });
}

fn bench_gold_construction(c: &mut Criterion) {
    let mut rng = RunRng::named(5, "gold");
    let sentence = synthetic_sentence(&mut rng, 60);
    c.bench_function("gold_table_n60", |bench| {
        bench.iter(|| {
            let (table, _) = corpus::make_sentiment_table(60, &sentence.triplets);
            black_box(table.cells().len())
        });
    });
    let corpus_set = synthetic_corpus(5, 64, 10);
    c.bench_function("vocab_build_64_sentences", |bench| {
        bench.iter(|| black_box(Vocabulary::build(&corpus_set).len()));
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_mdgru_step,
    bench_forward_backward,
    bench_decode,
    bench_gold_construction
);
criterion_main!(benches);
