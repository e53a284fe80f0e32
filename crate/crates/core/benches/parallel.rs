//! Sequential vs data-parallel execution of the hot paths.
//!
//! Build with `--no-default-features` to see the sequential fallback for
//! the parallel-only rows as well.

#[path = "../tests/common/mod.rs"]
mod common;

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use moformer::crystal::{build_graph, neighbor_list, Cgcnn, CgcnnConfig, CrystalStructure};
use moformer::encoder::{CGCNN_PREFIX, MOFORMER_PREFIX};
use moformer::exec;
use moformer::rng;
use moformer::tensor::{Graph, ParamStore, Tensor};
use moformer::text::{build_vocabulary, parse_mofid, MofId, TokenSequence};
use moformer::transformer::{Moformer, TransformerConfig};

const BATCH: usize = 32;

fn text_batch() -> (Moformer, ParamStore, Vec<TokenSequence>) {
    let mofids: Vec<MofId> = (0..BATCH).map(|k| parse_mofid(&common::toy_mofid(k)).unwrap()).collect();
    let vocab = build_vocabulary(&mofids).unwrap();
    let cfg = TransformerConfig { d_emb: 64, n_heads: 4, n_layers: 2, d_ff: 128, max_len: 64, vocab_size: vocab.len() };
    let model = Moformer::new(cfg, MOFORMER_PREFIX).unwrap();
    let mut params = ParamStore::new();
    model.init_params(&mut params, &mut rng::stream(0, "bench")).unwrap();
    let seqs = mofids.iter().map(|m| vocab.encode_to_len(m, 64).unwrap()).collect();
    (model, params, seqs)
}

fn structures() -> Vec<CrystalStructure> {
    (0..BATCH).map(common::toy_structure).collect()
}

fn moformer_batch(c: &mut Criterion) {
    let (model, params, seqs) = text_batch();
    let embed = |s: &TokenSequence| {
        let mut g = Graph::new(&params);
        let v = model.embed(&mut g, s).unwrap();
        g.value(v).data()[0]
    };
    let mut group = c.benchmark_group("moformer_embed_batch32");
    group.bench_function("sequential", |b| b.iter(|| black_box(exec::map_sequential(&seqs, embed))));
    group.bench_function("parallel", |b| b.iter(|| black_box(exec::map(&seqs, embed))));
    group.finish();
}

fn cgcnn_batch(c: &mut Criterion) {
    let cfg = CgcnnConfig::default();
    let graphs: Vec<_> = structures().iter().map(|s| build_graph(s, &cfg)).collect();
    let model = Cgcnn::new(cfg, CGCNN_PREFIX).unwrap();
    let mut params = ParamStore::new();
    model.init_params(&mut params, &mut rng::stream(0, "bench")).unwrap();
    let embed = |graph: &_| {
        let mut g = Graph::new(&params);
        let v = model.embed(&mut g, graph).unwrap();
        g.value(v).data()[0]
    };
    let mut group = c.benchmark_group("cgcnn_embed_batch32");
    group.bench_function("sequential", |b| b.iter(|| black_box(exec::map_sequential(&graphs, embed))));
    group.bench_function("parallel", |b| b.iter(|| black_box(exec::map(&graphs, embed))));
    group.finish();
}

fn neighbor_lists(c: &mut Criterion) {
    let cells = structures();
    let nl = |s: &CrystalStructure| neighbor_list(s, 8.0, 12).len();
    let mut group = c.benchmark_group("neighbor_lists32");
    group.bench_function("sequential", |b| b.iter(|| black_box(exec::map_sequential(&cells, nl))));
    group.bench_function("parallel", |b| b.iter(|| black_box(exec::map(&cells, nl))));
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut r = rng::stream(1, "bench.matmul");
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256, 512] {
        let a = common::random_tensor(&[n, n], &mut r);
        let b = common::random_tensor(&[n, n], &mut r);
        let run = |threads| exec::with_threads(threads, || Tensor::matmul(&a, &b).unwrap());
        group.bench_with_input(BenchmarkId::new("1_thread", n), &n, |bch, _| bch.iter(|| black_box(run(Some(1)))));
        group.bench_with_input(BenchmarkId::new("all_threads", n), &n, |bch, _| bch.iter(|| black_box(run(None))));
    }
    group.finish();
}

criterion_group!(benches, moformer_batch, cgcnn_batch, neighbor_lists, matmul);
criterion_main!(benches);
