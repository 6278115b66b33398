use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use glot_core::dataio::{generate_samples, SignSample, SynthConfig, Vocabs};
use glot_core::model::{GlotConfig, GlotModel, HyperSet};
use glot_core::numcore::kernels::{matmul, Exec};
use glot_core::numcore::{Tape, Tensor};
use glot_core::pipeline::fit_config;
use glot_core::sparse_attention::{count_attention_pairs, AttentionMode};
use glot_core::training::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIM: usize = 32;

fn attention_pass(q: &Tensor, mode: AttentionMode) -> f64 {
    let len = q.rows();
    let mask = Arc::new(mode.mask(len).unwrap());
    let mut tape = Tape::new();
    let x = tape.constant(q.clone()).unwrap();
    let s = tape.masked_scores(x, x, &mask, 1.0 / (DIM as f64).sqrt()).unwrap();
    let a = tape.masked_softmax_rows(s, &mask).unwrap();
    let y = tape.masked_weighted_sum(a, x, &mask).unwrap();
    tape.value(y).data()[0]
}

fn sparse_vs_dense(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for len in [64usize, 256, 1024] {
        let q = Tensor::uniform(&[len, DIM], 1.0, &mut rng);
        for mode in [AttentionMode::Dense, AttentionMode::LogSparse] {
            g.throughput(Throughput::Elements(count_attention_pairs(len, mode)));
            g.bench_with_input(BenchmarkId::new(format!("{mode:?}"), len), &q, |b, q| {
                b.iter(|| attention_pass(black_box(q), mode))
            });
        }
    }
    g.finish();
}

fn matmul_exec(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [64usize, 256] {
        let a = Tensor::uniform(&[n, n], 1.0, &mut rng);
        let b = Tensor::uniform(&[n, n], 1.0, &mut rng);
        let mut out = vec![0.0; n * n];
        for exec in [Exec::Sequential, Exec::Parallel] {
            g.bench_function(BenchmarkId::new(format!("{exec:?}"), n), |bch| {
                bch.iter(|| matmul(black_box(a.data()), black_box(b.data()), &mut out, n, n, n, exec))
            });
        }
    }
    g.finish();
}

fn training_exec(c: &mut Criterion) {
    let synth = SynthConfig { seed: 2, n_samples: 16, n_signs: 6, feat_dim: 8, noise_sigma: 0.1 };
    let samples: Vec<SignSample> = generate_samples(&synth).unwrap().into_iter().map(|(s, _)| s).collect();
    let vocabs = Vocabs::build(&samples);
    let dataset =
        glot_core::dataio::Dataset::new(samples.iter().cloned().map(|s| (s, glot_core::dataio::Split::Cv)).collect())
            .unwrap();
    let base = GlotConfig { d_model: 32, ff_size: 64, n_heads: 4, ..GlotConfig::preset(HyperSet::Set2) };
    let model_cfg = fit_config(&base, &dataset, &vocabs);
    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let cfg = TrainConfig { epochs: 1, batch_size: 16, exec, ..TrainConfig::preset(HyperSet::Set2) };
        g.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| {
                let mut m = GlotModel::new(model_cfg.clone(), 0).unwrap();
                train(&mut m, &samples, &samples[..2], &vocabs, &cfg, 0).unwrap().epochs[0].train_loss
            })
        });
    }
    g.finish();
}

criterion_group!(benches, sparse_vs_dense, matmul_exec, training_exec);
criterion_main!(benches);
