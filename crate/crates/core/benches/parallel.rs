use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lincir_core::encoder::{DualEncoder, EncoderConfig, LatentEmbedding};
use lincir_core::experiment::world_vocabulary;
use lincir_core::retrieval::GalleryIndex;
use lincir_core::smp::{norm_stats, NoiseKind};
use lincir_core::synth::{render, Scene};
use lincir_core::Tensor;

/// Runs `f` once per pool: a single worker, which is the sequential baseline,
/// and the default pool. Without the `parallel` feature only the sequential
/// fallback exists.
fn pools(c: &mut Criterion, group: &str, f: impl Fn() + Sync) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function("single-thread", |b| b.iter(|| one.install(&f)));
        let n = rayon::current_num_threads();
        g.bench_function(format!("default-pool-{n}"), |b| b.iter(&f));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function("sequential", |b| b.iter(&f));
    g.finish();
}

fn benches(c: &mut Criterion) {
    let vocab = world_vocabulary();
    let encoder = DualEncoder::init(EncoderConfig::desk(vocab.len()), 0).unwrap();
    let images: Vec<Tensor> = Scene::all().iter().map(|s| render(s, 24)).collect();

    pools(c, "gallery_encoding", || {
        black_box(encoder.image.encode_images(&images).unwrap());
    });

    pools(c, "noise_norms", || {
        black_box(norm_stats(NoiseKind::ScaledGaussian, 768, 20_000, 0).unwrap());
    });

    let latents = encoder.image.encode_images(&images).unwrap();
    let ids: Vec<String> = Scene::all().iter().map(Scene::id).collect();
    let index = GalleryIndex::build(ids.clone(), &latents).unwrap();
    let queries: Vec<(String, LatentEmbedding, Option<String>)> = (0..2000)
        .map(|i| {
            (
                format!("q{i}"),
                latents[i % latents.len()].clone(),
                Some(ids[i % ids.len()].clone()),
            )
        })
        .collect();
    pools(c, "ranking", || {
        black_box(index.rank_all(&queries).unwrap());
    });
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
