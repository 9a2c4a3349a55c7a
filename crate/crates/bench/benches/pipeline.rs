use std::hint::black_box;

use aeroseg_bench::{bench_dataset, bench_model};
use aeroseg_core::data::{build_patch_sample, to_batch, NormParams, SampleMode};
use aeroseg_core::evaluation::{boundary_iou, mask_iou};
use aeroseg_core::geometry::{oriented_prompts, region_size, OrientedBox, RamParams};
use aeroseg_core::mask::BinMask;
use aeroseg_core::training::edge_target;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn bench_geometry(c: &mut Criterion) {
    let params = RamParams::default();
    c.bench_function("region_size", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for i in 1..=256 {
                acc += region_size(black_box(i as f64), &params).unwrap();
            }
            acc
        })
    });
    let obox = OrientedBox::from_sides(120.0, 88.0, 42.0, 17.0, 0.83).unwrap();
    c.bench_function("oriented_prompts", |b| {
        b.iter(|| oriented_prompts(black_box(&obox)))
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    use rand::Rng;
    let a = BinMask::from_fn(256, 256, |_, _| rng.random_range(0..4) == 0);
    let b = BinMask::from_fn(256, 256, |_, _| rng.random_range(0..4) == 0);
    c.bench_function("mask_iou_256", |bch| {
        bch.iter(|| mask_iou(black_box(&a), black_box(&b)).unwrap())
    });
    c.bench_function("boundary_iou_256", |bch| {
        bch.iter(|| boundary_iou(black_box(&a), black_box(&b), 0.005).unwrap())
    });
    let m = BinMask::from_fn(256, 256, |x, y| {
        (x as i64 - 128).pow(2) + (y as i64 - 120).pow(2) < 60 * 60
    });
    c.bench_function("edge_target_256", |bch| {
        bch.iter(|| edge_target::<f32>(black_box(&m)))
    });
}

fn bench_patch_and_forward(c: &mut Criterion) {
    let ds = bench_dataset();
    let ram = RamParams {
        s_in: 64,
        ..RamParams::default()
    };
    let norm = NormParams::default();
    let rec = &ds.records[0];
    let img = ds.image(rec.image_id).unwrap();
    c.bench_function("build_patch_sample_64", |b| {
        b.iter(|| {
            let mut rng = ChaCha12Rng::seed_from_u64(0);
            build_patch_sample::<f32>(
                black_box(img),
                black_box(rec),
                &ram,
                &norm,
                SampleMode::Eval,
                &mut rng,
            )
            .unwrap()
        })
    });

    let model = bench_model();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let samples: Vec<_> = ds
        .records
        .iter()
        .take(4)
        .map(|r| {
            build_patch_sample::<f32>(
                ds.image(r.image_id).unwrap(),
                r,
                &ram,
                &norm,
                SampleMode::Eval,
                &mut rng,
            )
            .unwrap()
        })
        .collect();
    let batch = to_batch(&samples);
    c.bench_function("model_forward_batch4_s64", |b| {
        b.iter(|| model.predict(black_box(&batch)).unwrap())
    });
}

criterion_group!(benches, bench_geometry, bench_metrics, bench_patch_and_forward);
criterion_main!(benches);
