use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use elecmap::geogrid::{make_grid, GeoPoint, GeoRect, GridSpec};
use elecmap::labels::{aggregate_tile_labels, StructureKind, StructurePoint};
use elecmap::models::{build_model, ModelConfig, TaskId};
use elecmap::projection::Projection;
use elecmap::synthdata::{plan_region, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid() -> (GridSpec, GeoRect) {
    let region = GeoRect {
        min_lon: 36.7,
        min_lat: -1.4,
        max_lon: 36.9,
        max_lat: -1.2,
    };
    let c = region.center();
    let g = make_grid(&region, 250.0, 0.5, Projection::transverse_mercator(c.lon, c.lat)).unwrap();
    (g, region)
}

fn points(region: &GeoRect, n: usize, seed: u64) -> Vec<GeoPoint> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| GeoPoint {
            lon: r.random_range(region.min_lon..region.max_lon),
            lat: r.random_range(region.min_lat..region.max_lat),
        })
        .collect()
}

fn tiling(c: &mut Criterion) {
    let (g, region) = grid();
    let pts = points(&region, 10_000, 1);
    c.bench_function("tile_index_of/10k", |b| {
        b.iter(|| pts.iter().filter(|p| g.tile_index_of(**p).is_ok()).count())
    });
}

fn labels(c: &mut Criterion) {
    let (g, region) = grid();
    let kinds = [
        StructureKind::ElectrifiedResidential,
        StructureKind::ElectrifiedNonresidential,
    ];
    let elec: Vec<StructurePoint> = points(&region, 20_000, 2)
        .iter()
        .enumerate()
        .map(|(i, p)| StructurePoint { lon: p.lon, lat: p.lat, kind: kinds[i % 2] })
        .collect();
    let bld: Vec<StructurePoint> = points(&region, 50_000, 3)
        .iter()
        .map(|p| StructurePoint { lon: p.lon, lat: p.lat, kind: StructureKind::BuildingUnclassified })
        .collect();
    c.bench_function("aggregate_tile_labels/70k", |b| {
        b.iter(|| aggregate_tile_labels(&elec, &bld, &g).unwrap().tiles.len())
    });
}

fn synth(c: &mut Criterion) {
    let spec = SceneSpec {
        tiles_x: 32,
        tiles_y: 32,
        n_counties: 9,
        ..SceneSpec::default()
    };
    c.bench_function("plan_region/32x32", |b| b.iter(|| plan_region(&spec).unwrap().structures.len()));
}

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig {
        input_px: 100,
        ..ModelConfig::default()
    };
    let net = build_model(TaskId::Access3class, &cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut group = c.benchmark_group("network");
    group.sample_size(20);
    group.bench_function("forward/100px", |b| {
        b.iter_batched(
            || (0..3 * 100 * 100).map(|_| r.random::<f32>()).collect::<Vec<_>>(),
            |x| net.forward(&x).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, tiling, labels, synth, forward);
criterion_main!(benches);
