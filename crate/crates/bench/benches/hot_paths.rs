//! Benchmarks for the pipeline's hot paths: least-cost travel time, feature
//! maps and group embeddings, the independence-test statistic, PC search on
//! an exact oracle, and one disaggregation objective+gradient evaluation.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use causemap::citest::{rit, CiTestConfig, ScaleTag, VariableView};
use causemap::disagg::{DisaggConfig, DisaggData, Objective};
use causemap::grid::{catchment_weights, travel_time, FrictionSurface, Raster};
use causemap::kernels::{aggregate_features_scalar, rff_features, sample_rff};
use causemap::pcalg::{meek_orient, orient_v_structures, pc_skeleton};
use causemap::seed::stream_rng;
use causemap::synth::{random_dag, DsepOracle};

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, "bench", 0);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn bench_travel_time(c: &mut Criterion) {
    let mut rng = stream_rng(1, "bench-grid", 0);
    let values = Array2::from_shape_fn((100, 100), |_| 5.0 + 25.0 * rng.random::<f64>());
    let friction = FrictionSurface::new(Raster::new(
        values,
        Array2::from_elem((100, 100), true),
        1.0,
    ))
    .unwrap();
    c.bench_function("travel_time_100x100", |b| {
        b.iter(|| travel_time(&friction, (50, 50)).unwrap())
    });
}

fn bench_rff(c: &mut Criterion) {
    let map = sample_rff(1.0, 100, 1, 7);
    c.bench_function("rff_features_d100", |b| b.iter(|| rff_features(&[0.37], &map)));

    let values = normals(200, 2);
    let weights = vec![1.0 / 200.0; 200];
    c.bench_function("group_embedding_200x_d100", |b| {
        b.iter(|| aggregate_features_scalar(&values, &weights, &map).unwrap())
    });
}

fn bench_rit(c: &mut Criterion) {
    let x = VariableView::scalar("x", normals(500, 3), ScaleTag::Static);
    let y = VariableView::scalar("y", normals(500, 4), ScaleTag::Static);
    let cfg = CiTestConfig::default();
    c.bench_function("rit_n500_d100", |b| b.iter(|| rit(&x, &y, &cfg).unwrap()));
}

fn bench_pc_oracle(c: &mut Criterion) {
    c.bench_function("pc_dsep_oracle_n8", |b| {
        b.iter_batched(
            || random_dag(8, 0.3, 42),
            |dag| {
                let names = dag.names().to_vec();
                let oracle = DsepOracle::new(dag);
                let (sk, seps) = pc_skeleton(&oracle, names, 0.05, 6).unwrap();
                meek_orient(&orient_v_structures(&sk, &seps))
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_disagg_gradient(c: &mut Criterion) {
    let n_pix = 400;
    let months = 12;
    let n_fac = 50;
    let mut rng = stream_rng(5, "bench-disagg", 0);
    let covariates: Vec<Array2<f64>> = (0..4)
        .map(|_| {
            Array2::from_shape_fn((n_pix, months), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
        })
        .collect();
    let tt = Array2::from_shape_fn((n_pix, n_fac), |(i, j)| {
        20.0 + ((i * 31 + j * 17) % 160) as f64
    });
    let p = catchment_weights(&tt, &vec![1.0; n_fac], 200.0).unwrap().p;
    let counts = Array2::from_shape_fn((n_fac, months), |(j, t)| ((j * 7 + t * 3) % 40) as f64);
    let data = DisaggData {
        counts,
        covariate_names: (0..4).map(|k| format!("x{k}")).collect(),
        covariates,
        pixel_coords: (0..n_pix).map(|i| [(i % 20) as f64, (i / 20) as f64]).collect(),
        pop_tsp: vec![50.0; n_pix],
        p,
        travel_time: None,
    };
    let cfg = DisaggConfig {
        rff_dim: 100,
        ..Default::default()
    };
    let objective = Objective::new(&data, &cfg).unwrap();
    let x = objective.initial_params();
    let mut grad = Array1::zeros(objective.n_params());
    c.bench_function("disagg_objective_gradient", |b| {
        b.iter(|| objective.value_grad(&x, &mut grad))
    });
}

criterion_group!(
    benches,
    bench_travel_time,
    bench_rff,
    bench_rit,
    bench_pc_oracle,
    bench_disagg_gradient
);
criterion_main!(benches);
