use causemap::citest::CiTestConfig;
use causemap::disagg::DisaggConfig;
use causemap::pcalg::{bootstrap_rank, select_features, BootstrapConfig};
use causemap::pipeline::*;
use causemap::prewhiten::PrewhitenConfig;
use causemap::synth::{generate_scenario, ScenarioConfig};
use std::time::Instant;

fn main() {
    let cfg = ScenarioConfig {
        grid_rows: 24, grid_cols: 24, months: 12,
        n_static: 6, n_dynamic: 2, lags: vec![0, 1, 2],
        n_static_parents: 2, n_dynamic_parents: 2,
        n_facilities: 150, population_per_pixel: 500.0,
        coef_magnitude: 0.8, nonlinear_fraction: 0.3,
        response_noise_scale: 0.3, beta0: -4.0,
        ..Default::default()
    };
    let mut hits = 0;
    let total_seeds = 4u64;
    for seed in 0..total_seeds {
        let t0 = Instant::now();
        let scenario = generate_scenario(&cfg, 100 + seed).unwrap();
        let truth: std::collections::BTreeSet<String> =
            scenario.ground_truth().response_parent_features.into_iter().collect();
        println!("seed {seed}: true parents {:?}", truth);

        let pw = PrewhitenConfig::default();
        let inc = DisaggConfig { rff_dim: 64, max_iters: 200, ..Default::default() };
        let prepared = prepare(&scenario, &pw, &inc).unwrap();
        let data = causal_dataset(&scenario, &prepared, 0..12, 800, seed).unwrap();
        let bcfg = BootstrapConfig {
            runs: 20,
            seed: 900 + seed,
            citest: CiTestConfig { d_marginal: 50, d_z: 25, ..Default::default() },
            ..Default::default()
        };
        let ranking = bootstrap_rank(&data, &bcfg).unwrap();
        for s in &ranking.scores {
            println!("    {} {:.2}{}", s.name, s.score,
                if truth.contains(&s.name) { "  <-- TRUE" } else { "" });
        }
        let selected = select_features(&ranking.scores, 4, 4);
        let n_true = selected.iter().filter(|n| truth.contains(*n)).count();
        println!("  -> {n_true}/4 true, {:.0?} total", t0.elapsed());
        if n_true >= 3 { hits += 1; }
    }
    println!("hits {hits}/{total_seeds}");
}
