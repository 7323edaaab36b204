//! Subcommand implementations. Every command writes its artifacts under an
//! output directory and returns a small JSON summary for stdout.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::prelude::*;
use serde::Serialize;
use serde_json::json;

use causemap::disagg::{self, DisaggModel, EvalMetrics};
use causemap::grid::{catchment_weights, CATCHMENT_CUTOFF_MINUTES};
use causemap::linalg::pearson;
use causemap::pcalg::{
    bootstrap_rank, pc_two_stage, select_features, write_ranking_csv, BootstrapConfig,
    DatasetOracle, FeatureRanking,
};
use causemap::pipeline::{
    self, candidate_features, causal_dataset, disagg_data, observed_rates, prepare_window,
    treatment_population, Prepared,
};
use causemap::seed::derive_seed;
use causemap::spikeslab::{
    inclusion_probabilities, mcmc_sample, threshold_select, write_probability_csv, Likelihood,
    SpikeSlabConfig,
};
use causemap::synth::{generate_scenario, Scenario};

use crate::config::PipelineConfig;

pub type CmdResult = Result<serde_json::Value, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn ensure_dir(dir: &Path) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("creating {}: {e}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let f = std::fs::File::create(path).map_err(|e| format!("creating {}: {e}", path.display()))?;
    let mut w = std::io::BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(err)?;
    w.write_all(b"\n").map_err(err)?;
    Ok(())
}

pub fn cmd_synth(cfg: &PipelineConfig, seed: u64, out_dir: &Path) -> CmdResult {
    ensure_dir(out_dir)?;
    let scenario = generate_scenario(&cfg.scenario, seed).map_err(err)?;
    scenario.save(out_dir).map_err(err)?;
    Ok(json!({
        "scenario_dir": out_dir,
        "seed": seed,
        "variables": scenario.variables.len(),
        "features": candidate_features(&scenario).len(),
        "facilities": scenario.facilities.len(),
        "months": scenario.config.months,
        "total_cases": scenario.counts.sum(),
        "clipped_log_rates": scenario.clipped,
    }))
}

fn load_scenario(dir: &Path) -> Result<Scenario, String> {
    Scenario::load(dir).map_err(|e| format!("loading scenario from {}: {e}", dir.display()))
}

fn prepare_for(
    scenario: &Scenario,
    cfg: &PipelineConfig,
    seed: u64,
    window: Range<usize>,
) -> Result<Prepared, String> {
    prepare_window(
        scenario,
        &cfg.prewhiten(),
        &cfg.incidence_disagg(derive_seed(seed, "incidence-basis", 0)),
        window,
    )
    .map_err(err)
}

pub fn cmd_prewhiten(cfg: &PipelineConfig, scenario_dir: &Path, seed: u64, out_dir: &Path) -> CmdResult {
    ensure_dir(out_dir)?;
    let scenario = load_scenario(scenario_dir)?;
    let prepared = prepare_for(&scenario, cfg, seed, 0..scenario.config.months)?;

    // covariate residuals: variable,location_id,time,residual
    let path = out_dir.join("residuals_covariates.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(err)?);
    writeln!(w, "variable,location_id,time,residual").map_err(err)?;
    let nc = scenario.config.grid_cols;
    for (v, var) in scenario.variables.iter().enumerate() {
        let field = &prepared.residual_fields[v];
        for t in 0..field.dim().0 {
            for pix in 0..scenario.n_pixels() {
                let val = field[(t, pix / nc, pix % nc)];
                if val.is_finite() {
                    writeln!(w, "{},{},{},{}", var.name, pix, t, val).map_err(err)?;
                }
            }
        }
    }
    drop(w);

    let path_inc = out_dir.join("residuals_incidence.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path_inc).map_err(err)?);
    writeln!(w, "variable,location_id,time,residual").map_err(err)?;
    for j in 0..scenario.facilities.len() {
        for t in 0..scenario.config.months {
            let val = prepared.incidence.residuals[(j, t)];
            if val.is_finite() {
                writeln!(w, "incidence,{j},{t},{val}").map_err(err)?;
            }
        }
    }
    drop(w);

    let path_attr = out_dir.join("attractiveness.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path_attr).map_err(err)?);
    writeln!(w, "facility,attractiveness").map_err(err)?;
    for (j, a) in prepared.incidence.attractiveness.iter().enumerate() {
        writeln!(w, "{j},{a}").map_err(err)?;
    }
    drop(w);

    #[derive(Serialize)]
    struct ParamsOut<'a> {
        variable: &'a str,
        params: &'a causemap::prewhiten::StKernelParams,
    }
    let params: Vec<ParamsOut> = scenario
        .variables
        .iter()
        .zip(&prepared.covariate_params)
        .map(|(v, p)| ParamsOut {
            variable: &v.name,
            params: p,
        })
        .collect();
    write_json(&out_dir.join("prewhiten_params.json"), &params)?;

    Ok(json!({
        "residuals_covariates": path,
        "residuals_incidence": path_inc,
        "attractiveness": path_attr,
        "excluded_facilities": prepared.incidence.excluded_facilities,
        "incidence_fit_converged": prepared.incidence.converged,
    }))
}

pub struct SelectOutcome {
    pub ranking_scores: Vec<f64>,
    pub selected: Vec<String>,
}

fn causal_select(
    scenario: &Scenario,
    prepared: &Prepared,
    cfg: &PipelineConfig,
    seed: u64,
    window: Range<usize>,
) -> Result<(FeatureRanking, SelectOutcome), String> {
    let data = causal_dataset(
        scenario,
        prepared,
        window,
        cfg.n_fine_rows,
        derive_seed(seed, "fine-rows", 0),
    )
    .map_err(err)?;
    let bcfg = BootstrapConfig {
        runs: cfg.bootstrap_runs,
        fraction: cfg.subsample_fraction,
        alpha: cfg.alpha,
        max_depth: cfg.max_depth,
        citest: cfg.citest(0)?,
        seed: derive_seed(seed, "bootstrap", 0),
    };
    let ranking = bootstrap_rank(&data, &bcfg).map_err(err)?;
    let selected = select_features(&ranking.scores, cfg.k_static, cfg.k_dynamic);
    let scores = ranking.scores.iter().map(|s| s.score).collect();
    Ok((
        ranking,
        SelectOutcome {
            ranking_scores: scores,
            selected,
        },
    ))
}

fn spikeslab_select(
    scenario: &Scenario,
    prepared: &Prepared,
    cfg: &PipelineConfig,
    seed: u64,
    window: Range<usize>,
) -> Result<(Vec<f64>, SelectOutcome, f64), String> {
    let features = candidate_features(scenario);
    let names: Vec<String> = features.iter().map(|(n, _)| n.clone()).collect();
    let tags: Vec<causemap::citest::ScaleTag> =
        features.iter().map(|(_, id)| id.scale_tag()).collect();
    let data = disagg_data(scenario, prepared, &names, window).map_err(err)?;
    let ss_cfg = SpikeSlabConfig {
        seed: derive_seed(seed, "spikeslab", 0),
        ..cfg.spikeslab.clone()
    };
    let samples = mcmc_sample(&Likelihood::Poisson { data: &data }, &ss_cfg).map_err(err)?;
    let probabilities = inclusion_probabilities(&samples);
    let selected = threshold_select(&probabilities, &names, &tags, cfg.k_static, cfg.k_dynamic);
    let max_rhat = samples
        .split_rhat
        .iter()
        .copied()
        .fold(0.0f64, f64::max);
    Ok((
        probabilities.clone(),
        SelectOutcome {
            ranking_scores: probabilities,
            selected,
        },
        max_rhat,
    ))
}

pub fn cmd_select(
    cfg: &PipelineConfig,
    method: &str,
    scenario_dir: &Path,
    seed: u64,
    out_dir: &Path,
) -> CmdResult {
    ensure_dir(out_dir)?;
    let scenario = load_scenario(scenario_dir)?;
    let window = 0..scenario.config.months;
    let prepared = prepare_for(&scenario, cfg, seed, window.clone())?;
    let features = candidate_features(&scenario);
    let names: Vec<String> = features.iter().map(|(n, _)| n.clone()).collect();
    let tags: Vec<causemap::citest::ScaleTag> =
        features.iter().map(|(_, id)| id.scale_tag()).collect();

    match method {
        "causal" => {
            let (ranking, outcome) = causal_select(&scenario, &prepared, cfg, seed, window.clone())?;
            let path = out_dir.join("ranking.csv");
            let f = std::fs::File::create(&path).map_err(err)?;
            write_ranking_csv(&ranking, std::io::BufWriter::new(f)).map_err(err)?;

            // a full-data two-stage graph for inspection
            let data = causal_dataset(
                &scenario,
                &prepared,
                window,
                cfg.n_fine_rows,
                derive_seed(seed, "fine-rows", 0),
            )
            .map_err(err)?;
            let oracle = DatasetOracle::new(&data, cfg.citest(derive_seed(seed, "full-graph", 0))?);
            let result =
                pc_two_stage(&oracle, data.node_names(), cfg.alpha, cfg.max_depth).map_err(err)?;
            let graph_path = out_dir.join("graph.txt");
            let f = std::fs::File::create(&graph_path).map_err(err)?;
            result
                .graph
                .write_edge_list(std::io::BufWriter::new(f))
                .map_err(err)?;

            write_json(
                &out_dir.join("selected.json"),
                &json!({ "method": "causal", "features": outcome.selected }),
            )?;
            Ok(json!({
                "method": "causal",
                "ranking": path,
                "graph": graph_path,
                "selected": outcome.selected,
                "bootstrap_runs": ranking.runs,
                "failed_runs": ranking.failed_runs,
            }))
        }
        "spikeslab" => {
            let (probabilities, outcome, max_rhat) =
                spikeslab_select(&scenario, &prepared, cfg, seed, window)?;
            let path = out_dir.join("inclusion.csv");
            let f = std::fs::File::create(&path).map_err(err)?;
            write_probability_csv(&names, &tags, &probabilities, std::io::BufWriter::new(f))
                .map_err(err)?;
            write_json(
                &out_dir.join("selected.json"),
                &json!({ "method": "spikeslab", "features": outcome.selected }),
            )?;
            Ok(json!({
                "method": "spikeslab",
                "inclusion": path,
                "selected": outcome.selected,
                "max_split_rhat": max_rhat,
                "rhat_flagged": max_rhat > 1.1,
            }))
        }
        other => Err(format!("unknown selection method `{other}` (causal|spikeslab)")),
    }
}

fn fit_model(
    scenario: &Scenario,
    prepared: &Prepared,
    cfg: &PipelineConfig,
    seed: u64,
    selected: &[String],
    train: Range<usize>,
) -> Result<DisaggModel, String> {
    let data = disagg_data(scenario, prepared, selected, train).map_err(err)?;
    disagg::fit_map(&data, &cfg.regression_disagg(derive_seed(seed, "disagg-basis", 0)))
        .map_err(err)
}

pub fn cmd_fit(
    cfg: &PipelineConfig,
    scenario_dir: &Path,
    seed: u64,
    features: &[String],
    train: Range<usize>,
    out_dir: &Path,
) -> CmdResult {
    ensure_dir(out_dir)?;
    let scenario = load_scenario(scenario_dir)?;
    let prepared = prepare_for(&scenario, cfg, seed, train.clone())?;
    let model = fit_model(&scenario, &prepared, cfg, seed, features, train.clone())?;
    let path = out_dir.join("model.json");
    write_json(&path, &model)?;
    Ok(json!({
        "model": path,
        "train_months": [train.start, train.end],
        "features": features,
        "converged": model.converged,
        "objective": model.objective,
        "grad_norm": model.grad_norm,
    }))
}

/// Evaluate a fitted model over a month range. Reconstructs the catchment
/// from the model's attractiveness; no prewhitening involved.
fn evaluate_model(
    scenario: &Scenario,
    model: &DisaggModel,
    months: Range<usize>,
) -> Result<(EvalMetrics, Array2<f64>, Array2<f64>), String> {
    let travel = scenario.travel_times().map_err(err)?;
    let tsp = scenario.tsp(&travel);
    let nc = scenario.config.grid_cols;
    let n_pix = scenario.n_pixels();
    let pop_tsp: Vec<f64> = (0..n_pix)
        .map(|i| scenario.population.get((i / nc, i % nc)) * tsp[i])
        .collect();
    let catchment =
        catchment_weights(&travel, &model.attractiveness, CATCHMENT_CUTOFF_MINUTES).map_err(err)?;
    let pixels: Vec<usize> = (0..n_pix)
        .filter(|&i| !catchment.uncovered[i] && pop_tsp[i] > 0.0)
        .collect();

    let max_lag = scenario.max_lag();
    let mut covariates = Vec::with_capacity(model.covariate_names.len());
    for name in &model.covariate_names {
        let id = pipeline::find_feature(scenario, name).map_err(err)?;
        covariates.push(
            pipeline::lagged_matrix(
                &scenario.fields,
                name,
                &id,
                months.clone(),
                max_lag,
                &pixels,
                nc,
            )
            .map_err(err)?,
        );
    }

    let mut p = Array2::zeros((pixels.len(), scenario.facilities.len()));
    for (row, &pix) in pixels.iter().enumerate() {
        p.row_mut(row).assign(&catchment.p.row(pix));
    }
    let coords: Vec<[f64; 2]> = pixels
        .iter()
        .map(|&i| [(i % nc) as f64, (i / nc) as f64])
        .collect();
    let popts: Vec<f64> = pixels.iter().map(|&i| pop_tsp[i]).collect();
    let prediction = disagg::predict(model, &covariates, &coords, &p, &popts).map_err(err)?;

    let treat_pop = treatment_population(&catchment.p, &pop_tsp);
    let observed = observed_rates(&scenario.counts, &treat_pop, months.clone());
    let mut predicted = Array2::zeros(observed.dim());
    for j in 0..scenario.facilities.len() {
        for col in 0..months.len() {
            predicted[(j, col)] = if treat_pop[j] > 0.0 {
                prediction.mu[(j, col)] / treat_pop[j]
            } else {
                f64::NAN
            };
        }
    }
    // drop facilities with no catchment from the comparison
    let keep: Vec<usize> = (0..scenario.facilities.len())
        .filter(|&j| treat_pop[j] > 0.0)
        .collect();
    let obs_kept = Array2::from_shape_fn((keep.len(), months.len()), |(r, c)| {
        observed[(keep[r], c)]
    });
    let pred_kept = Array2::from_shape_fn((keep.len(), months.len()), |(r, c)| {
        predicted[(keep[r], c)]
    });
    let metrics = disagg::evaluate(&pred_kept, &obs_kept);
    Ok((metrics, pred_kept, obs_kept))
}

pub fn cmd_evaluate(
    scenario_dir: &Path,
    model_path: &Path,
    months: Range<usize>,
    out_dir: &Path,
) -> CmdResult {
    ensure_dir(out_dir)?;
    let scenario = load_scenario(scenario_dir)?;
    let f = std::fs::File::open(model_path).map_err(err)?;
    let model: DisaggModel = serde_json::from_reader(std::io::BufReader::new(f)).map_err(err)?;
    let (metrics, predicted, observed) = evaluate_model(&scenario, &model, months.clone())?;

    let pred_path = out_dir.join("predictions.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&pred_path).map_err(err)?);
    writeln!(w, "facility,month,observed,predicted").map_err(err)?;
    for j in 0..observed.nrows() {
        for (col, t) in months.clone().enumerate() {
            writeln!(w, "{j},{t},{},{}", observed[(j, col)], predicted[(j, col)]).map_err(err)?;
        }
    }
    drop(w);

    let metrics_path = out_dir.join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    Ok(json!({
        "metrics": metrics_path,
        "predictions": pred_path,
        "overall_correlation": metrics.overall_correlation,
        "temporal_correlation": metrics.temporal_correlation,
        "temporal_correlation_y2": metrics.temporal_correlation_y2,
        "rmse": metrics.rmse,
    }))
}

#[derive(Serialize)]
struct IterationReport {
    iteration: usize,
    train: [usize; 2],
    forecast: [usize; 2],
    causal_ranking: Vec<f64>,
    causal_selected: Vec<String>,
    causal_metrics: EvalMetrics,
    spikeslab_inclusion: Vec<f64>,
    spikeslab_selected: Vec<String>,
    spikeslab_metrics: EvalMetrics,
    no_selection_metrics: EvalMetrics,
}

#[derive(Serialize)]
struct StabilityReport {
    mean_between_iteration_correlation_causal: Option<f64>,
    mean_between_iteration_correlation_spikeslab: Option<f64>,
    pairs: usize,
}

#[derive(Serialize)]
struct SummaryEntry {
    mean_overall_correlation: Option<f64>,
    mean_temporal_correlation: Option<f64>,
    mean_rmse: f64,
}

#[derive(Serialize)]
struct Report {
    feature_names: Vec<String>,
    iterations: Vec<IterationReport>,
    summary_causal: SummaryEntry,
    summary_spikeslab: SummaryEntry,
    summary_no_selection: SummaryEntry,
    stability: StabilityReport,
}

fn mean_of<F: Fn(&EvalMetrics) -> Option<f64>>(
    iterations: &[IterationReport],
    pick: impl Fn(&IterationReport) -> &EvalMetrics,
    field: F,
) -> Option<f64> {
    let vals: Vec<f64> = iterations
        .iter()
        .filter_map(|it| field(pick(it)))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn summarize(
    iterations: &[IterationReport],
    pick: impl Fn(&IterationReport) -> &EvalMetrics + Copy,
) -> SummaryEntry {
    SummaryEntry {
        mean_overall_correlation: mean_of(iterations, pick, |m| m.overall_correlation),
        mean_temporal_correlation: mean_of(iterations, pick, |m| m.temporal_correlation),
        mean_rmse: iterations
            .iter()
            .map(|it| pick(it).rmse)
            .sum::<f64>()
            / iterations.len().max(1) as f64,
    }
}

/// Mean Pearson correlation between ranking vectors over all iteration
/// pairs; degenerate pairs are skipped.
pub fn ranking_stability(rankings: &[Vec<f64>]) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..rankings.len() {
        for j in (i + 1)..rankings.len() {
            if let Some(r) = pearson(&rankings[i], &rankings[j]) {
                sum += r;
                pairs += 1;
            }
        }
    }
    ((pairs > 0).then(|| sum / pairs as f64), pairs)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_report(
    cfg: &PipelineConfig,
    scenario_dir: &Path,
    seed: u64,
    out_dir: &Path,
) -> CmdResult {
    ensure_dir(out_dir)?;
    let scenario = load_scenario(scenario_dir)?;
    let rolling = &cfg.rolling;
    let needed = rolling.train_len + rolling.horizon + rolling.iterations - 1;
    if needed > scenario.config.months {
        return Err(format!(
            "rolling spec needs {needed} months, scenario has {}",
            scenario.config.months
        ));
    }
    let features = candidate_features(&scenario);
    let feature_names: Vec<String> = features.iter().map(|(n, _)| n.clone()).collect();
    let all_features = feature_names.clone();

    let mut iterations = Vec::new();
    for it in 0..rolling.iterations {
        let train = it..(it + rolling.train_len);
        let forecast = train.end..(train.end + rolling.horizon);
        let iter_seed = derive_seed(seed, "iteration", it as u64);
        let prepared = prepare_for(&scenario, cfg, iter_seed, train.clone())?;

        let (_, causal) = causal_select(&scenario, &prepared, cfg, iter_seed, train.clone())?;
        let (ss_probs, ss, _) = spikeslab_select(&scenario, &prepared, cfg, iter_seed, train.clone())?;

        let eval_with = |selected: &[String], tag: u64| -> Result<EvalMetrics, String> {
            let model = fit_model(
                &scenario,
                &prepared,
                cfg,
                derive_seed(iter_seed, "fit", tag),
                selected,
                train.clone(),
            )?;
            let (metrics, _, _) = evaluate_model(&scenario, &model, forecast.clone())?;
            Ok(metrics)
        };
        let causal_metrics = eval_with(&causal.selected, 0)?;
        let spikeslab_metrics = eval_with(&ss.selected, 1)?;
        let no_selection_metrics = eval_with(&all_features, 2)?;

        iterations.push(IterationReport {
            iteration: it,
            train: [train.start, train.end],
            forecast: [forecast.start, forecast.end],
            causal_ranking: causal.ranking_scores,
            causal_selected: causal.selected,
            causal_metrics,
            spikeslab_inclusion: ss_probs,
            spikeslab_selected: ss.selected,
            spikeslab_metrics,
            no_selection_metrics,
        });
    }

    let causal_rankings: Vec<Vec<f64>> =
        iterations.iter().map(|it| it.causal_ranking.clone()).collect();
    let ss_rankings: Vec<Vec<f64>> = iterations
        .iter()
        .map(|it| it.spikeslab_inclusion.clone())
        .collect();
    let (stab_causal, pairs) = ranking_stability(&causal_rankings);
    let (stab_ss, _) = ranking_stability(&ss_rankings);

    let report = Report {
        feature_names,
        summary_causal: summarize(&iterations, |it| &it.causal_metrics),
        summary_spikeslab: summarize(&iterations, |it| &it.spikeslab_metrics),
        summary_no_selection: summarize(&iterations, |it| &it.no_selection_metrics),
        stability: StabilityReport {
            mean_between_iteration_correlation_causal: stab_causal,
            mean_between_iteration_correlation_spikeslab: stab_ss,
            pairs,
        },
        iterations,
    };
    let path = out_dir.join("report.json");
    write_json(&path, &report)?;
    Ok(json!({
        "report": path,
        "iterations": rolling.iterations,
        "stability_causal": report.stability.mean_between_iteration_correlation_causal,
        "stability_spikeslab": report.stability.mean_between_iteration_correlation_spikeslab,
    }))
}
