//! Glue between the synthetic scenarios and the analysis stages: residual
//! fields from prewhitening, test datasets for the causal search, and
//! covariate/count bundles for the disaggregation regression.

use ndarray::prelude::*;
use rayon::prelude::*;
use thiserror::Error;

use crate::citest::{Group, ScaleTag};
use crate::disagg::{DisaggConfig, DisaggData, DisaggError};
use crate::grid::GridError;
use crate::pcalg::{CausalDataset, CausalFeature};
use crate::prewhiten::{
    prewhiten_covariate, prewhiten_incidence, prewhiten_static, IncidencePrewhiten,
    PrewhitenConfig, PrewhitenError, StKernelParams,
};
use crate::seed::stream_rng;
use crate::synth::{feature_name, Scenario};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("prewhitening variable `{variable}`: {source}")]
    Prewhiten {
        variable: String,
        source: PrewhitenError,
    },
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("disaggregation: {0}")]
    Disagg(#[from] DisaggError),
    #[error(
        "feature `{feature}` needs covariate month {field_month} (response month {month} at lag {lag}), outside the available 0..{available}"
    )]
    MissingMonth {
        feature: String,
        month: usize,
        lag: u32,
        field_month: isize,
        available: usize,
    },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("{0}")]
    Invalid(String),
}

/// A feature is a variable at an optional lag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureId {
    pub var: usize,
    pub lag: Option<u32>,
}

impl FeatureId {
    pub fn scale_tag(&self) -> ScaleTag {
        match self.lag {
            None => ScaleTag::Static,
            Some(k) => ScaleTag::Dynamic(k),
        }
    }
}

/// Enumerate candidate features in canonical order (statics, then each
/// dynamic variable at each configured lag), with their names.
pub fn candidate_features(scenario: &Scenario) -> Vec<(String, FeatureId)> {
    let mut out = Vec::new();
    for (v, var) in scenario.variables.iter().enumerate() {
        if var.is_static {
            out.push((feature_name(&var.name, None), FeatureId { var: v, lag: None }));
        }
    }
    for (v, var) in scenario.variables.iter().enumerate() {
        if !var.is_static {
            for &lag in &scenario.config.lags {
                out.push((
                    feature_name(&var.name, Some(lag)),
                    FeatureId {
                        var: v,
                        lag: Some(lag),
                    },
                ));
            }
        }
    }
    out
}

pub fn find_feature(scenario: &Scenario, name: &str) -> Result<FeatureId, PipelineError> {
    candidate_features(scenario)
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, id)| id)
        .ok_or_else(|| PipelineError::UnknownFeature(name.to_string()))
}

/// Prewhitened scenario: residual fields per variable, incidence residuals,
/// and the fitted catchment. Only the prepared window of months carries
/// residuals; everything outside it is NaN.
pub struct Prepared {
    pub travel: Array2<f64>,
    pub tsp: Vec<f64>,
    /// `pop * tsp` per pixel.
    pub pop_tsp: Vec<f64>,
    /// Residual field per variable, same month layout as the raw fields.
    pub residual_fields: Vec<Array3<f64>>,
    pub covariate_params: Vec<StKernelParams>,
    pub incidence: IncidencePrewhiten,
    /// The response months this preparation covers.
    pub window: std::ops::Range<usize>,
}

/// Prewhiten every covariate field (in parallel) and the incidence counts
/// over the whole scenario span.
pub fn prepare(
    scenario: &Scenario,
    pw_cfg: &PrewhitenConfig,
    incidence_cfg: &DisaggConfig,
) -> Result<Prepared, PipelineError> {
    prepare_window(scenario, pw_cfg, incidence_cfg, 0..scenario.config.months)
}

/// Prewhiten restricted to a training window of response months, as the
/// rolling evaluation does per iteration: covariate fits see only the field
/// months the window can reach, and the incidence model sees only the
/// window's counts.
pub fn prepare_window(
    scenario: &Scenario,
    pw_cfg: &PrewhitenConfig,
    incidence_cfg: &DisaggConfig,
    window: std::ops::Range<usize>,
) -> Result<Prepared, PipelineError> {
    if window.is_empty() || window.end > scenario.config.months {
        return Err(PipelineError::Invalid(format!(
            "window {window:?} outside the scenario's 0..{}",
            scenario.config.months
        )));
    }
    let travel = scenario.travel_times()?;
    let tsp = scenario.tsp(&travel);
    let (nr, nc) = (scenario.config.grid_rows, scenario.config.grid_cols);
    let n_pix = nr * nc;
    let pop_tsp: Vec<f64> = (0..n_pix)
        .map(|i| scenario.population.get((i / nc, i % nc)) * tsp[i])
        .collect();
    let coords: Vec<[f64; 2]> = (0..n_pix)
        .map(|i| [(i % nc) as f64, (i / nc) as f64])
        .collect();
    let t_f = scenario.field_months();
    let max_lag = scenario.max_lag() as usize;
    // field months the window's lagged features can touch
    let fm_range = window.start..(window.end + max_lag).min(t_f);
    let fm_len = fm_range.len();

    let results: Vec<Result<(Array3<f64>, StKernelParams), PipelineError>> = scenario
        .variables
        .par_iter()
        .enumerate()
        .map(|(v, var)| {
            let field = &scenario.fields[v];
            let mut out = Array3::from_elem((t_f, nr, nc), f64::NAN);
            if var.is_static {
                let slice = Array1::from_iter(field.slice(s![0, .., ..]).iter().copied());
                let fit = prewhiten_static(&slice, &coords, pw_cfg).map_err(|source| {
                    PipelineError::Prewhiten {
                        variable: var.name.clone(),
                        source,
                    }
                })?;
                for t in 0..t_f {
                    for i in 0..n_pix {
                        out[(t, i / nc, i % nc)] = fit.residuals[(i, 0)];
                    }
                }
                Ok((out, fit.params))
            } else {
                // n_locations x n_times layout over the window's field months
                let mut values = Array2::zeros((n_pix, fm_len));
                for (col, t) in fm_range.clone().enumerate() {
                    for i in 0..n_pix {
                        values[(i, col)] = field[(t, i / nc, i % nc)];
                    }
                }
                let fit = prewhiten_covariate(&values, &coords, pw_cfg).map_err(|source| {
                    PipelineError::Prewhiten {
                        variable: var.name.clone(),
                        source,
                    }
                })?;
                for (col, t) in fm_range.clone().enumerate() {
                    for i in 0..n_pix {
                        out[(t, i / nc, i % nc)] = fit.residuals[(i, col)];
                    }
                }
                Ok((out, fit.params))
            }
        })
        .collect();

    let mut residual_fields = Vec::with_capacity(scenario.variables.len());
    let mut covariate_params = Vec::with_capacity(scenario.variables.len());
    for r in results {
        let (field, params) = r?;
        residual_fields.push(field);
        covariate_params.push(params);
    }

    let window_counts = Array2::from_shape_fn(
        (scenario.facilities.len(), window.len()),
        |(j, col)| scenario.counts[(j, window.start + col)],
    );
    let incidence_window = prewhiten_incidence(
        &window_counts,
        &travel,
        &coords,
        &pop_tsp,
        incidence_cfg,
    )
    .map_err(|source| PipelineError::Prewhiten {
        variable: "incidence".into(),
        source,
    })?;
    // re-seat the window's residuals into the full month layout
    let mut residuals = Array2::from_elem(
        (scenario.facilities.len(), scenario.config.months),
        f64::NAN,
    );
    for j in 0..scenario.facilities.len() {
        for (col, t) in window.clone().enumerate() {
            residuals[(j, t)] = incidence_window.residuals[(j, col)];
        }
    }
    let incidence = IncidencePrewhiten {
        residuals,
        ..incidence_window
    };

    Ok(Prepared {
        travel,
        tsp,
        pop_tsp,
        residual_fields,
        covariate_params,
        incidence,
        window,
    })
}

/// Value of a feature for response month `t`: field month `t + max_lag - lag`.
fn field_month(
    feature: &str,
    id: &FeatureId,
    t: usize,
    max_lag: u32,
    available: usize,
) -> Result<usize, PipelineError> {
    let lag = id.lag.unwrap_or(0);
    let fm = t as isize + max_lag as isize - lag as isize;
    if fm < 0 || fm as usize >= available {
        return Err(PipelineError::MissingMonth {
            feature: feature.to_string(),
            month: t,
            lag,
            field_month: fm,
            available,
        });
    }
    Ok(fm as usize)
}

/// Lagged covariate matrix (`pixels x months`) for the given response
/// months, read from a per-variable field stack.
pub fn lagged_matrix(
    fields: &[Array3<f64>],
    feature: &str,
    id: &FeatureId,
    months: std::ops::Range<usize>,
    max_lag: u32,
    pixels: &[usize],
    n_cols_grid: usize,
) -> Result<Array2<f64>, PipelineError> {
    let field = &fields[id.var];
    let available = field.dim().0;
    let mut out = Array2::zeros((pixels.len(), months.len()));
    for (col, t) in months.clone().enumerate() {
        let fm = field_month(feature, id, t, max_lag, available)?;
        for (row, &pix) in pixels.iter().enumerate() {
            out[(row, col)] = field[(fm, pix / n_cols_grid, pix % n_cols_grid)];
        }
    }
    Ok(out)
}

/// Assemble the dataset the two-stage causal search runs on, over the given
/// response months:
/// * fine rows: seeded random (pixel, month) samples of residual fields;
/// * grouped rows: per facility-month, the catchment pixels weighted by
///   `p * pop * tsp`, normalized to sum to one;
/// * response rows: incidence rate residuals.
/// Facilities excluded by the incidence prewhitening are dropped.
pub fn causal_dataset(
    scenario: &Scenario,
    prepared: &Prepared,
    months: std::ops::Range<usize>,
    n_fine_rows: usize,
    seed: u64,
) -> Result<CausalDataset, PipelineError> {
    let (nr, nc) = (scenario.config.grid_rows, scenario.config.grid_cols);
    let n_pix = nr * nc;
    let max_lag = scenario.max_lag();
    let features = candidate_features(scenario);
    if months.start < prepared.window.start || months.end > prepared.window.end {
        return Err(PipelineError::Invalid(format!(
            "months {:?} outside the prepared window {:?}",
            months, prepared.window
        )));
    }

    // fine rows: (pixel, month) pairs
    let mut rng = stream_rng(seed, "fine-rows", 0);
    let month_list: Vec<usize> = months.clone().collect();
    let fine_rows: Vec<(usize, usize)> = (0..n_fine_rows)
        .map(|_| {
            let pix = rand::Rng::random_range(&mut rng, 0..n_pix);
            let t = month_list[rand::Rng::random_range(&mut rng, 0..month_list.len())];
            (pix, t)
        })
        .collect();

    // response rows: facility-month, skipping excluded facilities
    let catchment = &prepared.incidence.catchment;
    let n_fac = scenario.facilities.len();
    let excluded = &prepared.incidence.excluded_facilities;
    let mut resp_rows: Vec<(usize, usize)> = Vec::new();
    for j in 0..n_fac {
        if excluded.contains(&j) {
            continue;
        }
        for &t in &month_list {
            resp_rows.push((j, t));
        }
    }
    if resp_rows.is_empty() {
        return Err(PipelineError::Invalid("no usable facility-months".into()));
    }

    // catchment pixel lists with normalized population weights
    let by_facility = catchment.nonzero_by_facility();
    let group_members: Vec<Vec<(usize, f64)>> = (0..n_fac)
        .map(|j| {
            let mut members: Vec<(usize, f64)> = by_facility[j]
                .iter()
                .map(|&(pix, pij)| (pix, pij * prepared.pop_tsp[pix]))
                .filter(|(_, w)| *w > 0.0)
                .collect();
            let total: f64 = members.iter().map(|(_, w)| w).sum();
            if total > 0.0 {
                for (_, w) in members.iter_mut() {
                    *w /= total;
                }
            }
            members
        })
        .collect();

    let t_f = scenario.field_months();
    let mut causal_features = Vec::with_capacity(features.len());
    for (name, id) in &features {
        let field = &prepared.residual_fields[id.var];
        let mut fine = Vec::with_capacity(fine_rows.len());
        for &(pix, t) in &fine_rows {
            let fm = field_month(name, id, t, max_lag, t_f)?;
            fine.push(field[(fm, pix / nc, pix % nc)]);
        }
        let mut grouped: Vec<Group> = Vec::with_capacity(resp_rows.len());
        for &(j, t) in &resp_rows {
            let fm = field_month(name, id, t, max_lag, t_f)?;
            let group: Group = group_members[j]
                .iter()
                .map(|&(pix, w)| (field[(fm, pix / nc, pix % nc)], w))
                .collect();
            grouped.push(group);
        }
        causal_features.push(CausalFeature {
            name: name.clone(),
            scale_tag: id.scale_tag(),
            fine,
            grouped,
        });
    }

    let response: Vec<f64> = resp_rows
        .iter()
        .map(|&(j, t)| prepared.incidence.residuals[(j, t)])
        .collect();

    Ok(CausalDataset {
        features: causal_features,
        response_name: "incidence".into(),
        response,
    })
}

/// Pixels that enter the disaggregation likelihood: covered by some
/// facility and carrying treatment-seeking population.
pub fn likelihood_pixels(prepared: &Prepared) -> Vec<usize> {
    (0..prepared.pop_tsp.len())
        .filter(|&i| !prepared.incidence.catchment.uncovered[i] && prepared.pop_tsp[i] > 0.0)
        .collect()
}

/// Covariate/count bundle for fitting the regression on `train_months`,
/// using the raw (not prewhitened) fields of the selected features and the
/// fitted-attractiveness catchment.
pub fn disagg_data(
    scenario: &Scenario,
    prepared: &Prepared,
    selected: &[String],
    train_months: std::ops::Range<usize>,
) -> Result<DisaggData, PipelineError> {
    let nc = scenario.config.grid_cols;
    let pixels = likelihood_pixels(prepared);
    let max_lag = scenario.max_lag();

    let mut covariates = Vec::with_capacity(selected.len());
    for name in selected {
        let id = find_feature(scenario, name)?;
        covariates.push(lagged_matrix(
            &scenario.fields,
            name,
            &id,
            train_months.clone(),
            max_lag,
            &pixels,
            nc,
        )?);
    }

    let counts = Array2::from_shape_fn(
        (scenario.facilities.len(), train_months.len()),
        |(j, col)| scenario.counts[(j, train_months.start + col)] as f64,
    );
    let p_full = &prepared.incidence.catchment.p;
    let mut p = Array2::zeros((pixels.len(), scenario.facilities.len()));
    for (row, &pix) in pixels.iter().enumerate() {
        p.row_mut(row).assign(&p_full.row(pix));
    }
    let mut travel = Array2::zeros((pixels.len(), scenario.facilities.len()));
    for (row, &pix) in pixels.iter().enumerate() {
        travel.row_mut(row).assign(&prepared.travel.row(pix));
    }

    Ok(DisaggData {
        counts,
        covariate_names: selected.to_vec(),
        covariates,
        pixel_coords: pixels.iter().map(|&i| [(i % nc) as f64, (i / nc) as f64]).collect(),
        pop_tsp: pixels.iter().map(|&i| prepared.pop_tsp[i]).collect(),
        p,
        travel_time: Some(travel),
    })
}

/// Same-shape covariate matrices for forecast months (prediction input).
pub fn forecast_covariates(
    scenario: &Scenario,
    prepared: &Prepared,
    selected: &[String],
    forecast_months: std::ops::Range<usize>,
) -> Result<Vec<Array2<f64>>, PipelineError> {
    let nc = scenario.config.grid_cols;
    let pixels = likelihood_pixels(prepared);
    let max_lag = scenario.max_lag();
    selected
        .iter()
        .map(|name| {
            let id = find_feature(scenario, name)?;
            lagged_matrix(
                &scenario.fields,
                name,
                &id,
                forecast_months.clone(),
                max_lag,
                &pixels,
                nc,
            )
        })
        .collect()
}

/// Treatment-seeking population attending each facility under a catchment.
pub fn treatment_population(p: &Array2<f64>, pop_tsp: &[f64]) -> Vec<f64> {
    let n_fac = p.ncols();
    let mut out = vec![0.0; n_fac];
    for (i, row) in p.rows().into_iter().enumerate() {
        for (j, &pij) in row.iter().enumerate() {
            out[j] += pij * pop_tsp[i];
        }
    }
    out
}

/// Observed facility rates per treatment-seeking population over a month
/// range; facilities with no catchment population get NaN rows.
pub fn observed_rates(
    counts: &Array2<u64>,
    treat_pop: &[f64],
    months: std::ops::Range<usize>,
) -> Array2<f64> {
    Array2::from_shape_fn((counts.nrows(), months.len()), |(j, col)| {
        if treat_pop[j] > 0.0 {
            counts[(j, months.start + col)] as f64 / treat_pop[j]
        } else {
            f64::NAN
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scenario, ScenarioConfig};

    fn tiny_scenario() -> Scenario {
        let cfg = ScenarioConfig {
            grid_rows: 8,
            grid_cols: 8,
            months: 6,
            n_static: 2,
            n_dynamic: 1,
            lags: vec![0, 1],
            n_static_parents: 1,
            n_dynamic_parents: 1,
            n_facilities: 8,
            population_per_pixel: 800.0,
            ..Default::default()
        };
        generate_scenario(&cfg, 5).unwrap()
    }

    fn tiny_prepared(scenario: &Scenario) -> Prepared {
        let pw = PrewhitenConfig::default();
        let inc = DisaggConfig {
            rff_dim: 16,
            max_iters: 60,
            ..Default::default()
        };
        prepare(scenario, &pw, &inc).unwrap()
    }

    #[test]
    fn prepare_and_build_causal_dataset() {
        let scenario = tiny_scenario();
        let prepared = tiny_prepared(&scenario);
        assert_eq!(prepared.residual_fields.len(), 3);

        let data = causal_dataset(&scenario, &prepared, 0..6, 120, 7).unwrap();
        data.validate().unwrap();
        // 2 static + 1 dynamic x 2 lags
        assert_eq!(data.n_features(), 4);
        assert_eq!(data.n_fine_rows(), 120);
        assert!(data.n_response_rows() > 0);
        // group weights normalized
        for f in &data.features {
            for g in &f.grouped {
                let s: f64 = g.iter().map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-9 || g.is_empty());
            }
        }
        // deterministic
        let again = causal_dataset(&scenario, &prepared, 0..6, 120, 7).unwrap();
        assert_eq!(data.response, again.response);
        assert_eq!(data.features[0].fine, again.features[0].fine);
    }

    #[test]
    fn lag_mapping_reads_shifted_months() {
        let scenario = tiny_scenario();
        let max_lag = scenario.max_lag();
        let name = "d0_lag1";
        let id = find_feature(&scenario, name).unwrap();
        let m = lagged_matrix(
            &scenario.fields,
            name,
            &id,
            2..4,
            max_lag,
            &[0, 5],
            scenario.config.grid_cols,
        )
        .unwrap();
        // response month 2 at lag 1 reads field month 2 + max_lag - 1
        let fm = 2 + max_lag as usize - 1;
        assert_eq!(m[(0, 0)], scenario.fields[id.var][(fm, 0, 0)]);
        assert_eq!(m[(1, 1)], scenario.fields[id.var][(fm + 1, 0, 5)]);
    }

    #[test]
    fn missing_month_is_reported_with_context() {
        let scenario = tiny_scenario();
        let id = find_feature(&scenario, "d0_lag0").unwrap();
        let err = lagged_matrix(
            &scenario.fields,
            "d0_lag0",
            &id,
            0..scenario.config.months + 5,
            scenario.max_lag(),
            &[0],
            scenario.config.grid_cols,
        )
        .unwrap_err();
        match err {
            PipelineError::MissingMonth { feature, lag, .. } => {
                assert_eq!(feature, "d0_lag0");
                assert_eq!(lag, 0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn unknown_feature_is_an_error() {
        let scenario = tiny_scenario();
        assert!(matches!(
            find_feature(&scenario, "nope"),
            Err(PipelineError::UnknownFeature(_))
        ));
    }

    #[test]
    fn disagg_bundle_aligns_with_selection() {
        let scenario = tiny_scenario();
        let prepared = tiny_prepared(&scenario);
        let selected = vec!["s0".to_string(), "d0_lag1".to_string()];
        let data = disagg_data(&scenario, &prepared, &selected, 1..5).unwrap();
        assert_eq!(data.covariates.len(), 2);
        assert_eq!(data.n_months(), 4);
        assert_eq!(data.covariate_names, selected);
        let rates = observed_rates(
            &scenario.counts,
            &treatment_population(&prepared.incidence.catchment.p, &prepared.pop_tsp),
            1..5,
        );
        assert_eq!(rates.dim(), (scenario.facilities.len(), 4));
    }
}
