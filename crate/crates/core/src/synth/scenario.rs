//! Synthetic scenario generation with a known causal graph, plus on-disk
//! persistence (JSON spec, grid-format fields, counts CSV).

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use super::dag::Dag;
use super::fields::{
    correlated_noise, simulate_fields, simulate_incidence, Link, NodeSpec, NoiseParams,
    ResponseParent,
};
use crate::grid::{
    catchment_weights, travel_time_matrix, treatment_seeking_proportion, CatchmentWeights, Cell,
    FrictionSurface, GridError, Raster, TreatmentSeekingParams, CATCHMENT_CUTOFF_MINUTES,
};
use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScenarioConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cell_size: f64,
    /// Response months (fields cover `months + max(lags)` months).
    pub months: usize,
    pub n_static: usize,
    pub n_dynamic: usize,
    /// Candidate lags for dynamic features.
    pub lags: Vec<u32>,
    /// Edge probability of the covariate DAG.
    pub edge_prob: f64,
    pub n_static_parents: usize,
    pub n_dynamic_parents: usize,
    pub beta0: f64,
    pub coef_magnitude: f64,
    /// Fraction of structural links drawn from the nonlinear menu.
    pub nonlinear_fraction: f64,
    pub noise: NoiseParams,
    /// Scale of the unexplained spatiotemporal noise on the log incidence
    /// rate (the structure prewhitening is meant to remove).
    pub response_noise_scale: f64,
    pub n_facilities: usize,
    pub friction_minutes_per_cell: f64,
    pub population_per_pixel: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            grid_rows: 20,
            grid_cols: 20,
            cell_size: 1.0,
            months: 12,
            n_static: 4,
            n_dynamic: 2,
            lags: vec![0, 1, 2, 3],
            edge_prob: 0.3,
            n_static_parents: 2,
            n_dynamic_parents: 2,
            beta0: -4.0,
            coef_magnitude: 0.8,
            nonlinear_fraction: 0.3,
            noise: NoiseParams::default(),
            response_noise_scale: 0.3,
            n_facilities: 60,
            friction_minutes_per_cell: 30.0,
            population_per_pixel: 500.0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Variable {
    pub name: String,
    pub is_static: bool,
}

/// What the generator knows and the pipeline is asked to recover.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GroundTruth {
    pub dag: Dag,
    /// Feature names (`var` or `var_lagK`) that directly cause incidence.
    pub response_parent_features: Vec<String>,
    pub beta0: f64,
    pub response_parents: Vec<ResponseParent>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub variables: Vec<Variable>,
    pub dag: Dag,
    pub node_specs: Vec<NodeSpec>,
    pub response_parents: Vec<ResponseParent>,
    pub facilities: Vec<Cell>,
    /// True per-facility attractiveness used to generate the data.
    pub attractiveness: Vec<f64>,
    pub friction: Raster,
    pub population: Raster,
    /// Per-variable fields over `months + max_lag` months.
    pub fields: Vec<Array3<f64>>,
    pub counts: Array2<u64>,
    pub true_lambda: Array3<f64>,
    pub clipped: usize,
}

/// Canonical feature name for a variable at a lag.
pub fn feature_name(var: &str, lag: Option<u32>) -> String {
    match lag {
        None => var.to_string(),
        Some(k) => format!("{var}_lag{k}"),
    }
}

impl Scenario {
    pub fn max_lag(&self) -> u32 {
        self.config.lags.iter().copied().max().unwrap_or(0)
    }

    pub fn field_months(&self) -> usize {
        self.config.months + self.max_lag() as usize
    }

    pub fn n_pixels(&self) -> usize {
        self.config.grid_rows * self.config.grid_cols
    }

    /// Travel time matrix (pixel x facility), recomputed from the friction
    /// surface; deterministic.
    pub fn travel_times(&self) -> Result<Array2<f64>, GridError> {
        let friction = FrictionSurface::new(self.friction.clone())?;
        travel_time_matrix(&friction, &self.facilities)
    }

    /// Catchment weights under the given attractiveness (true or fitted).
    pub fn catchment(&self, attractiveness: &[f64]) -> Result<CatchmentWeights, GridError> {
        let tt = self.travel_times()?;
        catchment_weights(&tt, attractiveness, CATCHMENT_CUTOFF_MINUTES)
    }

    /// Treatment-seeking proportion per pixel from the nearest facility.
    pub fn tsp(&self, travel: &Array2<f64>) -> Vec<f64> {
        let params = TreatmentSeekingParams::reference();
        travel
            .rows()
            .into_iter()
            .map(|row| {
                let min_t = row.iter().copied().fold(f64::INFINITY, f64::min);
                if min_t.is_finite() {
                    treatment_seeking_proportion(min_t, &params)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// All candidate feature names: static variables plus every
    /// (dynamic variable, lag) combination.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for v in &self.variables {
            if v.is_static {
                names.push(feature_name(&v.name, None));
            }
        }
        for v in &self.variables {
            if !v.is_static {
                for &lag in &self.config.lags {
                    names.push(feature_name(&v.name, Some(lag)));
                }
            }
        }
        names
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let features = self
            .response_parents
            .iter()
            .map(|p| {
                let v = &self.variables[p.var];
                feature_name(&v.name, (!v.is_static).then_some(p.lag))
            })
            .collect();
        GroundTruth {
            dag: self.dag.clone(),
            response_parent_features: features,
            beta0: self.config.beta0,
            response_parents: self.response_parents.clone(),
        }
    }
}

/// Generate a full scenario: covariate DAG and fields, facility network,
/// catchments under true attractiveness, and observed counts.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario, ScenarioError> {
    if config.n_static_parents > config.n_static {
        return Err(ScenarioError::Invalid(
            "more static parents than static variables".into(),
        ));
    }
    if config.n_dynamic_parents > config.n_dynamic {
        return Err(ScenarioError::Invalid(
            "more dynamic parents than dynamic variables".into(),
        ));
    }
    let n_vars = config.n_static + config.n_dynamic;
    if n_vars == 0 {
        return Err(ScenarioError::Invalid("no variables".into()));
    }
    let n_pix = config.grid_rows * config.grid_cols;
    if config.n_facilities == 0 || config.n_facilities > n_pix {
        return Err(ScenarioError::Invalid(format!(
            "facility count {} out of range for {n_pix} pixels",
            config.n_facilities
        )));
    }

    let mut variables = Vec::with_capacity(n_vars);
    for i in 0..config.n_static {
        variables.push(Variable {
            name: format!("s{i}"),
            is_static: true,
        });
    }
    for i in 0..config.n_dynamic {
        variables.push(Variable {
            name: format!("d{i}"),
            is_static: false,
        });
    }

    // Covariate DAG: shuffled statics precede shuffled dynamics in the
    // topological order, so no dynamic variable causes a static one.
    let mut rng = stream_rng(seed, "scenario", 0);
    let mut order: Vec<usize> = (0..config.n_static).collect();
    order.shuffle(&mut rng);
    let mut dyn_order: Vec<usize> = (config.n_static..n_vars).collect();
    dyn_order.shuffle(&mut rng);
    order.extend(dyn_order);
    let mut parents = vec![Vec::new(); n_vars];
    for a in 0..n_vars {
        for b in (a + 1)..n_vars {
            if rng.random::<f64>() < config.edge_prob {
                parents[order[b]].push(order[a]);
            }
        }
    }
    let dag = Dag::new(variables.iter().map(|v| v.name.clone()).collect(), parents);

    let draw_link = |rng: &mut rand_chacha::ChaCha8Rng| -> Link {
        if rng.random::<f64>() < config.nonlinear_fraction {
            if rng.random::<bool>() {
                Link::Quadratic
            } else {
                Link::Sine
            }
        } else {
            Link::Linear
        }
    };

    let node_specs: Vec<NodeSpec> = (0..n_vars)
        .map(|i| NodeSpec {
            is_static: variables[i].is_static,
            noise_scale: 1.0,
            links: dag
                .parents(i)
                .iter()
                .map(|_| {
                    let coef = (0.5 + 0.5 * rng.random::<f64>())
                        * if rng.random::<bool>() { 1.0 } else { -1.0 };
                    (draw_link(&mut rng), coef)
                })
                .collect(),
        })
        .collect();

    let max_lag = config.lags.iter().copied().max().unwrap_or(0);
    let field_months = config.months + max_lag as usize;
    let fields = simulate_fields(
        &dag,
        &node_specs,
        (config.grid_rows, config.grid_cols),
        field_months,
        &config.noise,
        crate::seed::derive_seed(seed, "fields", 0),
    );

    // Response parents: distinct static variables, then distinct dynamic
    // variables at one random lag each.
    let mut static_ids: Vec<usize> = (0..config.n_static).collect();
    static_ids.shuffle(&mut rng);
    let mut dynamic_ids: Vec<usize> = (config.n_static..n_vars).collect();
    dynamic_ids.shuffle(&mut rng);
    let mut response_parents = Vec::new();
    let draw_coef = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        (0.7 + 0.3 * rng.random::<f64>())
            * config.coef_magnitude
            * if rng.random::<bool>() { 1.0 } else { -1.0 }
    };
    for &v in static_ids.iter().take(config.n_static_parents) {
        let coef = draw_coef(&mut rng);
        response_parents.push(ResponseParent {
            var: v,
            lag: 0,
            coef,
            link: draw_link(&mut rng),
        });
    }
    for &v in dynamic_ids.iter().take(config.n_dynamic_parents) {
        let lag = config.lags[rng.random_range(0..config.lags.len())];
        let coef = draw_coef(&mut rng);
        response_parents.push(ResponseParent {
            var: v,
            lag,
            coef,
            link: draw_link(&mut rng),
        });
    }

    // Facility network on a uniform friction surface.
    let friction = Raster::constant(
        config.grid_rows,
        config.grid_cols,
        config.friction_minutes_per_cell,
        config.cell_size,
    );
    let mut cells: Vec<Cell> = (0..config.grid_rows)
        .flat_map(|r| (0..config.grid_cols).map(move |c| (r, c)))
        .collect();
    cells.shuffle(&mut rng);
    let mut facilities: Vec<Cell> = cells.into_iter().take(config.n_facilities).collect();
    facilities.sort_unstable();

    let attractiveness: Vec<f64> = (0..config.n_facilities)
        .map(|_| {
            let z: f64 = rand_distr::Distribution::sample(
                &rand_distr::StandardNormal,
                &mut rng,
            );
            (0.25 * z).exp()
        })
        .collect();

    let population = Raster::constant(
        config.grid_rows,
        config.grid_cols,
        config.population_per_pixel,
        config.cell_size,
    );

    let friction_surface = FrictionSurface::new(friction.clone())?;
    let travel = travel_time_matrix(&friction_surface, &facilities)?;
    let catchment = catchment_weights(&travel, &attractiveness, CATCHMENT_CUTOFF_MINUTES)?;
    let params = TreatmentSeekingParams::reference();
    let tsp: Vec<f64> = travel
        .rows()
        .into_iter()
        .map(|row| {
            let min_t = row.iter().copied().fold(f64::INFINITY, f64::min);
            if min_t.is_finite() {
                treatment_seeking_proportion(min_t, &params)
            } else {
                0.0
            }
        })
        .collect();

    let response_noise = if config.response_noise_scale > 0.0 {
        let mut noise_rng = stream_rng(seed, "response-noise", 0);
        let mut field = correlated_noise(
            (config.grid_rows, config.grid_cols),
            config.months,
            &config.noise,
            false,
            &mut noise_rng,
        );
        field *= config.response_noise_scale;
        Some(field)
    } else {
        None
    };

    let incidence = simulate_incidence(
        &fields,
        &response_parents,
        config.beta0,
        config.months,
        max_lag,
        response_noise.as_ref(),
        &catchment,
        &population,
        &tsp,
        crate::seed::derive_seed(seed, "incidence", 0),
    );

    Ok(Scenario {
        config: config.clone(),
        seed,
        variables,
        dag,
        node_specs,
        response_parents,
        facilities,
        attractiveness,
        friction,
        population,
        fields,
        counts: incidence.counts,
        true_lambda: incidence.lambda,
        clipped: incidence.clipped,
    })
}

/// The JSON-serializable part of a scenario.
#[derive(serde::Serialize, serde::Deserialize)]
struct ScenarioSpec {
    config: ScenarioConfig,
    seed: u64,
    variables: Vec<Variable>,
    dag: Dag,
    node_specs: Vec<NodeSpec>,
    response_parents: Vec<ResponseParent>,
    facilities: Vec<Cell>,
    attractiveness: Vec<f64>,
    clipped: usize,
    ground_truth: GroundTruth,
}

impl Scenario {
    /// Write the scenario to a directory: `scenario.json`,
    /// `fields/<var>_m<t>.asc` (one grid per variable per month),
    /// `population.asc`, `friction.asc`, `counts.csv`, and
    /// `lambda/lambda_m<t>.asc`.
    pub fn save<P: AsRef<Path>>(&self, dir: P) -> Result<(), ScenarioError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("fields"))?;
        std::fs::create_dir_all(dir.join("lambda"))?;

        let spec = ScenarioSpec {
            config: self.config.clone(),
            seed: self.seed,
            variables: self.variables.clone(),
            dag: self.dag.clone(),
            node_specs: self.node_specs.clone(),
            response_parents: self.response_parents.clone(),
            facilities: self.facilities.clone(),
            attractiveness: self.attractiveness.clone(),
            clipped: self.clipped,
            ground_truth: self.ground_truth(),
        };
        let f = std::fs::File::create(dir.join("scenario.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &spec)?;

        for (vi, var) in self.variables.iter().enumerate() {
            for t in 0..self.field_months() {
                let slice = self.fields[vi].slice(s![t, .., ..]).to_owned();
                let raster = Raster::new(
                    slice,
                    self.population.mask().clone(),
                    self.config.cell_size,
                );
                raster
                    .write_ascii_file(dir.join(format!("fields/{}_m{t}.asc", var.name)))?;
            }
        }
        for t in 0..self.config.months {
            let slice = self.true_lambda.slice(s![t, .., ..]).to_owned();
            let raster = Raster::new(
                slice,
                self.population.mask().clone(),
                self.config.cell_size,
            );
            raster.write_ascii_file(dir.join(format!("lambda/lambda_m{t}.asc")))?;
        }
        self.population
            .write_ascii_file(dir.join("population.asc"))?;
        self.friction.write_ascii_file(dir.join("friction.asc"))?;

        let mut counts = std::io::BufWriter::new(std::fs::File::create(dir.join("counts.csv"))?);
        writeln!(counts, "facility,month,count")?;
        for j in 0..self.counts.nrows() {
            for t in 0..self.counts.ncols() {
                writeln!(counts, "{j},{t},{}", self.counts[(j, t)])?;
            }
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(dir: P) -> Result<Scenario, ScenarioError> {
        let dir = dir.as_ref();
        let f = std::fs::File::open(dir.join("scenario.json"))?;
        let spec: ScenarioSpec = serde_json::from_reader(std::io::BufReader::new(f))?;

        let population = Raster::read_ascii_file(dir.join("population.asc"))?;
        let friction = Raster::read_ascii_file(dir.join("friction.asc"))?;

        let field_months = spec.config.months
            + spec.config.lags.iter().copied().max().unwrap_or(0) as usize;
        let (nr, nc) = (spec.config.grid_rows, spec.config.grid_cols);
        let mut fields = Vec::with_capacity(spec.variables.len());
        for var in &spec.variables {
            let mut field = Array3::zeros((field_months, nr, nc));
            for t in 0..field_months {
                let raster =
                    Raster::read_ascii_file(dir.join(format!("fields/{}_m{t}.asc", var.name)))?;
                field.slice_mut(s![t, .., ..]).assign(raster.values());
            }
            fields.push(field);
        }
        let mut true_lambda = Array3::zeros((spec.config.months, nr, nc));
        for t in 0..spec.config.months {
            let raster = Raster::read_ascii_file(dir.join(format!("lambda/lambda_m{t}.asc")))?;
            true_lambda.slice_mut(s![t, .., ..]).assign(raster.values());
        }

        let n_fac = spec.facilities.len();
        let mut counts = Array2::zeros((n_fac, spec.config.months));
        let reader = std::io::BufReader::new(std::fs::File::open(dir.join("counts.csv"))?);
        for (ln, line) in reader.lines().enumerate() {
            let line = line?;
            if ln == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.trim().split(',').collect();
            if parts.len() != 3 {
                return Err(ScenarioError::Invalid(format!("bad counts row `{line}`")));
            }
            let j: usize = parts[0]
                .parse()
                .map_err(|_| ScenarioError::Invalid(format!("bad facility `{}`", parts[0])))?;
            let t: usize = parts[1]
                .parse()
                .map_err(|_| ScenarioError::Invalid(format!("bad month `{}`", parts[1])))?;
            let c: u64 = parts[2]
                .parse()
                .map_err(|_| ScenarioError::Invalid(format!("bad count `{}`", parts[2])))?;
            counts[(j, t)] = c;
        }

        Ok(Scenario {
            config: spec.config,
            seed: spec.seed,
            variables: spec.variables,
            dag: spec.dag,
            node_specs: spec.node_specs,
            response_parents: spec.response_parents,
            facilities: spec.facilities,
            attractiveness: spec.attractiveness,
            friction,
            population,
            fields,
            counts,
            true_lambda,
            clipped: spec.clipped,
        })
    }
}
