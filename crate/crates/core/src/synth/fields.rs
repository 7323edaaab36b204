//! Structural-equation simulation of spatiotemporal fields and aggregated
//! incidence counts.

use ndarray::prelude::*;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};

use super::dag::Dag;
use crate::grid::{CatchmentWeights, Raster};
use crate::seed::stream_rng;

/// Spatiotemporal correlation of simulated noise fields.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    /// Box moving-average radius in cells for the spatial filter.
    pub spatial_radius: usize,
    /// Lag-1 temporal autocorrelation of the smooth component.
    pub temporal_corr: f64,
    /// Variance share of a fine-scale i.i.d. component mixed into the
    /// field. The smooth part is what prewhitening removes; the fine part
    /// is what the independence tests run on.
    pub fine_fraction: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            spatial_radius: 2,
            temporal_corr: 0.6,
            fine_fraction: 0.5,
        }
    }
}

/// Per-edge structural nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Link {
    Linear,
    Quadratic,
    Sine,
}

impl Link {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Link::Linear => x,
            // centered so standard-normal inputs keep zero mean
            Link::Quadratic => x * x - 1.0,
            Link::Sine => (2.0 * x).sin(),
        }
    }
}

/// Structural equation for one DAG node: links aligned with the node's
/// (sorted) parent list, plus its own noise scale.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NodeSpec {
    pub is_static: bool,
    pub noise_scale: f64,
    /// `(link, coefficient)` per parent, in parent-list order.
    pub links: Vec<(Link, f64)>,
}

/// Zero-mean unit-variance noise with box-smoothed spatial structure and an
/// AR(1) temporal recursion at `temporal_corr`. Static fields repeat one
/// slice across months.
pub fn correlated_noise(
    shape: (usize, usize),
    months: usize,
    params: &NoiseParams,
    is_static: bool,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let (nr, nc) = shape;
    let phi = params.temporal_corr;
    assert!((0.0..1.0).contains(&phi.abs()) || phi == 0.0);
    assert!((0.0..=1.0).contains(&params.fine_fraction));
    let mut out = Array3::zeros((months, nr, nc));

    let white = |rng: &mut ChaCha8Rng| -> Array2<f64> {
        Array2::from_shape_fn((nr, nc), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
    };
    let innovation =
        |rng: &mut ChaCha8Rng| -> Array2<f64> { smooth_unit_variance(&white(rng), params.spatial_radius) };

    let smooth_scale = (1.0 - params.fine_fraction).sqrt();
    let fine_scale = params.fine_fraction.sqrt();

    if is_static {
        let slice = &innovation(rng) * smooth_scale + &white(rng) * fine_scale;
        for t in 0..months {
            out.slice_mut(s![t, .., ..]).assign(&slice);
        }
        return out;
    }

    let mut current = innovation(rng);
    let innovation_scale = (1.0 - phi * phi).sqrt();
    for t in 0..months {
        if t > 0 {
            let fresh = innovation(rng);
            current = &current * phi + &fresh * innovation_scale;
        }
        let slice = &current * smooth_scale + &white(rng) * fine_scale;
        out.slice_mut(s![t, .., ..]).assign(&slice);
    }
    out
}

/// Box moving average normalized so white-noise input keeps unit marginal
/// variance (per-cell window sizes differ at the edges).
fn smooth_unit_variance(white: &Array2<f64>, radius: usize) -> Array2<f64> {
    if radius == 0 {
        return white.clone();
    }
    let (nr, nc) = white.dim();
    let r = radius as isize;
    Array2::from_shape_fn((nr, nc), |(i, j)| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for di in -r..=r {
            for dj in -r..=r {
                let ii = i as isize + di;
                let jj = j as isize + dj;
                if ii >= 0 && jj >= 0 && (ii as usize) < nr && (jj as usize) < nc {
                    sum += white[(ii as usize, jj as usize)];
                    count += 1;
                }
            }
        }
        sum / (count as f64).sqrt()
    })
}

/// Evaluate the structural equations in topological order. Each node's field
/// is the link-transformed sum of its parents plus `noise_scale` times its
/// own correlated noise, standardized to zero mean and unit variance (fields
/// with negligible variance are left as-is).
pub fn simulate_fields(
    dag: &Dag,
    specs: &[NodeSpec],
    shape: (usize, usize),
    months: usize,
    noise: &NoiseParams,
    seed: u64,
) -> Vec<Array3<f64>> {
    assert_eq!(specs.len(), dag.n_nodes());
    let order = dag.topological_order().expect("dag is acyclic");
    let mut fields: Vec<Array3<f64>> = vec![Array3::zeros((0, 0, 0)); dag.n_nodes()];

    for &node in &order {
        let spec = &specs[node];
        if spec.is_static {
            for &p in dag.parents(node) {
                assert!(
                    specs[p].is_static,
                    "static node {node} cannot depend on dynamic parent {p}"
                );
            }
        }
        let mut rng = stream_rng(seed, "field", node as u64);
        let mut field = correlated_noise(shape, months, noise, spec.is_static, &mut rng);
        if spec.noise_scale != 1.0 {
            field *= spec.noise_scale;
        }
        for (&parent, (link, coef)) in dag.parents(node).iter().zip(&spec.links) {
            let parent_field = &fields[parent];
            field.zip_mut_with(parent_field, |v, &p| *v += coef * link.apply(p));
        }
        standardize_in_place(&mut field);
        fields[node] = field;
    }
    fields
}

fn standardize_in_place(field: &mut Array3<f64>) {
    let n = field.len() as f64;
    let mean = field.sum() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 1e-12 {
        let sd = var.sqrt();
        field.mapv_inplace(|v| (v - mean) / sd);
    } else if mean.abs() > 0.0 {
        field.mapv_inplace(|v| v - mean);
    }
}

/// One direct cause of incidence: a variable at a time lag with its
/// structural coefficient and link.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ResponseParent {
    pub var: usize,
    pub lag: u32,
    pub coef: f64,
    pub link: Link,
}

#[derive(Debug, Clone)]
pub struct IncidenceData {
    /// Observed facility counts, `n_facilities x months`.
    pub counts: Array2<u64>,
    /// True per-pixel incidence rate per response month.
    pub lambda: Array3<f64>,
    /// How many log-rates hit the +-20 clip guard.
    pub clipped: usize,
}

/// Simulate observed facility counts.
///
/// `log lambda_it = beta0 + sum_p coef_p link_p(parent field at t - lag_p)
/// (+ noise)`, clipped to +-20; pixel cases are Poisson in
/// `lambda * pop * tsp` and get routed to facilities multinomially by the
/// catchment probabilities. Response month `t` reads field month
/// `t + max_lag - lag`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_incidence(
    fields: &[Array3<f64>],
    parents: &[ResponseParent],
    beta0: f64,
    months: usize,
    max_lag: u32,
    noise_field: Option<&Array3<f64>>,
    catchment: &CatchmentWeights,
    pop: &Raster,
    tsp: &[f64],
    seed: u64,
) -> IncidenceData {
    let (nr, nc) = pop.values().dim();
    let n_pix = nr * nc;
    assert_eq!(tsp.len(), n_pix);
    assert_eq!(catchment.n_pixels(), n_pix);
    let n_fac = catchment.n_facilities();
    for p in parents {
        assert!(p.lag <= max_lag, "lag {} exceeds max_lag {max_lag}", p.lag);
        let t_f = fields[p.var].dim().0;
        assert!(t_f >= months + max_lag as usize, "field too short for lags");
    }

    let mut lambda = Array3::zeros((months, nr, nc));
    let mut clipped = 0usize;
    for t in 0..months {
        for r in 0..nr {
            for c in 0..nc {
                let mut log_rate = beta0;
                for p in parents {
                    let tf = t + (max_lag - p.lag) as usize;
                    log_rate += p.coef * p.link.apply(fields[p.var][(tf, r, c)]);
                }
                if let Some(noise) = noise_field {
                    log_rate += noise[(t, r, c)];
                }
                if log_rate.abs() > 20.0 {
                    log_rate = log_rate.clamp(-20.0, 20.0);
                    clipped += 1;
                }
                lambda[(t, r, c)] = log_rate.exp();
            }
        }
    }

    let mut rng = stream_rng(seed, "incidence", 0);
    let mut counts = Array2::zeros((n_fac, months));
    for t in 0..months {
        for pix in 0..n_pix {
            if catchment.uncovered[pix] {
                continue; // cases never reach a facility
            }
            let cell = (pix / nc, pix % nc);
            if !pop.is_active(cell) {
                continue;
            }
            let mean = lambda[(t, cell.0, cell.1)] * pop.get(cell) * tsp[pix];
            if mean <= 0.0 {
                continue;
            }
            let total = Poisson::new(mean).unwrap().sample(&mut rng) as u64;
            if total == 0 {
                continue;
            }
            route_multinomial(total, &catchment.p.row(pix), t, &mut counts, &mut rng);
        }
    }

    IncidenceData {
        counts,
        lambda,
        clipped,
    }
}

/// Sequential-binomial multinomial routing of `total` cases over facilities.
fn route_multinomial(
    total: u64,
    probs: &ArrayView1<f64>,
    month: usize,
    counts: &mut Array2<u64>,
    rng: &mut ChaCha8Rng,
) {
    let mut remaining = total;
    let mut prob_left = 1.0;
    for (j, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if p <= 0.0 {
            continue;
        }
        let share = (p / prob_left).min(1.0);
        let draw = if share >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, share).unwrap().sample(rng)
        };
        counts[(j, month)] += draw;
        remaining -= draw;
        prob_left -= p;
        if prob_left <= 0.0 {
            break;
        }
    }
    // numerical leftovers go to the most attractive facility of the pixel
    if remaining > 0 {
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        counts[(best, month)] += remaining;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::catchment_weights;
    use crate::synth::dag::random_dag;
    use approx::assert_abs_diff_eq;

    fn node(is_static: bool, noise: f64, links: Vec<(Link, f64)>) -> NodeSpec {
        NodeSpec {
            is_static,
            noise_scale: noise,
            links,
        }
    }

    #[test]
    fn zero_noise_constant_root_gives_constant_field() {
        let dag = Dag::new(vec!["a".into()], vec![vec![]]);
        let fields = simulate_fields(
            &dag,
            &[node(true, 0.0, vec![])],
            (4, 4),
            3,
            &NoiseParams {
                spatial_radius: 1,
                temporal_corr: 0.5,
                fine_fraction: 0.0,
            },
            1,
        );
        assert!(fields[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_edge_no_noise_copies_parent() {
        let dag = Dag::new(vec!["a".into(), "b".into()], vec![vec![], vec![0]]);
        let specs = vec![
            node(false, 1.0, vec![]),
            node(false, 0.0, vec![(Link::Linear, 1.0)]),
        ];
        let fields = simulate_fields(
            &dag,
            &specs,
            (6, 6),
            4,
            &NoiseParams {
                spatial_radius: 1,
                temporal_corr: 0.3,
                fine_fraction: 0.0,
            },
            2,
        );
        for (a, b) in fields[0].iter().zip(fields[1].iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn noise_lag1_autocorrelation_hits_target() {
        let dag = Dag::new(vec!["a".into()], vec![vec![]]);
        let fields = simulate_fields(
            &dag,
            &[node(false, 1.0, vec![])],
            (50, 50),
            48,
            &NoiseParams {
                spatial_radius: 2,
                temporal_corr: 0.7,
                fine_fraction: 0.0,
            },
            3,
        );
        let f = &fields[0];
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 1..48 {
            for r in 0..50 {
                for c in 0..50 {
                    num += f[(t, r, c)] * f[(t - 1, r, c)];
                    den += f[(t - 1, r, c)] * f[(t - 1, r, c)];
                }
            }
        }
        let rho = num / den;
        assert!((rho - 0.7).abs() < 0.05, "lag-1 autocorrelation {rho}");
    }

    #[test]
    fn static_fields_do_not_vary_over_time() {
        let dag = random_dag(1, 0.0, 4);
        let fields = simulate_fields(
            &dag,
            &[node(true, 1.0, vec![])],
            (5, 5),
            6,
            &NoiseParams {
                spatial_radius: 1,
                temporal_corr: 0.5,
                fine_fraction: 0.0,
            },
            5,
        );
        let first = fields[0].slice(s![0, .., ..]).to_owned();
        for t in 1..6 {
            for (a, b) in first.iter().zip(fields[0].slice(s![t, .., ..]).iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn fields_are_standardized() {
        let dag = random_dag(3, 0.5, 6);
        let specs: Vec<NodeSpec> = (0..3)
            .map(|i| {
                node(
                    false,
                    1.0,
                    dag.parents(i).iter().map(|_| (Link::Linear, 0.8)).collect(),
                )
            })
            .collect();
        let fields = simulate_fields(
            &dag,
            &specs,
            (20, 20),
            12,
            &NoiseParams {
                spatial_radius: 1,
                temporal_corr: 0.4,
                fine_fraction: 0.0,
            },
            7,
        );
        for f in &fields {
            let n = f.len() as f64;
            let mean = f.sum() / n;
            let var = f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
    }

    fn simple_catchment(n_pix: usize) -> CatchmentWeights {
        // facility 0 near everything, facility 1 further away
        let tt = Array2::from_shape_fn((n_pix, 2), |(i, j)| {
            10.0 + 5.0 * (i % 7) as f64 + 60.0 * j as f64
        });
        catchment_weights(&tt, &[1.0, 1.0], 200.0).unwrap()
    }

    #[test]
    fn incidence_poisson_mean_matches_closed_form() {
        let (nr, nc) = (6, 6);
        let n_pix = nr * nc;
        let pop = Raster::constant(nr, nc, 50.0, 1.0);
        let tsp = vec![1.0; n_pix];
        let catchment = simple_catchment(n_pix);
        let months = 40;
        let data = simulate_incidence(
            &[],
            &[],
            (0.001f64).ln(),
            months,
            0,
            None,
            &catchment,
            &pop,
            &tsp,
            11,
        );
        // expected total per month: sum_i lambda * pop = 36 * 50 * 0.001 = 1.8
        let expect = 1.8;
        let total: u64 = data.counts.iter().sum();
        let mean = total as f64 / months as f64;
        let se = (expect / months as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * se + 0.2,
            "mean {mean} expect {expect}"
        );
        assert_eq!(data.clipped, 0);
    }

    #[test]
    fn zero_population_gives_zero_counts() {
        let (nr, nc) = (4, 4);
        let pop = Raster::constant(nr, nc, 0.0, 1.0);
        let tsp = vec![1.0; nr * nc];
        let catchment = simple_catchment(nr * nc);
        let data = simulate_incidence(
            &[],
            &[],
            0.0,
            6,
            0,
            None,
            &catchment,
            &pop,
            &tsp,
            12,
        );
        assert_eq!(data.counts.iter().sum::<u64>(), 0);
    }

    #[test]
    fn doubling_population_doubles_expected_totals() {
        let (nr, nc) = (6, 6);
        let n_pix = nr * nc;
        let tsp = vec![0.5; n_pix];
        let catchment = simple_catchment(n_pix);
        let months = 60;
        let run = |pop_val: f64, seed: u64| -> f64 {
            let pop = Raster::constant(nr, nc, pop_val, 1.0);
            let data = simulate_incidence(
                &[],
                &[],
                (0.01f64).ln(),
                months,
                0,
                None,
                &catchment,
                &pop,
                &tsp,
                seed,
            );
            data.counts.iter().sum::<u64>() as f64 / months as f64
        };
        let base: f64 = (0..5).map(|s| run(40.0, 100 + s)).sum::<f64>() / 5.0;
        let double: f64 = (0..5).map(|s| run(80.0, 200 + s)).sum::<f64>() / 5.0;
        let ratio = double / base;
        assert!((ratio - 2.0).abs() < 0.25, "ratio {ratio}");
    }

    #[test]
    fn incidence_is_reproducible_bit_exact() {
        let dag = random_dag(2, 0.5, 21);
        let specs = vec![node(false, 1.0, vec![]); 2];
        let fields = simulate_fields(
            &dag,
            &specs,
            (5, 5),
            8,
            &NoiseParams {
                spatial_radius: 1,
                temporal_corr: 0.5,
                fine_fraction: 0.0,
            },
            22,
        );
        let parents = vec![ResponseParent {
            var: 0,
            lag: 2,
            coef: 0.8,
            link: Link::Linear,
        }];
        let pop = Raster::constant(5, 5, 100.0, 1.0);
        let tsp = vec![0.4; 25];
        let catchment = simple_catchment(25);
        let a = simulate_incidence(
            &fields, &parents, -4.0, 6, 2, None, &catchment, &pop, &tsp, 23,
        );
        let b = simulate_incidence(
            &fields, &parents, -4.0, 6, 2, None, &catchment, &pop, &tsp, 23,
        );
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.lambda, b.lambda);
    }

    #[test]
    fn extreme_rates_are_clipped() {
        let pop = Raster::constant(3, 3, 1.0, 1.0);
        let tsp = vec![1.0; 9];
        let catchment = simple_catchment(9);
        let data = simulate_incidence(
            &[], &[], 25.0, 1, 0, None, &catchment, &pop, &tsp, 31,
        );
        assert_eq!(data.clipped, 9);
        assert!(data.lambda.iter().all(|l| *l <= (20.0f64).exp()));
    }
}
