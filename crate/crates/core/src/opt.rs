//! Unconstrained minimizers: limited-memory BFGS with Armijo backtracking
//! for the penalized likelihoods, golden-section for scalars, and a small
//! Nelder-Mead for low-dimensional hyperparameter searches.

use ndarray::prelude::*;

#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Convergence threshold on the gradient L2 norm.
    pub grad_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Array1<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `f` from `x0`. The closure fills the gradient and returns the
/// value; non-finite values are treated as line-search failures.
pub fn lbfgs<F>(mut f: F, x0: Array1<f64>, cfg: &LbfgsConfig) -> LbfgsResult
where
    F: FnMut(&Array1<f64>, &mut Array1<f64>) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut grad = Array1::zeros(n);
    let mut value = f(&x, &mut grad);
    assert!(value.is_finite(), "objective not finite at the start point");

    let mut s_hist: Vec<Array1<f64>> = Vec::new();
    let mut y_hist: Vec<Array1<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut best = LbfgsResult {
        x: x.clone(),
        value,
        grad_norm: norm2(&grad),
        iterations: 0,
        converged: false,
    };

    for iter in 0..cfg.max_iters {
        let gnorm = norm2(&grad);
        if gnorm < best.grad_norm || value < best.value {
            best.x = x.clone();
            best.value = value;
            best.grad_norm = gnorm;
            best.iterations = iter;
        }
        if gnorm <= cfg.grad_tol {
            best.converged = true;
            return best;
        }

        // two-loop recursion
        let mut direction = grad.clone();
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            alphas[i] = rho_hist[i] * s_hist[i].dot(&direction);
            direction.scaled_add(-alphas[i], &y_hist[i]);
        }
        if k > 0 {
            let scale = s_hist[k - 1].dot(&y_hist[k - 1]) / y_hist[k - 1].dot(&y_hist[k - 1]);
            direction *= scale;
        }
        for i in 0..k {
            let beta = rho_hist[i] * y_hist[i].dot(&direction);
            direction.scaled_add(alphas[i] - beta, &s_hist[i]);
        }
        direction.mapv_inplace(|v| -v);

        let mut dir_deriv = grad.dot(&direction);
        if dir_deriv >= 0.0 {
            // not a descent direction: restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            direction = grad.mapv(|v| -v);
            dir_deriv = grad.dot(&direction);
        }

        // Armijo backtracking
        let c1 = 1e-4;
        let mut step = 1.0;
        let mut new_x;
        let mut new_grad = Array1::zeros(n);
        let mut new_value;
        let mut ok = false;
        for _ in 0..50 {
            new_x = &x + &(&direction * step);
            new_value = f(&new_x, &mut new_grad);
            if new_value.is_finite() && new_value <= value + c1 * step * dir_deriv {
                let s = &new_x - &x;
                let y = &new_grad - &grad;
                let sy = s.dot(&y);
                if sy > 1e-10 * norm2(&s) * norm2(&y) {
                    if s_hist.len() == cfg.memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho_hist.remove(0);
                    }
                    rho_hist.push(1.0 / sy);
                    s_hist.push(s);
                    y_hist.push(y);
                }
                x = new_x;
                grad = new_grad.clone();
                value = new_value;
                ok = true;
                break;
            }
            step *= 0.5;
        }
        if !ok {
            break; // line search failed even at tiny steps
        }
    }

    let gnorm = norm2(&grad);
    if gnorm < best.grad_norm || value < best.value {
        best.x = x;
        best.value = value;
        best.grad_norm = gnorm;
    }
    best.converged = best.grad_norm <= cfg.grad_tol;
    best
}

fn norm2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Golden-section minimization of a unimodal scalar function on `[lo, hi]`.
pub fn golden_section<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    iters: usize,
) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Nelder-Mead on a handful of parameters. Returns `(x, value)`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    initial_step: f64,
    max_iters: usize,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += initial_step;
        let v = f(&p);
        simplex.push((p, v));
    }

    for _ in 0..max_iters {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if (worst - best).abs() <= 1e-10 * (1.0 + best.abs()) {
            break;
        }
        // centroid of all but the worst
        let mut centroid = vec![0.0; n];
        for (p, _) in simplex.iter().take(n) {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let worst_point = simplex[n].0.clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst_point)
            .map(|(c, w)| c + (c - w))
            .collect();
        let fr = f(&reflect);
        if fr < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst_point)
                .map(|(c, w)| c + 2.0 * (c - w))
                .collect();
            let fe = f(&expand);
            simplex[n] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflect, fr);
        } else {
            let contract: Vec<f64> = centroid
                .iter()
                .zip(&worst_point)
                .map(|(c, w)| c + 0.5 * (w - c))
                .collect();
            let fc = f(&contract);
            if fc < simplex[n].1 {
                simplex[n] = (contract, fc);
            } else {
                // shrink toward the best
                let best_point = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let shrunk: Vec<f64> = best_point
                        .iter()
                        .zip(&entry.0)
                        .map(|(b, p)| b + 0.5 * (p - b))
                        .collect();
                    let v = f(&shrunk);
                    *entry = (shrunk, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    simplex.swap_remove(0)
}
