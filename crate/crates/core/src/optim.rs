//! Small-dimensional minimizers used by the estimators and the law samplers.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexSettings {
    /// Stop once the spread of objective values across the simplex is below this.
    pub f_tol: f64,
    /// ... and every vertex lies within this distance (max-norm) of the best one.
    pub x_tol: f64,
    pub max_iter: usize,
}

impl Default for SimplexSettings {
    fn default() -> Self {
        Self {
            f_tol: 1e-10,
            x_tol: 1e-8,
            max_iter: 5000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Nelder-Mead simplex minimization with the standard coefficients
/// (reflection 1, expansion 2, contraction 1/2, shrink 1/2).
///
/// `step[i]` is the offset of the i-th initial vertex along coordinate `i`.
/// Non-finite objective values are treated as `+inf`.
pub fn nelder_mead<F>(f: F, x0: &[f64], step: &[f64], settings: SimplexSettings) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let dim = x0.len();
    assert_eq!(dim, step.len());
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(x0.to_vec());
    for i in 0..dim {
        let mut v = x0.to_vec();
        v[i] += step[i];
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();
    let mut evaluations = dim + 1;
    let mut order: Vec<usize> = (0..=dim).collect();
    let mut centroid = vec![0.0; dim];
    let mut trial = vec![0.0; dim];
    let mut trial2 = vec![0.0; dim];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < settings.max_iter {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[dim];
        let second = order[dim - 1];

        let spread = values[worst] - values[best];
        let size = simplex
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[best]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread.abs() <= settings.f_tol && size <= settings.x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &idx in &order[..dim] {
            for (c, x) in centroid.iter_mut().zip(&simplex[idx]) {
                *c += x;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= dim as f64);

        for j in 0..dim {
            trial[j] = centroid[j] + (centroid[j] - simplex[worst][j]);
        }
        let f_reflect = eval(&trial);
        evaluations += 1;

        if f_reflect < values[best] {
            for j in 0..dim {
                trial2[j] = centroid[j] + 2.0 * (centroid[j] - simplex[worst][j]);
            }
            let f_expand = eval(&trial2);
            evaluations += 1;
            if f_expand < f_reflect {
                simplex[worst].copy_from_slice(&trial2);
                values[worst] = f_expand;
            } else {
                simplex[worst].copy_from_slice(&trial);
                values[worst] = f_reflect;
            }
            continue;
        }
        if f_reflect < values[second] {
            simplex[worst].copy_from_slice(&trial);
            values[worst] = f_reflect;
            continue;
        }
        // Contraction, outside if the reflection helped at all.
        let outside = f_reflect < values[worst];
        for j in 0..dim {
            trial2[j] = if outside {
                centroid[j] + 0.5 * (trial[j] - centroid[j])
            } else {
                centroid[j] + 0.5 * (simplex[worst][j] - centroid[j])
            };
        }
        let f_contract = eval(&trial2);
        evaluations += 1;
        let accept = if outside {
            f_contract <= f_reflect
        } else {
            f_contract < values[worst]
        };
        if accept {
            simplex[worst].copy_from_slice(&trial2);
            values[worst] = f_contract;
            continue;
        }
        let anchor = simplex[best].clone();
        for &idx in &order[1..] {
            for (x, a) in simplex[idx].iter_mut().zip(&anchor) {
                *x = a + 0.5 * (*x - a);
            }
            values[idx] = eval(&simplex[idx]);
        }
        evaluations += dim;
    }

    let best = (0..=dim)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("simplex is non-empty");
    Minimum {
        x: simplex.swap_remove(best),
        f: values[best],
        iterations,
        evaluations,
        converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuasiNewtonSettings {
    pub grad_tol: f64,
    /// Stop once an accepted step improves the objective by less than this.
    pub f_tol: f64,
    pub max_iter: usize,
}

impl Default for QuasiNewtonSettings {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            f_tol: 1e-13,
            max_iter: 200,
        }
    }
}

/// BFGS with an Armijo backtracking line search.
///
/// `fg` returns the objective and writes its gradient into the slice.
pub fn bfgs<F>(fg: F, x0: &[f64], settings: QuasiNewtonSettings) -> Minimum
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    let dim = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; dim];
    let mut fx = fg(&x, &mut g);
    let mut evaluations = 1;
    let mut inv_h: Vec<f64> = (0..dim * dim)
        .map(|k| if k % (dim + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    let mut dir = vec![0.0; dim];
    let mut x_new = vec![0.0; dim];
    let mut g_new = vec![0.0; dim];
    let mut converged = false;
    let mut iterations = 0;

    if !fx.is_finite() {
        return Minimum { x, f: f64::INFINITY, iterations, evaluations, converged };
    }

    while iterations < settings.max_iter {
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm <= settings.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        for i in 0..dim {
            dir[i] = -(0..dim).map(|j| inv_h[i * dim + j] * g[j]).sum::<f64>();
        }
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, g)| d * g).sum();
        if slope >= 0.0 {
            // Lost descent; restart from steepest descent.
            for (k, h) in inv_h.iter_mut().enumerate() {
                *h = if k % (dim + 1) == 0 { 1.0 } else { 0.0 };
            }
            for i in 0..dim {
                dir[i] = -g[i];
            }
            slope = -g.iter().map(|v| v * v).sum::<f64>();
        }
        let mut step = 1.0;
        let mut f_new;
        loop {
            for i in 0..dim {
                x_new[i] = x[i] + step * dir[i];
            }
            f_new = fg(&x_new, &mut g_new);
            evaluations += 1;
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
        if !(f_new.is_finite() && f_new <= fx) {
            // No progress possible along any tried step: treat as stationary
            // at working precision.
            converged = gnorm <= settings.grad_tol.sqrt();
            break;
        }
        let s: Vec<f64> = (0..dim).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..dim).map(|i| g_new[i] - g[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let improvement = fx - f_new;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        if sy > 1e-300 {
            if iterations == 1 {
                // Rescale the identity guess to the observed curvature.
                let yy: f64 = y.iter().map(|v| v * v).sum();
                let scale = sy / yy;
                inv_h.iter_mut().for_each(|h| *h *= scale);
            }
            let hy: Vec<f64> = (0..dim)
                .map(|i| (0..dim).map(|j| inv_h[i * dim + j] * y[j]).sum())
                .collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let rho = 1.0 / sy;
            for i in 0..dim {
                for j in 0..dim {
                    inv_h[i * dim + j] += (1.0 + yhy * rho) * rho * s[i] * s[j]
                        - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        if improvement <= settings.f_tol {
            converged = g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= settings.grad_tol.sqrt();
            break;
        }
    }
    Minimum {
        x,
        f: fx,
        iterations,
        evaluations,
        converged,
    }
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Root of a nondecreasing function on `[lo, hi]` by bisection; requires
/// `f(lo) <= 0 <= f(hi)`.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, x_tol: f64) -> f64 {
    while hi - lo > x_tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
