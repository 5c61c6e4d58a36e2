//! Projected limited-memory quasi-Newton minimization over a box.
//!
//! Shared by the OCP solver (inputs live in `[u_min, u_max]^N`) and the GP
//! hyperparameter fit (log-hyperparameters live in a wide box). Objective and
//! gradient callbacks return `None` where the objective is undefined
//! (e.g. a diverged rollout or a failed factorization); the line search
//! treats such points as `+∞`.

/// Search direction memory, line-search and stopping parameters.
#[derive(Debug, Clone)]
pub struct PqnOptions {
    /// Stop when the projected-gradient max-norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of curvature pairs kept for the L-BFGS direction.
    pub memory: usize,
    /// Sufficient-decrease constant of the weak-Wolfe line search.
    pub armijo_c1: f64,
    /// Curvature constant of the weak-Wolfe line search.
    pub wolfe_c2: f64,
    pub max_line_search: usize,
}

impl Default for PqnOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            memory: 10,
            armijo_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PqnStatus {
    /// Projected-gradient norm reached the tolerance.
    Converged,
    /// Iteration cap reached, or no acceptable step found.
    MaxIter,
    /// Objective or gradient undefined at the current iterate.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct PqnResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Projected-gradient max-norm at the returned point.
    pub grad_norm: f64,
    pub status: PqnStatus,
    pub iterations: usize,
    /// Objective values of the accepted iterates, starting value included.
    pub f_history: Vec<f64>,
}

fn clamp_into(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut norm: f64 = 0.0;
    for i in 0..x.len() {
        let moved = (x[i] - g[i]).clamp(lo[i], hi[i]);
        norm = norm.max((x[i] - moved).abs());
    }
    norm
}

/// Two-loop L-BFGS recursion; `pairs` holds `(s, y, 1/yᵀs)` newest last.
fn lbfgs_direction(g: &[f64], pairs: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let n = g.len();
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = vec![0.0; pairs.len()];
    for (idx, (s, y, rho)) in pairs.iter().enumerate().rev() {
        let alpha = rho * dot(s, &q);
        alphas[idx] = alpha;
        for i in 0..n {
            q[i] -= alpha * y[i];
        }
    }
    // initial Hessian scaling from the newest pair
    if let Some((s, y, _)) = pairs.last() {
        let ys = dot(y, s);
        let yy = dot(y, y);
        if yy > 0.0 && ys > 0.0 {
            let gamma = ys / yy;
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
    }
    for (idx, (s, y, rho)) in pairs.iter().enumerate() {
        let beta = rho * dot(y, &q);
        for i in 0..n {
            q[i] += (alphas[idx] - beta) * s[i];
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f` over the box `[lo, hi]` starting from `x0`.
pub fn minimize<F, G>(
    mut f: F,
    mut grad: G,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &PqnOptions,
) -> PqnResult
where
    F: FnMut(&[f64]) -> Option<f64>,
    G: FnMut(&[f64]) -> Option<Vec<f64>>,
{
    let n = x0.len();
    debug_assert_eq!(lo.len(), n);
    debug_assert_eq!(hi.len(), n);

    let mut x = x0.to_vec();
    clamp_into(&mut x, lo, hi);

    let mut fx = match f(&x) {
        Some(v) if v.is_finite() => v,
        _ => {
            return PqnResult {
                x,
                f: f64::INFINITY,
                grad_norm: f64::INFINITY,
                status: PqnStatus::Diverged,
                iterations: 0,
                f_history: vec![],
            }
        }
    };
    let mut f_history = vec![fx];

    let mut g = match grad(&x) {
        Some(v) if v.iter().all(|c| c.is_finite()) => v,
        _ => {
            return PqnResult {
                x,
                f: fx,
                grad_norm: f64::INFINITY,
                status: PqnStatus::Diverged,
                iterations: 0,
                f_history,
            }
        }
    };

    let mut pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut iterations = 0;

    loop {
        let pg = projected_gradient_norm(&x, &g, lo, hi);
        if pg <= opts.tol {
            return PqnResult {
                x,
                f: fx,
                grad_norm: pg,
                status: PqnStatus::Converged,
                iterations,
                f_history,
            };
        }
        if iterations >= opts.max_iter {
            return PqnResult {
                x,
                f: fx,
                grad_norm: pg,
                status: PqnStatus::MaxIter,
                iterations,
                f_history,
            };
        }
        iterations += 1;

        // try the quasi-Newton direction first, fall back to steepest descent
        let mut accepted: Option<(Vec<f64>, f64, Option<Vec<f64>>)> = None;
        'directions: for attempt in 0..2 {
            let d = if attempt == 0 && !pairs.is_empty() {
                let d = lbfgs_direction(&g, &pairs);
                if dot(&d, &g) >= 0.0 {
                    continue; // not a descent direction
                }
                d
            } else {
                g.iter().map(|gi| -gi).collect()
            };
            let dg = dot(&d, &g);

            // weak-Wolfe bisection (Lewis-Overton): bracket a step that
            // decreases enough and is not too short; the curvature test is
            // skipped when the box clips the step.
            let mut alpha = 1.0;
            let mut lo_a = 0.0;
            let mut hi_a = f64::INFINITY;
            for _ in 0..opts.max_line_search {
                let mut cand: Vec<f64> = (0..n).map(|i| x[i] + alpha * d[i]).collect();
                clamp_into(&mut cand, lo, hi);
                let clipped = cand.iter().zip(0..n).any(|(c, i)| *c != x[i] + alpha * d[i]);
                let step: Vec<f64> = (0..n).map(|i| cand[i] - x[i]).collect();
                let decrease = dot(&g, &step);
                let fc = f(&cand).filter(|v| v.is_finite());
                let sufficient =
                    decrease < 0.0 && fc.is_some_and(|fc| fc <= fx + opts.armijo_c1 * decrease);
                if !sufficient {
                    hi_a = alpha;
                    alpha = 0.5 * (lo_a + hi_a);
                    if alpha <= f64::MIN_POSITIVE {
                        break;
                    }
                    continue;
                }
                let fc = fc.unwrap();
                if clipped {
                    accepted = Some((cand, fc, None));
                    break 'directions;
                }
                match grad(&cand) {
                    Some(gc) if gc.iter().all(|v| v.is_finite()) => {
                        if dot(&gc, &d) < opts.wolfe_c2 * dg {
                            // still descending steeply: lengthen the step
                            lo_a = alpha;
                            alpha = if hi_a.is_finite() { 0.5 * (lo_a + hi_a) } else { 2.0 * alpha };
                            continue;
                        }
                        accepted = Some((cand, fc, Some(gc)));
                    }
                    _ => {
                        // gradient undefined at an otherwise acceptable point
                        accepted = Some((cand, fc, None));
                    }
                }
                break 'directions;
            }
        }

        let Some((x_new, f_new, g_cached)) = accepted else {
            // no acceptable step along either direction
            return PqnResult {
                x,
                f: fx,
                grad_norm: pg,
                status: PqnStatus::MaxIter,
                iterations,
                f_history,
            };
        };

        let g_new = match g_cached {
            Some(gc) => gc,
            None => match grad(&x_new) {
                Some(v) if v.iter().all(|c| c.is_finite()) => v,
                _ => {
                    return PqnResult {
                        x: x_new,
                        f: f_new,
                        grad_norm: f64::INFINITY,
                        status: PqnStatus::Diverged,
                        iterations,
                        f_history,
                    }
                }
            },
        };

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let ys = dot(&y, &s);
        let s_norm = dot(&s, &s).sqrt();
        let y_norm = dot(&y, &y).sqrt();
        if ys > 1e-12 * s_norm * y_norm {
            if pairs.len() == opts.memory {
                pairs.remove(0);
            }
            pairs.push((s, y, 1.0 / ys));
        } else if !pairs.is_empty() {
            // flush stale memory rather than steering with outdated curvature
            pairs.remove(0);
        }

        x = x_new;
        fx = f_new;
        g = g_new;
        f_history.push(fx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_bowl_unconstrained() {
        // f(x) = Σ i (x_i − i)²
        let f = |x: &[f64]| {
            Some(
                x.iter()
                    .enumerate()
                    .map(|(i, v)| (i + 1) as f64 * (v - i as f64).powi(2))
                    .sum(),
            )
        };
        let g = |x: &[f64]| {
            Some(
                x.iter()
                    .enumerate()
                    .map(|(i, v)| 2.0 * (i + 1) as f64 * (v - i as f64))
                    .collect(),
            )
        };
        let lo = vec![-100.0; 5];
        let hi = vec![100.0; 5];
        let res = minimize(f, g, &[5.0; 5], &lo, &hi, &PqnOptions::default());
        assert_eq!(res.status, PqnStatus::Converged);
        for (i, v) in res.x.iter().enumerate() {
            assert_relative_eq!(*v, i as f64, epsilon = 1e-5);
        }
    }

    #[test]
    fn active_bounds_are_respected() {
        // minimum at (3, -7) outside the box [-1, 1]^2
        let f = |x: &[f64]| Some((x[0] - 3.0).powi(2) + (x[1] + 7.0).powi(2));
        let g = |x: &[f64]| Some(vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 7.0)]);
        let res = minimize(f, g, &[0.0, 0.0], &[-1.0, -1.0], &[1.0, 1.0], &PqnOptions::default());
        assert_eq!(res.status, PqnStatus::Converged);
        assert_relative_eq!(res.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(res.x[1], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn rosenbrock_in_box() {
        let f = |x: &[f64]| {
            Some((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        };
        let g = |x: &[f64]| {
            Some(vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ])
        };
        let opts = PqnOptions { max_iter: 500, ..PqnOptions::default() };
        let res = minimize(f, g, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &opts);
        assert_eq!(res.status, PqnStatus::Converged);
        assert_relative_eq!(res.x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(res.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn accepted_iterates_never_increase() {
        let f = |x: &[f64]| Some(x[0].powi(4) + (x[1] - 2.0).powi(2) + x[0] * x[1]);
        let g = |x: &[f64]| Some(vec![4.0 * x[0].powi(3) + x[1], 2.0 * (x[1] - 2.0) + x[0]]);
        let res = minimize(f, g, &[3.0, -3.0], &[-10.0, -10.0], &[10.0, 10.0], &PqnOptions::default());
        for w in res.f_history.windows(2) {
            assert!(w[1] <= w[0], "history not monotone: {:?}", res.f_history);
        }
    }

    #[test]
    fn undefined_start_is_diverged() {
        let f = |_: &[f64]| None;
        let g = |_: &[f64]| Some(vec![0.0]);
        let res = minimize(f, g, &[0.0], &[-1.0], &[1.0], &PqnOptions::default());
        assert_eq!(res.status, PqnStatus::Diverged);
    }

    #[test]
    fn undefined_region_is_avoided() {
        // objective undefined for x > 2; minimum inside the defined region
        let f = |x: &[f64]| {
            if x[0] > 2.0 {
                None
            } else {
                Some((x[0] - 1.0).powi(2))
            }
        };
        let g = |x: &[f64]| Some(vec![2.0 * (x[0] - 1.0)]);
        let res = minimize(f, g, &[-4.0], &[-10.0], &[10.0], &PqnOptions::default());
        assert_eq!(res.status, PqnStatus::Converged);
        assert_relative_eq!(res.x[0], 1.0, epsilon = 1e-6);
    }
}
