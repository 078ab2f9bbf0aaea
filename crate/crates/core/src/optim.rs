//! Bounded local minimizers used for likelihood fitting and acquisition
//! maximization: a projected BFGS method with Armijo backtracking, and a
//! box-clamped Nelder-Mead simplex used when the line search stagnates.

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Self { lower, upper }
    }

    pub fn unit(dim: usize) -> Self {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LocalOptions {
    pub max_evals: usize,
    /// Relative tolerance on successive objective values.
    pub f_tol: f64,
    /// Absolute tolerance on the projected gradient (infinity norm).
    pub g_tol: f64,
}

impl Default for LocalOptions {
    fn default() -> Self {
        Self {
            max_evals: 500,
            f_tol: 1e-6,
            g_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Central-difference gradient; costs `2 * dim` evaluations. Steps are
/// shrunk near bounds so every probe stays feasible.
pub fn numerical_gradient<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    bounds: &Bounds,
    h: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let hi = (bounds.upper[i] - x[i]).min(h);
        let lo = (x[i] - bounds.lower[i]).min(h);
        if hi + lo <= 0.0 {
            continue;
        }
        probe[i] = x[i] + hi;
        let fp = f(&probe);
        probe[i] = x[i] - lo;
        let fm = f(&probe);
        probe[i] = x[i];
        g[i] = (fp - fm) / (hi + lo);
    }
    g
}

fn projected_grad_norm(x: &[f64], g: &[f64], b: &Bounds) -> f64 {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (xi, gi))| {
            let stepped = (xi - gi).clamp(b.lower[i], b.upper[i]);
            (stepped - xi).abs()
        })
        .fold(0.0, f64::max)
}

/// Projected BFGS on a box. `fg` returns the value and gradient. Falls back
/// to [`nelder_mead`] with the remaining budget if the line search fails
/// to make progress before convergence.
pub fn minimize_bounded<F>(mut fg: F, x0: &[f64], bounds: &Bounds, opts: LocalOptions) -> LocalResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut f, mut g) = fg(&x);
    let mut evals = 1;
    if n == 0 {
        return LocalResult {
            x,
            f,
            evals,
            converged: true,
        };
    }
    let mut h = identity(n);
    let mut fresh_h = true;
    let mut stagnated = false;

    while evals < opts.max_evals {
        if projected_grad_norm(&x, &g, bounds) <= opts.g_tol {
            return LocalResult {
                x,
                f,
                evals,
                converged: true,
            };
        }
        // Variables pinned at a bound with the gradient pushing outward stay fixed.
        let active: Vec<bool> = (0..n)
            .map(|i| {
                (x[i] <= bounds.lower[i] && g[i] > 0.0) || (x[i] >= bounds.upper[i] && g[i] < 0.0)
            })
            .collect();
        let mut d = direction(&h, &g, &active);
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 || !slope.is_finite() {
            h = identity(n);
            fresh_h = true;
            d = direction(&h, &g, &active);
            slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if slope >= 0.0 {
                break;
            }
        }
        if fresh_h {
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if dmax > 1.0 {
                d.iter_mut().for_each(|v| *v /= dmax);
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            if evals >= opts.max_evals {
                break;
            }
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            bounds.project(&mut trial);
            let decrease: f64 = trial
                .iter()
                .zip(&x)
                .zip(&g)
                .map(|((t, xi), gi)| gi * (t - xi))
                .sum();
            if decrease >= 0.0 {
                step *= 0.5;
                continue;
            }
            let (ft, gt) = fg(&trial);
            evals += 1;
            if ft.is_finite() && ft <= f + 1e-4 * decrease {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }

        let Some((xn, fnew, gn)) = accepted else {
            if fresh_h {
                stagnated = true;
                break;
            }
            h = identity(n);
            fresh_h = true;
            continue;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let converged = (f - fnew).abs() <= opts.f_tol * (1.0 + fnew.abs());
        x = xn;
        g = gn;
        let f_prev = f;
        f = fnew;
        if converged && f_prev - f >= 0.0 {
            return LocalResult {
                x,
                f,
                evals,
                converged: true,
            };
        }
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            if fresh_h {
                // Scale the initial inverse Hessian before the first update.
                let yy: f64 = y.iter().map(|v| v * v).sum();
                let scale = sy / yy;
                for (i, row) in h.iter_mut().enumerate() {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    row[i] = scale;
                }
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh_h = false;
        }
    }

    if stagnated && evals < opts.max_evals {
        let rest = LocalOptions {
            max_evals: opts.max_evals - evals,
            ..opts
        };
        let nm = nelder_mead(|p| fg(p).0, &x, bounds, rest);
        let total = evals + nm.evals;
        if nm.f < f {
            return LocalResult {
                evals: total,
                ..nm
            };
        }
        return LocalResult {
            x,
            f,
            evals: total,
            converged: nm.converged,
        };
    }
    LocalResult {
        x,
        f,
        evals,
        converged: false,
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut r = vec![0.0; n];
            r[i] = 1.0;
            r
        })
        .collect()
}

fn direction(h: &[Vec<f64>], g: &[f64], active: &[bool]) -> Vec<f64> {
    let n = g.len();
    (0..n)
        .map(|i| {
            if active[i] {
                return 0.0;
            }
            -(0..n)
                .filter(|&j| !active[j])
                .map(|j| h[i][j] * g[j])
                .sum::<f64>()
        })
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i][j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Nelder-Mead with every vertex clamped into the box.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], bounds: &Bounds, opts: LocalOptions) -> LocalResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |p: &mut Vec<f64>, evals: &mut usize| {
        bounds.project(p);
        *evals += 1;
        let v = f(p);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut start = x0.to_vec();
    let f0 = eval(&mut start, &mut evals);
    if n == 0 {
        return LocalResult {
            x: start,
            f: f0,
            evals,
            converged: true,
        };
    }
    let mut simplex = vec![(start.clone(), f0)];
    for i in 0..n {
        let width = bounds.upper[i] - bounds.lower[i];
        let mut v = start.clone();
        let step = 0.05 * width.max(1e-8);
        v[i] = if v[i] + step <= bounds.upper[i] {
            v[i] + step
        } else {
            v[i] - step
        };
        let fv = eval(&mut v, &mut evals);
        simplex.push((v, fv));
    }

    let mut converged = false;
    while evals < opts.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if (worst - best).abs() <= opts.f_tol * (1.0 + best.abs()) {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|i| simplex[..n].iter().map(|(v, _)| v[i]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let mut r = along(-1.0);
        let fr = eval(&mut r, &mut evals);
        if fr < simplex[0].1 {
            let mut e = along(-2.0);
            let fe = eval(&mut e, &mut evals);
            simplex[n] = if fe < fr { (e, fe) } else { (r, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (r, fr);
        } else {
            let mut c = if fr < worst { along(-0.5) } else { along(0.5) };
            let fc = eval(&mut c, &mut evals);
            if fc < fr.min(worst) {
                simplex[n] = (c, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for k in 1..=n {
                    let mut v: Vec<f64> = x_best
                        .iter()
                        .zip(&simplex[k].0)
                        .map(|(b, v)| b + 0.5 * (v - b))
                        .collect();
                    let fv = eval(&mut v, &mut evals);
                    simplex[k] = (v, fv);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    LocalResult {
        x,
        f,
        evals,
        converged,
    }
}
