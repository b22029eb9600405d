//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when the gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the objective changes by less than `f_tol · (1 + |f|)`.
    pub f_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            memory: 10,
            grad_tol: 1e-6,
            f_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the value. Non-finite values are treated as infeasible and
/// backtracked away from.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> OptimResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if n == 0 || !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return OptimResult {
            x,
            f: fx,
            iterations: 0,
            converged: n == 0,
        };
    }
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut d = vec![0.0; n];
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let mut alpha_buf = vec![0.0; opts.memory];

    for iter in 0..opts.max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.grad_tol {
            return OptimResult { x, f: fx, iterations: iter, converged: true };
        }
        // Two-loop recursion for d = -H g.
        d.copy_from_slice(&g);
        for (k, (s, y, rho)) in hist.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alpha_buf[k] = a;
            for i in 0..n {
                d[i] -= a * y[i];
            }
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let gnorm = dot(&g, &g).sqrt();
            d.iter_mut().for_each(|v| *v /= gnorm.max(1.0));
        }
        for (k, (s, y, rho)) in hist.iter().enumerate() {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += s[i] * (alpha_buf[k] - b);
            }
        }
        d.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // Not a descent direction: reset to steepest descent.
            hist.clear();
            let gnorm = dot(&g, &g).sqrt();
            for i in 0..n {
                d[i] = -g[i] / gnorm.max(1.0);
            }
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                xn[i] = x[i] + step * d[i];
            }
            let fnew = f(&xn, &mut gn);
            if fnew.is_finite() && gn.iter().all(|v| v.is_finite()) && fnew <= fx + 1e-4 * step * slope {
                accepted = true;
                let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
                let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    if hist.len() == opts.memory {
                        hist.pop_front();
                    }
                    hist.push_back((s, y, 1.0 / sy));
                }
                let df = fx - fnew;
                x.copy_from_slice(&xn);
                g.copy_from_slice(&gn);
                fx = fnew;
                if df.abs() <= opts.f_tol * (1.0 + fx.abs()) {
                    return OptimResult { x, f: fx, iterations: iter + 1, converged: true };
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No progress along d; the current point is as good as we can do.
            let converged = g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.grad_tol.sqrt();
            return OptimResult { x, f: fx, iterations: iter, converged };
        }
    }
    OptimResult {
        x,
        f: fx,
        iterations: opts.max_iter,
        converged: false,
    }
}

/// Central finite-difference gradient with step `h · max(1, |x_i|)`.
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64, grad: &mut [f64])
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
}
