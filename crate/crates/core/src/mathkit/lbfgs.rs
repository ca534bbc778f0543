//! Limited-memory BFGS with an Armijo backtracking line search.
//!
//! Objectives are closures `f(theta, grad) -> value` that write the gradient
//! into `grad` and return the value at `theta`.

use std::collections::VecDeque;

use super::matrix::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsParams {
    pub max_iters: usize,
    /// Number of stored (s, y) correction pairs.
    pub memory: usize,
    /// Stop once the gradient L2 norm drops to this value.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor applied after a rejected trial.
    pub backtrack: f64,
    /// Rejected trials tolerated in one line search before giving up.
    pub max_linesearch: usize,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            max_iters: 200,
            memory: 10,
            grad_tol: 1e-6,
            c1: 1e-4,
            backtrack: 0.5,
            max_linesearch: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub theta: Vec<f64>,
    pub value: f64,
    /// Accepted iterations.
    pub iters: usize,
    pub converged: bool,
    /// The line search failed even along steepest descent; `theta` is the
    /// best point found.
    pub degraded: bool,
    /// Objective at the start point followed by the value after each accepted step.
    pub history: Vec<f64>,
}

pub fn lbfgs_minimize<F>(mut f: F, theta0: &[f64], params: &LbfgsParams) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = theta0.len();
    let mut x = theta0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut history = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(params.memory);

    let mut iters = 0;
    let mut degraded = false;
    let mut converged = dot(&g, &g).sqrt() <= params.grad_tol;

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    while !converged && iters < params.max_iters {
        let mut used_memory = !pairs.is_empty();
        let mut dir = two_loop(&g, &pairs);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            pairs.clear();
            used_memory = false;
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let accepted = loop {
            let step0 = if used_memory {
                1.0
            } else {
                (1.0 / dot(&g, &g).sqrt()).min(1.0)
            };
            match line_search(&mut f, &x, fx, &dir, slope, step0, params, &mut x_new, &mut g_new) {
                Some(f_new) => break Some(f_new),
                None if used_memory => {
                    // retry once along steepest descent with fresh memory
                    pairs.clear();
                    used_memory = false;
                    dir = g.iter().map(|v| -v).collect();
                    slope = -dot(&g, &g);
                }
                None => break None,
            }
        };

        let Some(f_new) = accepted else {
            degraded = true;
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) && sy > 0.0 {
            if pairs.len() == params.memory.max(1) {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }

        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        iters += 1;
        history.push(fx);
        converged = dot(&g, &g).sqrt() <= params.grad_tol;
    }

    LbfgsResult {
        theta: x,
        value: fx,
        iters,
        converged,
        degraded,
        history,
    }
}

/// Returns `H * (-g)` using the stored correction pairs.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}

#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    dir: &[f64],
    slope: f64,
    step0: f64,
    params: &LbfgsParams,
    x_new: &mut [f64],
    g_new: &mut [f64],
) -> Option<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut step = step0;
    for _ in 0..params.max_linesearch {
        for ((xn, xi), di) in x_new.iter_mut().zip(x).zip(dir) {
            *xn = xi + step * di;
        }
        let f_new = f(x_new, g_new);
        if f_new.is_finite() && f_new <= fx + params.c1 * step * slope {
            return Some(f_new);
        }
        step *= params.backtrack;
    }
    None
}

/// Largest per-coordinate relative error between the analytic gradient and
/// central finite differences, `|g_fd - g| / max(1, |g_fd|, |g|)`.
pub fn check_gradient<F>(mut f: F, theta: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = theta.len();
    let mut g = vec![0.0; n];
    f(theta, &mut g);
    let mut scratch = vec![0.0; n];
    let mut x = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x, &mut scratch);
        x[i] = orig - eps;
        let fm = f(&x, &mut scratch);
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let err = (fd - g[i]).abs() / 1f64.max(fd.abs()).max(g[i].abs());
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shifted_quadratic(t: &[f64], g: &mut [f64]) -> f64 {
        g[0] = 2.0 * (t[0] - 1.0);
        g[1] = 2.0 * (t[1] - 2.0);
        (t[0] - 1.0).powi(2) + (t[1] - 2.0).powi(2)
    }

    fn rosenbrock(t: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (t[0], t[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn quadratic_optimum() {
        let r = lbfgs_minimize(shifted_quadratic, &[0.0, 0.0], &LbfgsParams::default());
        assert!((r.theta[0] - 1.0).abs() < 1e-6 && (r.theta[1] - 2.0).abs() < 1e-6);
        assert!(r.converged);
    }

    #[test]
    fn rosenbrock_from_classic_start() {
        // The reference minimum (1, 1) is also reached by a long plain
        // gradient-descent run; see `rosenbrock_gradient_descent_oracle`.
        let params = LbfgsParams {
            max_iters: 2000,
            grad_tol: 1e-10,
            ..Default::default()
        };
        let r = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &params);
        assert!((r.theta[0] - 1.0).abs() < 1e-4, "{:?}", r.theta);
        assert!((r.theta[1] - 1.0).abs() < 1e-4, "{:?}", r.theta);
    }

    #[test]
    fn rosenbrock_gradient_descent_oracle() {
        let mut t = [-1.2, 1.0];
        let mut g = [0.0; 2];
        for _ in 0..2_000_000 {
            rosenbrock(&t, &mut g);
            t[0] -= 1e-3 * g[0];
            t[1] -= 1e-3 * g[1];
        }
        assert!((t[0] - 1.0).abs() < 1e-4 && (t[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn optimal_start_takes_no_steps() {
        let r = lbfgs_minimize(shifted_quadratic, &[1.0, 2.0], &LbfgsParams::default());
        assert!(r.iters <= 1);
        assert_eq!(r.theta, vec![1.0, 2.0]);
    }

    #[test]
    fn history_is_monotone() {
        let params = LbfgsParams {
            max_iters: 300,
            ..Default::default()
        };
        let r = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &params);
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn zero_budget_returns_start() {
        let params = LbfgsParams {
            max_iters: 0,
            ..Default::default()
        };
        let r = lbfgs_minimize(shifted_quadratic, &[5.0, 5.0], &params);
        assert_eq!(r.theta, vec![5.0, 5.0]);
        assert_eq!(r.iters, 0);
    }

    #[test]
    fn broken_objective_is_flagged_degraded() {
        // gradient points the wrong way, so no descent step exists
        let f = |t: &[f64], g: &mut [f64]| {
            g[0] = -2.0 * t[0];
            t[0] * t[0]
        };
        let r = lbfgs_minimize(f, &[1.0], &LbfgsParams::default());
        assert!(r.degraded);
        assert_eq!(r.theta, vec![1.0]);
    }

    #[test]
    fn gradient_check_cases() {
        let e = check_gradient(shifted_quadratic, &[0.3, -0.7], 1e-5);
        assert!(e <= 1e-7, "{e}");

        // gradient doubled: g = 2 g_true, error = |g_fd - 2 g_fd| / (2|g_fd|) = 0.5
        let wrong = |t: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * 2.0 * (t[0] - 1.0);
            (t[0] - 1.0).powi(2)
        };
        let e = check_gradient(wrong, &[4.0], 1e-5);
        assert!((e - 0.5).abs() < 1e-6, "{e}");

        let abs = |t: &[f64], g: &mut [f64]| {
            g[0] = t[0].signum();
            t[0].abs()
        };
        assert!(check_gradient(abs, &[1.0], 1e-5) <= 1e-6);
    }
}
