//! Limited-memory BFGS with a diagonal preconditioner and Armijo backtracking.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when `max |g_i| < grad_tol`.
    pub grad_tol: f64,
    /// Stop when `f` improved by less than `stall_tol * |f|` over the last
    /// `stall_iters` iterations.
    pub stall_tol: f64,
    pub stall_iters: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 20,
            max_iter: 20_000,
            grad_tol: 1e-10,
            stall_tol: 1e-9,
            stall_iters: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    GradientTolerance,
    Stalled,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_max: f64,
    pub iterations: usize,
    pub status: LbfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimize `eval(x) -> Option<(f, grad)>`; `None` marks an invalid point and
/// shortens the step. `precond(x)` returns a positive diagonal approximation of
/// the Hessian; it is refreshed whenever the memory is reset. No step moves
/// `x_i` by more than `step_cap[i]`. `observe(iteration, f, max|g|)` is called
/// after every accepted step.
pub fn minimize<E, P, C>(
    mut eval: E,
    mut precond: P,
    x0: Vec<f64>,
    step_cap: &[f64],
    opts: &LbfgsOptions,
    mut observe: C,
) -> Option<LbfgsOutcome>
where
    E: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    P: FnMut(&[f64]) -> Vec<f64>,
    C: FnMut(usize, f64, f64),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = eval(&x)?;
    let mut diag = precond(&x);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(opts.stall_iters + 1);
    let mut iterations = 0;
    let mut status = LbfgsStatus::MaxIterations;
    let mut gamma = 1.0;

    while iterations < opts.max_iter {
        if max_abs(&g) < opts.grad_tol {
            status = LbfgsStatus::GradientTolerance;
            break;
        }
        iterations += 1;

        // two-loop recursion with H0 = gamma * diag^-1
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        for i in 0..n {
            q[i] *= gamma / diag[i];
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                q[i] += (a - b) * s[i];
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            hist.clear();
            diag = precond(&x);
            gamma = 1.0;
            dir = g.iter().zip(&diag).map(|(gi, di)| -gi / di).collect();
            slope = dot(&g, &dir);
            if !(slope < 0.0) {
                status = LbfgsStatus::LineSearchFailed;
                break;
            }
        }

        // largest step keeping every |step * dir_i| <= step_cap_i
        let mut step: f64 = 1.0;
        for (d, c) in dir.iter().zip(step_cap) {
            if d.abs() * step > *c {
                step = c / d.abs();
            }
        }
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            if let Some((ft, gt)) = eval(&trial) {
                if ft <= fx + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if hist.is_empty() {
                status = LbfgsStatus::LineSearchFailed;
                break;
            }
            hist.clear();
            diag = precond(&x);
            gamma = 1.0;
            continue;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            let ydy: f64 = y.iter().zip(&diag).map(|(yi, di)| yi * yi / di).sum();
            gamma = sy / ydy;
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }

        x = xn;
        fx = fnew;
        g = gn;
        observe(iterations, fx, max_abs(&g));
        recent.push_back(fx);
        if recent.len() > opts.stall_iters {
            let old = recent.pop_front().expect("non-empty window");
            if old - fx <= opts.stall_tol * fx.abs() {
                status = LbfgsStatus::Stalled;
                break;
            }
        }
    }
    let grad_max = max_abs(&g);
    Some(LbfgsOutcome {
        x,
        value: fx,
        grad_max,
        iterations,
        status,
    })
}
