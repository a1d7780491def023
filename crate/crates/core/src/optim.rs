//! Quasi-Newton minimization with numeric central-difference gradients, plus
//! the numeric Hessian used for observed-information standard errors.
//!
//! All model constraints live in the parameter maps, so the optimizer works
//! on a box-free unconstrained vector. Convergence is declared on a scaled
//! gradient norm: `max_i |g_i|·max(1,|x_i|) / max(1,|f|) < grad_tol`.

use nalgebra::DMatrix;

/// Relative step for central-difference gradients.
pub const GRAD_STEP: f64 = 1e-5;
/// Relative step for the central-difference Hessian (differences of gradients).
const HESS_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    /// Scaled gradient tolerance for convergence.
    pub grad_tol: f64,
    /// Budget of objective evaluations.
    pub max_evals: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-5, max_evals: 5000 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub scaled_grad_norm: f64,
    pub evals: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Central-difference gradient of `f` at `x` with per-coordinate relative
/// steps. Returns the number of objective evaluations spent.
pub fn central_gradient<F: Fn(&[f64]) -> f64>(
    f: &F,
    x: &[f64],
    step_rel: f64,
    grad: &mut [f64],
) -> usize {
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step_rel * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = finite_or_inf(f(&xp));
        xp[i] = x[i] - h;
        let fm = finite_or_inf(f(&xp));
        xp[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    2 * x.len()
}

fn scaled_grad_norm(grad: &[f64], x: &[f64], fval: f64) -> f64 {
    let denom = fval.abs().max(1.0);
    grad.iter()
        .zip(x)
        .map(|(g, xi)| g.abs() * xi.abs().max(1.0) / denom)
        .fold(0.0, f64::max)
}

/// Minimize `f` from `x0` by BFGS with a backtracking Armijo line search.
pub fn minimize<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = finite_or_inf(f(&x));
    let mut evals = 1usize;
    let mut grad = vec![0.0; n];
    let mut iterations = 0usize;

    if !fx.is_finite() {
        return BfgsResult {
            x,
            value: fx,
            scaled_grad_norm: f64::INFINITY,
            evals,
            iterations,
            converged: false,
        };
    }

    evals += central_gradient(f, &x, GRAD_STEP, &mut grad);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut gnorm = scaled_grad_norm(&grad, &x, fx);

    while gnorm >= opts.grad_tol && evals < opts.max_evals {
        iterations += 1;
        let mut dir: Vec<f64> = (0..n)
            .map(|i| -(0..n).map(|j| h_inv[(i, j)] * grad[j]).sum::<f64>())
            .collect();
        let mut slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        if slope >= 0.0 {
            // Stale curvature; fall back to steepest descent.
            h_inv = DMatrix::identity(n, n);
            dir = grad.iter().map(|g| -g).collect();
            slope = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
            if slope >= 0.0 {
                break; // zero gradient up to rounding
            }
        }
        let Some((alpha, fnew)) = line_search(f, &x, fx, &dir, slope, &mut evals, opts.max_evals)
        else {
            break;
        };
        let xnew = x_step(&x, &dir, alpha);
        let mut grad_new = vec![0.0; n];
        evals += central_gradient(f, &xnew, GRAD_STEP, &mut grad_new);

        let s: Vec<f64> = dir.iter().map(|d| alpha * d).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let s_norm: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            // H ← (I − ρsyᵀ) H (I − ρysᵀ) + ρssᵀ
            let rho = 1.0 / sy;
            let hy: Vec<f64> =
                (0..n).map(|i| (0..n).map(|j| h_inv[(i, j)] * y[j]).sum::<f64>()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    h_inv[(i, j)] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                        + rho * rho * yhy * s[i] * s[j]
                        + rho * s[i] * s[j];
                }
            }
        }
        x = xnew;
        fx = fnew;
        grad = grad_new;
        gnorm = scaled_grad_norm(&grad, &x, fx);
    }

    BfgsResult {
        converged: gnorm < opts.grad_tol,
        scaled_grad_norm: gnorm,
        x,
        value: fx,
        evals,
        iterations,
    }
}

fn x_step(x: &[f64], dir: &[f64], alpha: f64) -> Vec<f64> {
    x.iter().zip(dir).map(|(xi, d)| xi + alpha * d).collect()
}

fn line_search<F: Fn(&[f64]) -> f64>(
    f: &F,
    x: &[f64],
    fx: f64,
    dir: &[f64],
    slope: f64,
    evals: &mut usize,
    max_evals: usize,
) -> Option<(f64, f64)> {
    const C1: f64 = 1e-4;
    let mut alpha = 1.0;
    for _ in 0..40 {
        if *evals >= max_evals {
            return None;
        }
        let fnew = finite_or_inf(f(&x_step(x, dir, alpha)));
        *evals += 1;
        if fnew <= fx + C1 * alpha * slope {
            return Some((alpha, fnew));
        }
        alpha *= 0.5;
    }
    None
}

/// Numeric Hessian: central differences of the central-difference gradient,
/// symmetrized.
pub fn numeric_hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    for i in 0..n {
        let h = HESS_STEP * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        central_gradient(f, &xp, GRAD_STEP, &mut gp);
        xp[i] = x[i] - h;
        central_gradient(f, &xp, GRAD_STEP, &mut gm);
        xp[i] = x[i];
        for j in 0..n {
            hess[(i, j)] = (gp[j] - gm[j]) / (2.0 * h);
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (hess[(i, j)] + hess[(j, i)]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}
