//! Limited-memory BFGS with a strong Wolfe line search.
//!
//! Small, dependency-free quasi-Newton driver for the trajectory
//! optimizer. The objective closure fills the gradient in place and
//! returns the cost; non-finite costs are treated as out-of-domain points
//! the line search must back away from.

use nalgebra::DVector;
use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    /// Number of curvature pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the Euclidean gradient norm falls below this.
    pub grad_tol: f64,
    /// Armijo (sufficient decrease) constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_iters: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { memory: 8, max_iters: 300, grad_tol: 1e-5, c1: 1e-4, c2: 0.9, max_line_iters: 30 }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub cost: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// True when the gradient tolerance was reached (as opposed to the
    /// iteration cap or a stalled line search).
    pub converged: bool,
}

struct Pair {
    s: DVector<f64>,
    y: DVector<f64>,
    rho: f64,
}

/// Minimizes `eval`, which writes the gradient at `x` into its second
/// argument and returns the cost.
pub fn minimize<F>(mut eval: F, x0: DVector<f64>, cfg: &LbfgsConfig) -> LbfgsOutcome
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = DVector::zeros(n);
    let mut f = eval(&x, &mut g);
    let mut pairs: VecDeque<Pair> = VecDeque::new();
    let mut iterations = 0usize;

    for iter in 0..cfg.max_iters {
        iterations = iter;
        let g_norm = g.norm();
        if !f.is_finite() || g_norm < cfg.grad_tol {
            return LbfgsOutcome {
                x,
                cost: f,
                grad_norm: g_norm,
                iterations,
                converged: f.is_finite() && g_norm < cfg.grad_tol,
            };
        }

        let mut d = two_loop(&g, &pairs);
        let mut slope = d.dot(&g);
        if slope >= -1e-14 * d.norm() * g_norm {
            // Not a descent direction; fall back to steepest descent.
            pairs.clear();
            d = -&g;
            slope = d.dot(&g);
        }
        let alpha0 = if pairs.is_empty() { (1.0 / g_norm).min(1.0) } else { 1.0 };

        match wolfe_search(&mut eval, &x, f, &d, slope, alpha0, cfg) {
            Some(step) => {
                let s = &step.x - &x;
                let y = &step.g - &g;
                let sy = s.dot(&y);
                if sy > 1e-10 * s.norm() * y.norm() {
                    if pairs.len() == cfg.memory {
                        pairs.pop_front();
                    }
                    pairs.push_back(Pair { rho: 1.0 / sy, s, y });
                }
                x = step.x;
                f = step.f;
                g = step.g;
            }
            None => {
                // The line search could not make progress along this
                // direction; give up rather than loop.
                break;
            }
        }
    }
    let g_norm = g.norm();
    LbfgsOutcome { x, cost: f, grad_norm: g_norm, iterations, converged: g_norm < cfg.grad_tol }
}

/// Two-loop recursion computing -H*g with the usual scaled identity seed.
fn two_loop(g: &DVector<f64>, pairs: &VecDeque<Pair>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * p.s.dot(&q);
        q.axpy(-a, &p.y, 1.0);
        alphas.push(a);
    }
    if let Some(last) = pairs.back() {
        let gamma = last.s.dot(&last.y) / last.y.dot(&last.y);
        q *= gamma;
    }
    for (p, a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = p.rho * p.y.dot(&q);
        q.axpy(*a - b, &p.s, 1.0);
    }
    -q
}

struct StepResult {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

/// Strong Wolfe line search: bracketing walk followed by bisection zoom.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    eval: &mut F,
    x: &DVector<f64>,
    f0: f64,
    d: &DVector<f64>,
    slope0: f64,
    alpha0: f64,
    cfg: &LbfgsConfig,
) -> Option<StepResult>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let n = x.len();
    let mut probe = |alpha: f64, g_out: &mut DVector<f64>| -> (f64, DVector<f64>) {
        let xa = x + d * alpha;
        let fa = eval(&xa, g_out);
        (fa, xa)
    };

    let mut g_a = DVector::zeros(n);
    let mut alpha_prev = 0.0f64;
    let mut f_prev = f0;
    let mut alpha = alpha0.max(1e-16);
    let mut lo = 0.0f64;
    let mut f_lo = f0;
    let mut x_lo: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut hi = 0.0f64;
    let mut bracketed = false;

    for i in 0..cfg.max_line_iters {
        let (fa, xa) = probe(alpha, &mut g_a);
        let dphi = g_a.dot(d);
        let armijo = fa.is_finite() && fa <= f0 + cfg.c1 * alpha * slope0;
        if !armijo || (i > 0 && fa >= f_prev) {
            lo = alpha_prev;
            f_lo = f_prev;
            hi = alpha;
            bracketed = true;
            break;
        }
        if dphi.abs() <= -cfg.c2 * slope0 {
            return Some(StepResult { x: xa, f: fa, g: g_a });
        }
        if dphi >= 0.0 {
            lo = alpha;
            f_lo = fa;
            x_lo = Some((xa, g_a.clone()));
            hi = alpha_prev;
            bracketed = true;
            break;
        }
        alpha_prev = alpha;
        f_prev = fa;
        x_lo = Some((xa, g_a.clone()));
        lo = alpha;
        f_lo = fa;
        alpha = (alpha * 2.0).min(1e6);
    }
    if !bracketed {
        // Ran out of expansion steps while every point kept satisfying
        // Armijo with a steep slope; accept the best point seen.
        return x_lo.map(|(xa, ga)| StepResult { x: xa, f: f_lo, g: ga });
    }

    // Zoom by bisection, keeping the Wolfe bracket invariants.
    for _ in 0..40 {
        let alpha_m = 0.5 * (lo + hi);
        if (hi - lo).abs() < 1e-14 {
            break;
        }
        let (fa, xa) = probe(alpha_m, &mut g_a);
        let dphi = g_a.dot(d);
        let armijo = fa.is_finite() && fa <= f0 + cfg.c1 * alpha_m * slope0;
        if !armijo || fa >= f_lo {
            hi = alpha_m;
        } else {
            if dphi.abs() <= -cfg.c2 * slope0 {
                return Some(StepResult { x: xa, f: fa, g: g_a });
            }
            if dphi * (hi - lo) >= 0.0 {
                hi = lo;
            }
            lo = alpha_m;
            f_lo = fa;
            x_lo = Some((xa, g_a.clone()));
        }
    }
    // No point met the curvature condition; fall back to the best
    // sufficient-decrease point if one exists.
    match x_lo {
        Some((xa, ga)) if f_lo < f0 => Some(StepResult { x: xa, f: f_lo, g: ga }),
        _ => None,
    }
}
