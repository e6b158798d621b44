//! Small dense optimizers used by the coordinate updates: a bounded-memory
//! L-BFGS with monotone backtracking, a bracketed golden-section search for
//! one-dimensional subproblems, and a proximal-gradient loop for the group
//! LASSO initializer.

use nalgebra::DVector;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsParams {
    pub memory: usize,
    /// Stop when the Euclidean gradient norm falls below this.
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        LbfgsParams {
            memory: 10,
            grad_tol: 1e-8,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iters: usize,
    pub line_search_failed: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

/// Minimize `f` starting from `x0`. The objective closure writes the
/// gradient into its second argument and returns the value. Backtracking
/// keeps every accepted iterate at least as good as the previous one, so the
/// outcome never exceeds f(x0); on a failed line search the best iterate
/// found so far is returned with the flag set.
pub fn lbfgs<F>(mut f: F, x0: DVector<f64>, params: &LbfgsParams) -> LbfgsOutcome
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let dim = x0.len();
    let mut x = x0;
    let mut grad = DVector::zeros(dim);
    let mut fx = f(&x, &mut grad);
    let mut s_hist: Vec<DVector<f64>> = Vec::with_capacity(params.memory);
    let mut y_hist: Vec<DVector<f64>> = Vec::with_capacity(params.memory);
    let mut rho_hist: Vec<f64> = Vec::with_capacity(params.memory);
    let mut line_search_failed = false;
    let mut iters = 0;

    while iters < params.max_iters {
        let gnorm = grad.norm();
        if !gnorm.is_finite() || gnorm <= params.grad_tol {
            break;
        }
        iters += 1;

        // Two-loop recursion.
        let mut dir = -grad.clone();
        let hist_len = s_hist.len();
        let mut alphas = vec![0.0; hist_len];
        for i in (0..hist_len).rev() {
            let a = rho_hist[i] * s_hist[i].dot(&dir);
            alphas[i] = a;
            dir.axpy(-a, &y_hist[i], 1.0);
        }
        if hist_len > 0 {
            let i = hist_len - 1;
            let scale = s_hist[i].dot(&y_hist[i]) / y_hist[i].norm_squared();
            dir *= scale;
        }
        for i in 0..hist_len {
            let b = rho_hist[i] * y_hist[i].dot(&dir);
            dir.axpy(alphas[i] - b, &s_hist[i], 1.0);
        }

        let mut descent = grad.dot(&dir);
        if descent.is_nan() || descent >= 0.0 {
            dir = -grad.clone();
            descent = -gnorm * gnorm;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        // Backtracking with a relaxed Armijo test; the slack keeps the
        // search from failing when the predicted decrease is below the
        // resolution of f itself.
        let mut step = if iters == 1 { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let slack = 4.0 * f64::EPSILON * (1.0 + fx.abs());
        let mut accepted = false;
        let mut x_new = DVector::zeros(dim);
        let mut g_new = DVector::zeros(dim);
        let mut f_new = fx;
        for _ in 0..MAX_BACKTRACKS {
            x_new = &x + &dir * step;
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + ARMIJO_C1 * step * descent + slack && f_new <= fx + slack {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            line_search_failed = true;
            break;
        }

        let s = &x_new - &x;
        let yv = &g_new - &grad;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if s_hist.len() == params.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(yv);
        }
        if f_new > fx {
            // Only reachable through the slack; keep the better point.
            break;
        }
        x = x_new;
        grad = g_new;
        fx = f_new;
    }

    let grad_norm = grad.norm();
    LbfgsOutcome {
        x,
        f: fx,
        grad_norm,
        iters,
        line_search_failed,
    }
}

/// Golden-section minimization of a unimodal `f` on [lo, hi] down to an
/// interval of width `tol`. A coarse scan first brackets the global
/// minimum so mild multimodality cannot send the search to the wrong basin.
pub fn scan_golden<F>(mut f: F, lo: f64, hi: f64, scan_points: usize, tol: f64) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    assert!(hi > lo);
    let n = scan_points.max(3);
    let h = (hi - lo) / (n - 1) as f64;
    let mut best_i = 0;
    let mut best_f = f64::INFINITY;
    for i in 0..n {
        let v = f(lo + i as f64 * h);
        if v < best_f {
            best_f = v;
            best_i = i;
        }
    }
    let a = if best_i == 0 { lo } else { lo + (best_i - 1) as f64 * h };
    let b = if best_i == n - 1 {
        hi
    } else {
        lo + (best_i + 1) as f64 * h
    };
    golden_section(f, a, b, tol)
}

/// Plain golden-section on [lo, hi]; returns (argmin, min).
pub fn golden_section<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    const INVPHI2: f64 = 0.381_966_011_250_105_1;
    let mut a = lo;
    let mut b = hi;
    let mut h = b - a;
    let mut c = a + INVPHI2 * h;
    let mut d = a + INVPHI * h;
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if h <= tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            h = b - a;
            c = a + INVPHI2 * h;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            h = b - a;
            d = a + INVPHI * h;
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Proximal-gradient minimization of smooth(beta) + reg * sum_k w_k ||beta_Gk||
/// with backtracking on the smooth part. `smooth` returns the value and
/// writes the gradient. Group weights are sqrt(m_k) by convention of the
/// caller. Stops after `max_iters` or when the iterate change is tiny.
pub fn proximal_group_descent<F>(
    mut smooth: F,
    groups: &[(usize, usize)],
    weights: &[f64],
    reg: f64,
    dim: usize,
    max_iters: usize,
) -> Result<DVector<f64>, String>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let mut beta = DVector::zeros(dim);
    let mut grad = DVector::zeros(dim);
    let mut fval = smooth(&beta, &mut grad);
    if !fval.is_finite() {
        return Err("smooth objective not finite at zero".to_string());
    }
    let mut step = 1.0;
    for _ in 0..max_iters {
        let mut candidate = DVector::zeros(dim);
        let mut f_cand = f64::INFINITY;
        let mut ok = false;
        for _ in 0..60 {
            candidate = &beta - &grad * step;
            for (gi, &(start, len)) in groups.iter().enumerate() {
                let mut block = candidate.rows_mut(start, len);
                let norm = block.norm();
                let thresh = step * reg * weights[gi];
                if norm <= thresh {
                    block.fill(0.0);
                } else {
                    block *= 1.0 - thresh / norm;
                }
            }
            let mut g_tmp = DVector::zeros(dim);
            f_cand = smooth(&candidate, &mut g_tmp);
            // Sufficient-decrease test against the quadratic model of the
            // smooth part around beta.
            let diff = &candidate - &beta;
            let model = fval + grad.dot(&diff) + diff.norm_squared() / (2.0 * step);
            if f_cand.is_finite() && f_cand <= model + 1e-12 * (1.0 + fval.abs()) {
                grad = g_tmp;
                ok = true;
                break;
            }
            step *= 0.5;
        }
        if !ok {
            return Err("group-LASSO line search failed".to_string());
        }
        let change = (&candidate - &beta).abs().sum();
        fval = f_cand;
        beta = candidate;
        if change < 1e-8 {
            break;
        }
        step = (step * 2.0).min(1.0e6);
    }
    Ok(beta)
}
