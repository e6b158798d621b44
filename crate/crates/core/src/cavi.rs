//! The coordinate-ascent fitting loop: per-group mu, Sigma and gamma
//! updates, family-specific hyperparameter updates, initialization and
//! convergence control. Every update is a block minimization of the
//! surrogate objective, so the objective trace is non-increasing.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::digamma;

use crate::error::{GsvbError, Result};
use crate::model::{
    Family, GroupedDesign, GsvbPrior, VariationalFamilyKind, VariationalState,
};
use crate::objective::{
    gaussian_nll_bracket, group_kl_bracket, hyper_kl_gaussian, jaakkola_a,
    predictor_second_moments, surrogate_objective, trigamma, DesignCache,
};
use crate::opt::{lbfgs, proximal_group_descent, scan_golden, LbfgsParams};

/// How the slab means are initialized before the first sweep.
#[derive(Debug, Clone)]
pub enum Init {
    /// Internal proximal-gradient group LASSO on the family likelihood.
    /// `reg = None` picks 0.01 * max_k ||X_Gk' y|| / n, small enough that
    /// most groups stay active.
    GroupLasso { reg: Option<f64> },
    Zeros,
    FromState(Box<VariationalState>),
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub max_sweeps: usize,
    /// Total absolute parameter change per sweep below which the fit stops.
    pub tol: f64,
    pub kind: VariationalFamilyKind,
    pub init: Init,
    pub lbfgs_memory: usize,
    pub lbfgs_tol: f64,
    /// Search interval for the scalar covariance parameterization.
    pub w_bounds: (f64, f64),
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_sweeps: 1000,
            tol: 1e-3,
            kind: VariationalFamilyKind::Block,
            init: Init::GroupLasso { reg: None },
            lbfgs_memory: 10,
            lbfgs_tol: 1e-8,
            w_bounds: (1e-8, 1e8),
            seed: 0,
        }
    }
}

impl FitConfig {
    fn lbfgs_params(&self) -> LbfgsParams {
        LbfgsParams {
            memory: self.lbfgs_memory,
            grad_tol: self.lbfgs_tol,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: VariationalState,
    /// Surrogate objective total recorded after each sweep.
    pub objective_trace: Vec<f64>,
    pub sweeps_used: usize,
    pub converged: bool,
    /// Number of inner line searches that had to settle for the best
    /// iterate found.
    pub line_search_warnings: usize,
}

/// Result of a covariance block update; `w` is the scalar ridge parameter
/// when the one-dimensional parameterization applies (Gaussian and Binomial
/// under the Block family).
#[derive(Debug, Clone)]
pub struct SigmaUpdate {
    pub sigma: DMatrix<f64>,
    pub w: Option<f64>,
}

/// Mutable per-fit scratch shared by the group updates: the mean linear
/// predictor u = sum_k gamma_k X_Gk mu_Gk, per-group predictor columns,
/// per-group quadratic forms (Binomial/Poisson) and the Jaakkola weights.
struct Workspace {
    u: DVector<f64>,
    /// c[(i, k)] = x_{i,Gk}' mu_Gk.
    c: DMatrix<f64>,
    /// q[(i, k)] = x_{i,Gk}' Sigma_Gk x_{i,Gk}; tracked for Binomial/Poisson.
    q: Option<DMatrix<f64>>,
    /// a(t_i) for the Binomial bound.
    a_t: Option<DVector<f64>>,
    /// Eigendecompositions of the group Gram blocks (Gaussian Block only).
    gram_eigen: Option<Vec<(DVector<f64>, DMatrix<f64>)>>,
    /// log of the per-group MGF factors and their row sums (Poisson only);
    /// kept in log space so products over many groups cannot overflow.
    log_mgf: Option<DMatrix<f64>>,
    log_mgf_total: Option<DVector<f64>>,
    line_search_warnings: usize,
}

impl Workspace {
    fn new(cache: &DesignCache, state: &VariationalState, family: Family, kind: VariationalFamilyKind) -> Self {
        let groups = cache.groups();
        let n = cache.n();
        let m_groups = groups.num_groups();
        let mut c = DMatrix::zeros(n, m_groups);
        for k in 0..m_groups {
            let col = cache.design.x_group(k) * state.mu_group(groups, k);
            c.set_column(k, &col);
        }
        let mut u = DVector::zeros(n);
        for k in 0..m_groups {
            let g = state.gamma[k];
            for i in 0..n {
                u[i] += g * c[(i, k)];
            }
        }
        let q = match family {
            Family::Gaussian => None,
            _ => {
                let mut q = DMatrix::zeros(n, m_groups);
                for k in 0..m_groups {
                    refresh_quadratic_column(&mut q, cache, state, k);
                }
                Some(q)
            }
        };
        let a_t = match family {
            Family::Binomial => Some(DVector::from_fn(n, |i, _| {
                jaakkola_a(state.jaakkola_t.as_ref().expect("Binomial state carries t")[i])
            })),
            _ => None,
        };
        let gram_eigen = match (family, kind) {
            (Family::Gaussian, VariationalFamilyKind::Block) => Some(
                (0..m_groups)
                    .map(|k| symmetric_eigen(&cache.gram[k]))
                    .collect(),
            ),
            _ => None,
        };
        let mut ws = Workspace {
            u,
            c,
            q,
            a_t,
            gram_eigen,
            log_mgf: None,
            log_mgf_total: None,
            line_search_warnings: 0,
        };
        if family == Family::Poisson {
            ws.log_mgf = Some(DMatrix::zeros(n, m_groups));
            ws.log_mgf_total = Some(DVector::zeros(n));
            ws.rebuild_mgf(state);
        }
        ws
    }

    /// Recompute every log MGF factor and the row totals from scratch.
    fn rebuild_mgf(&mut self, state: &VariationalState) {
        let q = self.q.as_ref().expect("Poisson workspace carries q");
        let log_mgf = self.log_mgf.as_mut().expect("Poisson workspace");
        let total = self.log_mgf_total.as_mut().expect("Poisson workspace");
        total.fill(0.0);
        for k in 0..state.gamma.len() {
            let g = state.gamma[k];
            for i in 0..self.u.len() {
                let v = ln_mgf_factor(g, self.c[(i, k)] + 0.5 * q[(i, k)]);
                log_mgf[(i, k)] = v;
                total[i] += v;
            }
        }
    }

    /// Refresh the log MGF column of group k after its c, q or gamma
    /// changed, adjusting the row totals in place.
    fn refresh_mgf_column(&mut self, state: &VariationalState, k: usize) {
        if self.log_mgf.is_none() {
            return;
        }
        let q = self.q.as_ref().expect("Poisson workspace carries q");
        let log_mgf = self.log_mgf.as_mut().expect("Poisson workspace");
        let total = self.log_mgf_total.as_mut().expect("Poisson workspace");
        let g = state.gamma[k];
        for i in 0..self.u.len() {
            let v = ln_mgf_factor(g, self.c[(i, k)] + 0.5 * q[(i, k)]);
            total[i] += v - log_mgf[(i, k)];
            log_mgf[(i, k)] = v;
        }
    }

    /// X_Gk' u_minus where u_minus excludes group k's own contribution.
    fn xt_u_minus(&self, cache: &DesignCache, state: &VariationalState, k: usize) -> DVector<f64> {
        let g = state.gamma[k];
        let xk = cache.design.x_group(k);
        let mut u_minus = self.u.clone();
        for i in 0..u_minus.len() {
            u_minus[i] -= g * self.c[(i, k)];
        }
        xk.transpose() * u_minus
    }

    /// u with group k's contribution removed, as a fresh vector.
    fn u_minus(&self, state: &VariationalState, k: usize) -> DVector<f64> {
        let g = state.gamma[k];
        DVector::from_fn(self.u.len(), |i, _| self.u[i] - g * self.c[(i, k)])
    }

    fn set_mu_column(&mut self, cache: &DesignCache, state: &VariationalState, k: usize) {
        let col = cache.design.x_group(k) * state.mu_group(cache.groups(), k);
        let g = state.gamma[k];
        for i in 0..self.u.len() {
            self.u[i] += g * (col[i] - self.c[(i, k)]);
            self.c[(i, k)] = col[i];
        }
    }

    fn set_gamma(&mut self, k: usize, old: f64, new: f64) {
        for i in 0..self.u.len() {
            self.u[i] += (new - old) * self.c[(i, k)];
        }
    }
}

fn symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    // Gram blocks are PSD; clamp the tiny negative eigenvalues roundoff
    // produces.
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    (vals, eig.eigenvectors)
}

fn refresh_quadratic_column(
    q: &mut DMatrix<f64>,
    cache: &DesignCache,
    state: &VariationalState,
    k: usize,
) {
    let xk = cache.design.x_group(k);
    let w = xk * &state.sigma_blocks[k];
    for i in 0..q.nrows() {
        q[(i, k)] = w.row(i).dot(&xk.row(i));
    }
}

/// log(gamma e^e + 1 - gamma) with the exponent capped, stable for large e.
fn ln_mgf_factor(gamma: f64, e: f64) -> f64 {
    let e = e.min(crate::objective::MGF_EXPONENT_CAP);
    if gamma <= 0.0 {
        return 0.0;
    }
    if gamma >= 1.0 {
        return e;
    }
    if e > 36.0 {
        // gamma e^e dominates; factor the exponent out.
        e + (gamma + (1.0 - gamma) * (-e).exp()).ln()
    } else {
        (gamma * e.exp() + 1.0 - gamma).ln()
    }
}

/// Product over groups other than k of the per-group MGF factors, for every
/// observation (Poisson family). Read off the maintained log products and
/// saturated rather than allowed to overflow: the inner optimizers need
/// finite weights, and the public objective is the place that reports MGF
/// overflow.
fn poisson_partial_products(ws: &Workspace, k: usize) -> DVector<f64> {
    const LOG_CAP: f64 = 690.0; // exp(690) < 1e300
    let log_mgf = ws.log_mgf.as_ref().expect("Poisson workspace");
    let total = ws.log_mgf_total.as_ref().expect("Poisson workspace");
    DVector::from_fn(ws.u.len(), |i, _| {
        (total[i] - log_mgf[(i, k)]).min(LOG_CAP).exp()
    })
}

/// Re-symmetrize and, if numerically indefinite, nudge a covariance block
/// back inside the cone with the smallest diagonal bump that lets the
/// Cholesky factorization go through.
fn ensure_spd(mut sigma: DMatrix<f64>, group: usize) -> Result<DMatrix<f64>> {
    let t = sigma.transpose();
    sigma = (sigma + t) * 0.5;
    if nalgebra::Cholesky::new(sigma.clone()).is_some() {
        return Ok(sigma);
    }
    let scale = 1.0 + sigma.trace().abs();
    let mut bump = 1e-14 * scale;
    for _ in 0..24 {
        let mut fixed = sigma.clone();
        for j in 0..fixed.nrows() {
            fixed[(j, j)] += bump;
        }
        if nalgebra::Cholesky::new(fixed.clone()).is_some() {
            return Ok(fixed);
        }
        bump *= 10.0;
    }
    Err(GsvbError::NonPdBlock { group })
}

// ---------------------------------------------------------------------------
// mu update
// ---------------------------------------------------------------------------

/// The block objective over mu_Gk with gamma_k fixed at one, shared by the
/// optimizer and by diagnostic gradient evaluation.
enum MuProblem {
    Gaussian {
        h: DMatrix<f64>,
        lin: DVector<f64>,
        r: f64,
        lambda: f64,
        tr_sigma: f64,
    },
    Binomial {
        bmat: DMatrix<f64>,
        lin: DVector<f64>,
        lambda: f64,
        tr_sigma: f64,
    },
    Poisson {
        xk: DMatrix<f64>,
        part: DVector<f64>,
        q_col: DVector<f64>,
        xty: DVector<f64>,
        lambda: f64,
        tr_sigma: f64,
    },
}

impl MuProblem {
    fn new(
        k: usize,
        state: &VariationalState,
        ws: &Workspace,
        cache: &DesignCache,
        prior: &GsvbPrior,
        family: Family,
    ) -> Self {
        let lambda = prior.lambda;
        let tr_sigma = state.sigma_blocks[k].trace();
        match family {
            Family::Gaussian => {
                let (a, b) = state.tau.expect("Gaussian state");
                MuProblem::Gaussian {
                    h: cache.gram[k].clone(),
                    lin: ws.xt_u_minus(cache, state, k) - &cache.xty[k],
                    r: a / b,
                    lambda,
                    tr_sigma,
                }
            }
            Family::Binomial => {
                let a_t = ws.a_t.as_ref().expect("Binomial workspace");
                let xk = cache.design.x_group(k);
                let m = cache.groups().size(k);
                let xa = DMatrix::from_fn(xk.nrows(), m, |i, j| xk[(i, j)] * a_t[i]);
                let bmat = xa.transpose() * xk;
                let half_minus_y =
                    DVector::from_fn(cache.n(), |i, _| 0.5 - cache.design.y[i]);
                let lin = xk.transpose() * half_minus_y + xa.transpose() * ws.u_minus(state, k);
                MuProblem::Binomial {
                    bmat,
                    lin,
                    lambda,
                    tr_sigma,
                }
            }
            Family::Poisson => MuProblem::Poisson {
                xk: cache.design.x_group(k).clone_owned(),
                part: poisson_partial_products(ws, k),
                q_col: ws.q.as_ref().expect("Poisson workspace").column(k).clone_owned(),
                xty: cache.xty[k].clone(),
                lambda,
                tr_sigma,
            },
        }
    }

    fn eval(&self, v: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        match self {
            MuProblem::Gaussian {
                h,
                lin,
                r,
                lambda,
                tr_sigma,
            } => {
                let hv = h * v;
                let norm = (tr_sigma + v.norm_squared()).sqrt();
                grad.copy_from(&((&hv + lin) * *r + v * (lambda / norm)));
                r * (0.5 * v.dot(&hv) + v.dot(lin)) + lambda * norm
            }
            MuProblem::Binomial {
                bmat,
                lin,
                lambda,
                tr_sigma,
            } => {
                let bv = bmat * v;
                let norm = (tr_sigma + v.norm_squared()).sqrt();
                grad.copy_from(&(&bv + lin + v * (lambda / norm)));
                0.5 * v.dot(&bv) + v.dot(lin) + lambda * norm
            }
            MuProblem::Poisson {
                xk,
                part,
                q_col,
                xty,
                lambda,
                tr_sigma,
            } => {
                let eta = xk * v;
                let norm = (tr_sigma + v.norm_squared()).sqrt();
                let mut val = lambda * norm - v.dot(xty);
                grad.copy_from(&(v * (lambda / norm) - xty));
                for i in 0..xk.nrows() {
                    let e = eta[i] + 0.5 * q_col[i];
                    if e > crate::objective::MGF_EXPONENT_CAP {
                        return f64::INFINITY;
                    }
                    let wgt = part[i] * e.exp();
                    val += wgt;
                    for j in 0..v.len() {
                        grad[j] += wgt * xk[(i, j)];
                    }
                }
                val
            }
        }
    }
}

/// Result of a mean block update.
#[derive(Debug, Clone)]
pub struct MuUpdate {
    pub mu: DVector<f64>,
    /// Euclidean norm of the analytic block gradient at the returned point.
    pub grad_norm: f64,
    pub line_search_failed: bool,
}

fn mu_update_inner(
    k: usize,
    state: &VariationalState,
    ws: &mut Workspace,
    cache: &DesignCache,
    prior: &GsvbPrior,
    family: Family,
    config: &FitConfig,
) -> MuUpdate {
    let problem = MuProblem::new(k, state, ws, cache, prior, family);
    let mu0 = state.mu_group(cache.groups(), k).clone_owned();
    let outcome = lbfgs(|v, g| problem.eval(v, g), mu0, &config.lbfgs_params());
    if outcome.line_search_failed {
        ws.line_search_warnings += 1;
    }
    MuUpdate {
        mu: outcome.x,
        grad_norm: outcome.grad_norm,
        line_search_failed: outcome.line_search_failed,
    }
}

/// Block minimizer of the objective over mu_Gk with gamma_k fixed at one.
pub fn update_mu_group(
    k: usize,
    state: &VariationalState,
    cache: &DesignCache,
    prior: &GsvbPrior,
    family: Family,
    config: &FitConfig,
) -> MuUpdate {
    let mut ws = Workspace::new(cache, state, family, config.kind);
    mu_update_inner(k, state, &mut ws, cache, prior, family, config)
}

/// Value and analytic gradient of the gamma_k := 1 block objective at an
/// arbitrary candidate mean, for diagnostics and finite-difference checks.
pub fn mu_objective_grad(
    k: usize,
    state: &VariationalState,
    cache: &DesignCache,
    prior: &GsvbPrior,
    family: Family,
    config: &FitConfig,
    candidate: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let ws = Workspace::new(cache, state, family, config.kind);
    let problem = MuProblem::new(k, state, &ws, cache, prior, family);
    let mut grad = DVector::zeros(candidate.len());
    let val = problem.eval(candidate, &mut grad);
    (val, grad)
}

// ---------------------------------------------------------------------------
// Sigma update
// ---------------------------------------------------------------------------

/// One-dimensional objective along Sigma(w) = (S + w I)^{-1} given the
/// eigenvalues of S: 1/2 tr(S Sigma) - 1/2 logdet Sigma + lambda
/// sqrt(tr Sigma + ||mu||^2).
fn sigma_curve_objective(eigs: &DVector<f64>, w: f64, lambda: f64, mu_norm2: f64) -> f64 {
    let mut tr_s_sigma = 0.0;
    let mut log_det = 0.0;
    let mut tr_sigma = 0.0;
    for &s in eigs.iter() {
        let d = s + w;
        tr_s_sigma += s / d;
        log_det += d.ln();
        tr_sigma += 1.0 / d;
    }
    0.5 * tr_s_sigma + 0.5 * log_det + lambda * (tr_sigma + mu_norm2).sqrt()
}

fn sigma_from_w(eigvals: &DVector<f64>, eigvecs: &DMatrix<f64>, w: f64) -> DMatrix<f64> {
    let inv = DVector::from_fn(eigvals.len(), |i, _| 1.0 / (eigvals[i] + w));
    let scaled = eigvecs * DMatrix::from_diagonal(&inv);
    let mut sigma = scaled * eigvecs.transpose();
    // Enforce exact symmetry against accumulation error.
    let st = sigma.transpose();
    sigma = (sigma + st) * 0.5;
    sigma
}

/// Minimize over w on a log scale and return (Sigma, w).
fn sigma_w_search(
    eigvals: &DVector<f64>,
    eigvecs: &DMatrix<f64>,
    lambda: f64,
    mu_norm2: f64,
    w_bounds: (f64, f64),
) -> (DMatrix<f64>, f64) {
    let (lo, hi) = (w_bounds.0.ln(), w_bounds.1.ln());
    let (log_w, _) = scan_golden(
        |lw| sigma_curve_objective(eigvals, lw.exp(), lambda, mu_norm2),
        lo,
        hi,
        64,
        1e-10,
    );
    let w = log_w.exp();
    (sigma_from_w(eigvals, eigvecs, w), w)
}

/// L-BFGS over per-coordinate log variances for the Diagonal family
/// (Gaussian/Binomial): 1/2 sum_j s_jj sigma_j^2 - 1/2 sum_j log sigma_j^2
/// + lambda sqrt(sum_j sigma_j^2 + ||mu||^2).
fn sigma_diag_search(
    s_diag: &DVector<f64>,
    current: &DMatrix<f64>,
    lambda: f64,
    mu_norm2: f64,
    params: &LbfgsParams,
    warnings: &mut usize,
) -> DMatrix<f64> {
    let m = s_diag.len();
    let rho0 = DVector::from_fn(m, |j, _| current[(j, j)].max(1e-300).ln());
    let out = lbfgs(
        |rho, grad| {
            let mut tr = 0.0;
            for j in 0..m {
                tr += rho[j].exp();
            }
            let norm = (tr + mu_norm2).sqrt();
            let mut val = lambda * norm;
            for j in 0..m {
                let v = rho[j].exp();
                val += 0.5 * s_diag[j] * v - 0.5 * rho[j];
                grad[j] = 0.5 * s_diag[j] * v - 0.5 + 0.5 * lambda * v / norm;
            }
            val
        },
        rho0,
        params,
    );
    if out.line_search_failed {
        *warnings += 1;
    }
    DMatrix::from_diagonal(&out.x.map(|r| r.exp()))
}

/// Packed upper-triangular parameterization for the Poisson covariance:
/// Sigma = U'U with positive diagonal stored in logs.
fn pack_upper(u: &DMatrix<f64>) -> DVector<f64> {
    let m = u.nrows();
    let mut v = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in i..m {
            if i == j {
                v.push(u[(i, i)].max(1e-300).ln());
            } else {
                v.push(u[(i, j)]);
            }
        }
    }
    DVector::from_vec(v)
}

fn unpack_upper(v: &DVector<f64>, m: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(m, m);
    let mut idx = 0;
    for i in 0..m {
        for j in i..m {
            u[(i, j)] = if i == j { v[idx].exp() } else { v[idx] };
            idx += 1;
        }
    }
    u
}

fn sigma_update_inner(
    k: usize,
    state: &VariationalState,
    ws: &mut Workspace,
    cache: &DesignCache,
    prior: &GsvbPrior,
    family: Family,
    config: &FitConfig,
) -> Result<SigmaUpdate> {
    let groups = cache.groups();
    let m = groups.size(k);
    let lambda = prior.lambda;
    let mu_k = state.mu_group(groups, k);
    let mu_norm2 = mu_k.norm_squared();
    let params = config.lbfgs_params();

    match (family, config.kind) {
        (Family::Gaussian, VariationalFamilyKind::Block) => {
            let (a, b) = state.tau.expect("Gaussian state");
            let r = a / b;
            let (d, vecs) = ws
                .gram_eigen
                .as_ref()
                .map(|e| (e[k].0.clone(), e[k].1.clone()))
                .unwrap_or_else(|| symmetric_eigen(&cache.gram[k]));
            let scaled = d.map(|v| r * v);
            let (sigma, w) = sigma_w_search(&scaled, &vecs, lambda, mu_norm2, config.w_bounds);
            Ok(SigmaUpdate {
                sigma: ensure_spd(sigma, k)?,
                w: Some(w),
            })
        }
        (Family::Binomial, VariationalFamilyKind::Block) => {
            let a_t = ws.a_t.as_ref().expect("Binomial workspace");
            let xk = cache.design.x_group(k);
            let xa = DMatrix::from_fn(xk.nrows(), m, |i, j| xk[(i, j)] * a_t[i]);
            let bmat = xa.transpose() * xk;
            let (d, vecs) = symmetric_eigen(&bmat);
            let (sigma, w) = sigma_w_search(&d, &vecs, lambda, mu_norm2, config.w_bounds);
            Ok(SigmaUpdate {
                sigma: ensure_spd(sigma, k)?,
                w: Some(w),
            })
        }
        (Family::Gaussian, VariationalFamilyKind::Diagonal) => {
            let (a, b) = state.tau.expect("Gaussian state");
            let r = a / b;
            let s_diag = DVector::from_fn(m, |j, _| r * cache.gram[k][(j, j)]);
            let sigma = sigma_diag_search(
                &s_diag,
                &state.sigma_blocks[k],
                lambda,
                mu_norm2,
                &params,
                &mut ws.line_search_warnings,
            );
            Ok(SigmaUpdate { sigma, w: None })
        }
        (Family::Binomial, VariationalFamilyKind::Diagonal) => {
            let a_t = ws.a_t.as_ref().expect("Binomial workspace");
            let xk = cache.design.x_group(k);
            let s_diag = DVector::from_fn(m, |j, _| {
                (0..cache.n()).map(|i| a_t[i] * xk[(i, j)] * xk[(i, j)]).sum()
            });
            let sigma = sigma_diag_search(
                &s_diag,
                &state.sigma_blocks[k],
                lambda,
                mu_norm2,
                &params,
                &mut ws.line_search_warnings,
            );
            Ok(SigmaUpdate { sigma, w: None })
        }
        (Family::Poisson, kind) => {
            let part = poisson_partial_products(ws, k);
            let xk = cache.design.x_group(k).clone_owned();
            let n = cache.n();
            let c_col = ws.c.column(k).clone_owned();
            match kind {
                VariationalFamilyKind::Diagonal => {
                    let rho0 = DVector::from_fn(m, |j, _| {
                        state.sigma_blocks[k][(j, j)].max(1e-300).ln()
                    });
                    let out = lbfgs(
                        |rho, grad| {
                            let sig: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
                            let tr: f64 = sig.iter().sum();
                            let norm = (tr + mu_norm2).sqrt();
                            let mut val = lambda * norm;
                            for j in 0..m {
                                grad[j] = -0.5 + 0.5 * lambda * sig[j] / norm;
                                val -= 0.5 * rho[j];
                            }
                            for i in 0..n {
                                let mut qi = 0.0;
                                for j in 0..m {
                                    qi += xk[(i, j)] * xk[(i, j)] * sig[j];
                                }
                                let e = c_col[i] + 0.5 * qi;
                                if e > crate::objective::MGF_EXPONENT_CAP {
                                    return f64::INFINITY;
                                }
                                let wgt = part[i] * e.exp();
                                val += wgt;
                                for j in 0..m {
                                    grad[j] += 0.5 * wgt * xk[(i, j)] * xk[(i, j)] * sig[j];
                                }
                            }
                            val
                        },
                        rho0,
                        &params,
                    );
                    if out.line_search_failed {
                        ws.line_search_warnings += 1;
                    }
                    Ok(SigmaUpdate {
                        sigma: DMatrix::from_diagonal(&out.x.map(|r| r.exp())),
                        w: None,
                    })
                }
                VariationalFamilyKind::Block => {
                    let start = ensure_spd(state.sigma_blocks[k].clone(), k)?;
                    let chol = nalgebra::Cholesky::new(start)
                        .ok_or(GsvbError::NonPdBlock { group: k })?;
                    let u0 = pack_upper(&chol.l().transpose());
                    let dim = m * (m + 1) / 2;
                    let out = lbfgs(
                        |theta, grad| {
                            let umat = unpack_upper(theta, m);
                            let fro2 = umat.iter().map(|v| v * v).sum::<f64>();
                            let norm = (fro2 + mu_norm2).sqrt();
                            let mut val = lambda * norm;
                            for j in 0..m {
                                val -= umat[(j, j)].ln();
                            }
                            // d(val)/dU accumulated as a full matrix first.
                            let mut gu = &umat * (lambda / norm);
                            for j in 0..m {
                                gu[(j, j)] -= 1.0 / umat[(j, j)];
                            }
                            let ux = &umat * xk.transpose(); // m x n
                            for i in 0..n {
                                let qi = ux.column(i).norm_squared();
                                let e = c_col[i] + 0.5 * qi;
                                if e > crate::objective::MGF_EXPONENT_CAP {
                                    return f64::INFINITY;
                                }
                                let wgt = part[i] * e.exp();
                                val += wgt;
                                // d(q_i/2)/dU = U x_i x_i'
                                let uxi = ux.column(i);
                                for r in 0..m {
                                    let s = wgt * uxi[r];
                                    for cidx in 0..m {
                                        gu[(r, cidx)] += s * xk[(i, cidx)];
                                    }
                                }
                            }
                            // Project to the packed parameterization.
                            let mut idx = 0;
                            for r in 0..m {
                                for cidx in r..m {
                                    grad[idx] = if r == cidx {
                                        gu[(r, cidx)] * umat[(r, cidx)]
                                    } else {
                                        gu[(r, cidx)]
                                    };
                                    idx += 1;
                                }
                            }
                            debug_assert_eq!(idx, dim);
                            val
                        },
                        u0,
                        &params,
                    );
                    if out.line_search_failed {
                        ws.line_search_warnings += 1;
                    }
                    let umat = unpack_upper(&out.x, m);
                    Ok(SigmaUpdate {
                        sigma: ensure_spd(umat.transpose() * &umat, k)?,
                        w: None,
                    })
                }
            }
        }
    }
}

/// Block minimizer of the objective over Sigma_Gk with gamma_k fixed at one.
pub fn update_sigma_group(
    k: usize,
    state: &VariationalState,
    cache: &DesignCache,
    prior: &GsvbPrior,
    family: Family,
    config: &FitConfig,
) -> Result<SigmaUpdate> {
    let mut ws = Workspace::new(cache, state, family, config.kind);
    sigma_update_inner(k, state, &mut ws, cache, prior, family, config)
}

// ---------------------------------------------------------------------------
// gamma update
// ---------------------------------------------------------------------------

const ETA_CLAMP: f64 = 500.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gamma_update_inner(
    k: usize,
    state: &VariationalState,
    ws: &Workspace,
    cache: &DesignCache,
    prior: &GsvbPrior,
    family: Family,
) -> (f64, f64) {
    let groups = cache.groups();
    let w = prior.w_bar();
    let mu_k = state.mu_group(groups, k);
    let bracket = group_kl_bracket(&state.sigma_blocks[k], mu_k, prior.lambda);

    // The coefficient of gamma_k in the expected negative log-likelihood.
    let nll_linear = match family {
        Family::Gaussian => {
            let (a, b) = state.tau.expect("Gaussian state");
            let r = a / b;
            let h = &cache.gram[k];
            let quad = mu_k.dot(&(h * mu_k));
            let trace = h
                .iter()
                .zip(state.sigma_blocks[k].iter())
                .map(|(x, s)| x * s)
                .sum::<f64>();
            let cross = mu_k.dot(&ws.xt_u_minus(cache, state, k));
            0.5 * r * (quad + trace) + r * cross - r * cache.xty[k].dot(&mu_k)
        }
        Family::Binomial => {
            let a_t = ws.a_t.as_ref().expect("Binomial workspace");
            let q = ws.q.as_ref().expect("Binomial workspace");
            let u_minus = ws.u_minus(state, k);
            let mut acc = 0.0;
            for i in 0..cache.n() {
                let cik = ws.c[(i, k)];
                acc += (0.5 - cache.design.y[i]) * cik
                    + 0.5 * a_t[i] * (cik * cik + q[(i, k)] + 2.0 * cik * u_minus[i]);
            }
            acc
        }
        Family::Poisson => {
            let part = poisson_partial_products(ws, k);
            let q = ws.q.as_ref().expect("Poisson workspace");
            let mut acc = 0.0;
            for i in 0..cache.n() {
                let e = ws.c[(i, k)] + 0.5 * q[(i, k)];
                let mgf = e.min(crate::objective::MGF_EXPONENT_CAP).exp();
                acc += (mgf - 1.0) * part[i] - cache.design.y[i] * ws.c[(i, k)];
            }
            acc
        }
    };

    let eta = (w / (1.0 - w)).ln() - bracket - nll_linear;
    let eta_clamped = eta.clamp(-ETA_CLAMP, ETA_CLAMP);
    (sigmoid(eta_clamped), eta)
}

/// Closed-form minimizer of the objective over gamma_k. Returns the new
/// inclusion probability and the unclamped logit.
pub fn update_gamma_group(
    k: usize,
    state: &VariationalState,
    cache: &DesignCache,
    prior: &GsvbPrior,
    family: Family,
    config: &FitConfig,
) -> (f64, f64) {
    let ws = Workspace::new(cache, state, family, config.kind);
    gamma_update_inner(k, state, &ws, cache, prior, family)
}

// ---------------------------------------------------------------------------
// hyperparameter updates
// ---------------------------------------------------------------------------

/// The (a', b')-dependent part of the objective and its gradient in
/// (log a', log b'). `t_bracket` is E || y - X beta ||^2 and `n` the number
/// of observations.
pub(crate) fn tau_objective_grad(
    log_a: f64,
    log_b: f64,
    n: f64,
    t_bracket: f64,
    prior: &GsvbPrior,
) -> (f64, f64, f64) {
    let a = log_a.exp();
    let b = log_b.exp();
    let val = hyper_kl_gaussian(a, b, prior)
        + 0.5 * n * ((2.0 * std::f64::consts::PI).ln() + b.ln() - digamma(a))
        + 0.5 * a / b * t_bracket;
    let da = (a - prior.a - 0.5 * n) * trigamma(a) + (prior.b - b) / b + 0.5 * t_bracket / b;
    let db = (prior.a + 0.5 * n) / b - a * prior.b / (b * b) - 0.5 * a * t_bracket / (b * b);
    (val, da * a, db * b)
}

fn tau_update_inner(
    state: &VariationalState,
    cache: &DesignCache,
    prior: &GsvbPrior,
    config: &FitConfig,
    warnings: &mut usize,
) -> (f64, f64) {
    let (a0, b0) = state.tau.expect("Gaussian state");
    let t_bracket = gaussian_nll_bracket(state, cache);
    let n = cache.n() as f64;
    let out = lbfgs(
        |x, grad| {
            let (val, ga, gb) = tau_objective_grad(x[0], x[1], n, t_bracket, prior);
            grad[0] = ga;
            grad[1] = gb;
            val
        },
        DVector::from_vec(vec![a0.ln(), b0.ln()]),
        &config.lbfgs_params(),
    );
    if out.line_search_failed {
        *warnings += 1;
        return (a0, b0);
    }
    (out.x[0].exp(), out.x[1].exp())
}

/// Quasi-Newton minimization of the inverse-Gamma factor parameters in
/// (log a', log b').
pub fn update_tau_variational(
    state: &VariationalState,
    cache: &DesignCache,
    prior: &GsvbPrior,
    config: &FitConfig,
) -> (f64, f64) {
    let mut warnings = 0;
    tau_update_inner(state, cache, prior, config, &mut warnings)
}

/// Bound-optimal Jaakkola parameters t_i = sqrt(E[(x_i' beta)^2]).
pub fn update_jaakkola_t(state: &VariationalState, cache: &DesignCache) -> DVector<f64> {
    let c = crate::objective::group_predictors(state, cache);
    let q = crate::objective::group_quadratics(state, cache);
    predictor_second_moments(state, cache, &c, &q).map(|v| v.max(0.0).sqrt())
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

fn group_lasso_mu(
    cache: &DesignCache,
    family: Family,
    reg: f64,
) -> Result<DVector<f64>> {
    let design = cache.design;
    let groups = cache.groups();
    let ranges: Vec<(usize, usize)> = groups.iter().collect();
    let weights: Vec<f64> = groups.sizes().iter().map(|&m| (m as f64).sqrt()).collect();
    let x = &design.x;
    let y = &design.y;
    let n = design.n();
    let smooth = |beta: &DVector<f64>, grad: &mut DVector<f64>| -> f64 {
        let eta = x * beta;
        match family {
            Family::Gaussian => {
                let r = &eta - y;
                grad.copy_from(&(x.transpose() * &r));
                0.5 * r.norm_squared()
            }
            Family::Binomial => {
                let mut val = 0.0;
                let mut resid = DVector::zeros(n);
                for i in 0..n {
                    val += softplus(eta[i]) - y[i] * eta[i];
                    resid[i] = sigmoid(eta[i]) - y[i];
                }
                grad.copy_from(&(x.transpose() * resid));
                val
            }
            Family::Poisson => {
                let mut val = 0.0;
                let mut resid = DVector::zeros(n);
                for i in 0..n {
                    if eta[i] > crate::objective::MGF_EXPONENT_CAP {
                        return f64::INFINITY;
                    }
                    let rate = eta[i].exp();
                    val += rate - y[i] * eta[i];
                    resid[i] = rate - y[i];
                }
                grad.copy_from(&(x.transpose() * resid));
                val
            }
        }
    };
    proximal_group_descent(smooth, &ranges, &weights, reg, design.p(), 500)
        .map_err(GsvbError::InitFailure)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Build the starting state: mu from the configured initializer, covariance
/// blocks from the scalar parameterization at w = 1 (0.2 I for Poisson),
/// gamma = 1/2 everywhere, a' = b' = 1e-3 and the published t formula.
pub fn initialize(
    design: &GroupedDesign,
    prior: &GsvbPrior,
    family: Family,
    config: &FitConfig,
) -> Result<VariationalState> {
    prior.validate()?;
    let cache = DesignCache::new(design);
    initialize_with_cache(&cache, prior, family, config)
}

fn initialize_with_cache(
    cache: &DesignCache,
    prior: &GsvbPrior,
    family: Family,
    config: &FitConfig,
) -> Result<VariationalState> {
    prior.validate()?;
    let design = cache.design;
    let groups = cache.groups();
    let m_groups = groups.num_groups();

    if let Init::FromState(s) = &config.init {
        let s = (**s).clone();
        if s.mu.len() != design.p()
            || s.gamma.len() != m_groups
            || s.sigma_blocks.len() != m_groups
        {
            return Err(GsvbError::InitFailure(
                "provided state does not match the design".to_string(),
            ));
        }
        if s.kind != config.kind {
            return Err(GsvbError::InitFailure(
                "provided state uses a different variational family".to_string(),
            ));
        }
        if family == Family::Gaussian && s.tau.is_none() {
            return Err(GsvbError::InitFailure(
                "Gaussian family requires (a', b') in the provided state".to_string(),
            ));
        }
        if family == Family::Binomial
            && s.jaakkola_t.as_ref().map(|t| t.len()) != Some(design.n())
        {
            return Err(GsvbError::InitFailure(
                "Binomial family requires t of length n in the provided state".to_string(),
            ));
        }
        return Ok(s);
    }

    let mu = match &config.init {
        Init::Zeros => DVector::zeros(design.p()),
        Init::GroupLasso { reg } => {
            let reg = reg.unwrap_or_else(|| {
                let max_dot = (0..m_groups)
                    .map(|k| cache.xty[k].norm())
                    .fold(0.0f64, f64::max);
                0.01 * max_dot / design.n() as f64
            });
            group_lasso_mu(cache, family, reg)?
        }
        Init::FromState(_) => unreachable!(),
    };

    let tau = match family {
        Family::Gaussian => Some((1e-3, 1e-3)),
        _ => None,
    };
    let ab_ratio = 1.0; // a' / b' at initialization

    let mut sigma_blocks = Vec::with_capacity(m_groups);
    for k in 0..m_groups {
        let m = groups.size(k);
        let block = match family {
            Family::Poisson => DMatrix::from_diagonal_element(m, m, 0.2),
            _ => match config.kind {
                VariationalFamilyKind::Block => {
                    let mut a = cache.gram[k].clone() * ab_ratio;
                    for j in 0..m {
                        a[(j, j)] += 1.0;
                    }
                    match nalgebra::Cholesky::new(a) {
                        Some(chol) => {
                            let sigma = chol.inverse();
                            let st = sigma.transpose();
                            (sigma + st) * 0.5
                        }
                        None => return Err(GsvbError::NonPdBlock { group: k }),
                    }
                }
                VariationalFamilyKind::Diagonal => DMatrix::from_diagonal(&DVector::from_fn(
                    m,
                    |j, _| 1.0 / (ab_ratio * cache.gram[k][(j, j)] + 1.0),
                )),
            },
        };
        sigma_blocks.push(block);
    }

    let gamma = DVector::from_element(m_groups, 0.5);
    let mut state = VariationalState {
        mu,
        sigma_blocks,
        gamma,
        tau,
        jaakkola_t: None,
        kind: config.kind,
    };

    if family == Family::Binomial {
        // Published initialization: t_i = sqrt(sum_k gamma_k [c_ik^2 + q_ik]).
        let c = crate::objective::group_predictors(&state, cache);
        let q = crate::objective::group_quadratics(&state, cache);
        let t = DVector::from_fn(design.n(), |i, _| {
            let mut acc = 0.0;
            for k in 0..m_groups {
                acc += state.gamma[k] * (c[(i, k)] * c[(i, k)] + q[(i, k)]);
            }
            acc.max(0.0).sqrt()
        });
        state.jaakkola_t = Some(t);
    }

    Ok(state)
}

// ---------------------------------------------------------------------------
// the sweep loop
// ---------------------------------------------------------------------------

/// Run coordinate ascent to convergence. The design is re-validated, the
/// state initialized per the config, and each sweep applies the mu, Sigma
/// and gamma updates per group followed by the family's hyperparameter
/// update. Stops when the total absolute parameter change over a sweep
/// drops below `tol`; hitting `max_sweeps` is reported, not an error.
pub fn fit(
    design: &GroupedDesign,
    prior: &GsvbPrior,
    family: Family,
    config: &FitConfig,
) -> Result<FitResult> {
    crate::model::validate_grouped_design(design.clone(), family)?;
    prior.validate()?;
    let cache = DesignCache::new(design);
    let mut state = initialize_with_cache(&cache, prior, family, config)?;
    let mut ws = Workspace::new(&cache, &state, family, config.kind);
    let groups = cache.groups();
    let m_groups = groups.num_groups();

    let mut trace = Vec::new();
    let mut converged = false;
    let mut sweeps_used = 0;

    for sweep in 0..config.max_sweeps {
        let prev = state.clone();
        if family == Family::Poisson && sweep > 0 {
            // Full refresh once per sweep to keep the incremental log-MGF
            // totals from accumulating drift.
            ws.rebuild_mgf(&state);
        }
        for k in 0..m_groups {
            let upd = mu_update_inner(k, &state, &mut ws, &cache, prior, family, config);
            state
                .mu
                .rows_mut(groups.start(k), groups.size(k))
                .copy_from(&upd.mu);
            ws.set_mu_column(&cache, &state, k);

            let sig = sigma_update_inner(k, &state, &mut ws, &cache, prior, family, config)?;
            state.sigma_blocks[k] = sig.sigma;
            if let Some(q) = ws.q.as_mut() {
                refresh_quadratic_column(q, &cache, &state, k);
            }

            let (gamma_k, _) = gamma_update_inner(k, &state, &ws, &cache, prior, family);
            let old = state.gamma[k];
            state.gamma[k] = gamma_k;
            ws.set_gamma(k, old, gamma_k);
            ws.refresh_mgf_column(&state, k);
        }
        match family {
            Family::Gaussian => {
                let (a, b) =
                    tau_update_inner(&state, &cache, prior, config, &mut ws.line_search_warnings);
                state.tau = Some((a, b));
            }
            Family::Binomial => {
                let t = update_jaakkola_t(&state, &cache);
                let a_t = ws.a_t.as_mut().expect("Binomial workspace");
                for i in 0..t.len() {
                    a_t[i] = jaakkola_a(t[i]);
                }
                state.jaakkola_t = Some(t);
            }
            Family::Poisson => {}
        }

        let obj = surrogate_objective(&state, &cache, prior, family)?;
        trace.push(obj.total);
        sweeps_used += 1;

        if state.abs_change(&prev) < config.tol {
            converged = true;
            break;
        }
    }

    Ok(FitResult {
        state,
        objective_trace: trace,
        sweeps_used,
        converged,
        line_search_warnings: ws.line_search_warnings,
    })
}
