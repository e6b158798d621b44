//! The tractable surrogate objective: the Jensen-bounded KL penalty, the
//! inverse-Gamma hyperparameter KL, and the expected negative log-likelihood
//! (exact for Gaussian and Poisson, Jaakkola-bounded for Binomial).

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{GsvbError, Result};
use crate::model::{
    slab_log_normalizer, Family, GroupedDesign, Groups, GsvbPrior, VariationalState,
};

/// Default cap on any per-group moment-generating-function exponent in the
/// Poisson expected negative log-likelihood.
pub const MGF_EXPONENT_CAP: f64 = 700.0;

/// The surrogate objective split into its three parts. `total` is always the
/// exact sum of the parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub kl_surrogate: f64,
    pub hyper_kl: f64,
    pub expected_nll: f64,
}

/// Per-fit read-only cache: group Gram blocks X_Gk' X_Gk, the group
/// projections X_Gk' y and the response norm. Built once and shared by the
/// objective and the coordinate updates.
pub struct DesignCache<'a> {
    pub design: &'a GroupedDesign,
    pub gram: Vec<DMatrix<f64>>,
    pub xty: Vec<DVector<f64>>,
    pub y_norm2: f64,
}

impl<'a> DesignCache<'a> {
    pub fn new(design: &'a GroupedDesign) -> Self {
        let m_groups = design.groups.num_groups();
        let mut gram = Vec::with_capacity(m_groups);
        let mut xty = Vec::with_capacity(m_groups);
        for k in 0..m_groups {
            let xk = design.x_group(k);
            gram.push(xk.transpose() * xk);
            xty.push(xk.transpose() * &design.y);
        }
        DesignCache {
            design,
            gram,
            xty,
            y_norm2: design.y.norm_squared(),
        }
    }

    pub fn groups(&self) -> &Groups {
        &self.design.groups
    }

    pub fn n(&self) -> usize {
        self.design.n()
    }
}

/// E[beta_i beta_j] under the variational family: gamma_k (Sigma_ij +
/// mu_i mu_j) within a group, gamma_k gamma_h mu_i mu_j across groups.
pub fn expected_cross_moment(
    state: &VariationalState,
    i: usize,
    j: usize,
    groups: &Groups,
) -> f64 {
    let k = groups.group_of(i);
    let h = groups.group_of(j);
    if k == h {
        let s = groups.start(k);
        state.gamma[k] * (state.sigma_blocks[k][(i - s, j - s)] + state.mu[i] * state.mu[j])
    } else {
        state.gamma[k] * state.gamma[h] * state.mu[i] * state.mu[j]
    }
}

/// log det of a symmetric positive-definite matrix via Cholesky; None when
/// the factorization fails.
pub(crate) fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = nalgebra::Cholesky::new(m.clone())?;
    Some(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// sqrt(tr Sigma_Gk + ||mu_Gk||^2), the Jensen bound on E||beta_Gk||.
pub(crate) fn slab_jensen_norm(sigma: &DMatrix<f64>, mu: nalgebra::DVectorView<'_, f64>) -> f64 {
    (sigma.trace() + mu.norm_squared()).sqrt()
}

/// The gamma-weighted slab-vs-spike bracket for one group: the Jensen upper
/// bound on KL(N(mu, Sigma) || slab). Strictly positive for any real state.
pub(crate) fn group_kl_bracket(
    sigma: &DMatrix<f64>,
    mu: nalgebra::DVectorView<'_, f64>,
    lambda: f64,
) -> f64 {
    let m = mu.len();
    let log_det = match log_det_spd(sigma) {
        Some(v) => v,
        None => return f64::INFINITY,
    };
    -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + log_det)
        - 0.5 * m as f64
        - slab_log_normalizer(m)
        - m as f64 * lambda.ln()
        + lambda * slab_jensen_norm(sigma, mu)
}

/// Jensen-bounded KL(Q' || Pi). Terms weighted by gamma_k are skipped
/// entirely at gamma_k = 0 and 0 log 0 is taken as 0.
pub fn kl_surrogate(state: &VariationalState, prior: &GsvbPrior, groups: &Groups) -> f64 {
    let w = prior.w_bar();
    let mut acc = 0.0;
    for k in 0..groups.num_groups() {
        let g = state.gamma[k];
        if g > 0.0 {
            let bracket = group_kl_bracket(
                &state.sigma_blocks[k],
                state.mu_group(groups, k),
                prior.lambda,
            );
            acc += g * ((g / w).ln() + bracket);
        }
        if g < 1.0 {
            acc += (1.0 - g) * ((1.0 - g) / (1.0 - w)).ln();
        }
    }
    acc
}

/// KL between the variational inverse-Gamma(a', b') and the prior
/// inverse-Gamma(a, b) on the noise variance.
pub fn hyper_kl_gaussian(tau_a: f64, tau_b: f64, prior: &GsvbPrior) -> f64 {
    (tau_a - prior.a) * digamma(tau_a) + prior.a * (tau_b / prior.b).ln() + ln_gamma(prior.a)
        - ln_gamma(tau_a)
        + (prior.b - tau_b) * tau_a / tau_b
}

/// Mean linear predictor u = sum_k gamma_k X_Gk mu_Gk.
pub(crate) fn mean_predictor(state: &VariationalState, cache: &DesignCache) -> DVector<f64> {
    let mut u = DVector::zeros(cache.n());
    for k in 0..cache.groups().num_groups() {
        let g = state.gamma[k];
        if g != 0.0 {
            let xk = cache.design.x_group(k);
            u.gemv(g, &xk, &state.mu_group(cache.groups(), k), 1.0);
        }
    }
    u
}

/// Per-observation, per-group linear predictors c[i, k] = x_{i,Gk}' mu_Gk.
pub(crate) fn group_predictors(state: &VariationalState, cache: &DesignCache) -> DMatrix<f64> {
    let groups = cache.groups();
    let mut c = DMatrix::zeros(cache.n(), groups.num_groups());
    for k in 0..groups.num_groups() {
        let xk = cache.design.x_group(k);
        let col = xk * state.mu_group(groups, k);
        c.set_column(k, &col);
    }
    c
}

/// Per-observation, per-group quadratic forms q[i, k] = x_{i,Gk}' Sigma_Gk x_{i,Gk}.
pub(crate) fn group_quadratics(state: &VariationalState, cache: &DesignCache) -> DMatrix<f64> {
    let groups = cache.groups();
    let mut q = DMatrix::zeros(cache.n(), groups.num_groups());
    for k in 0..groups.num_groups() {
        let xk = cache.design.x_group(k);
        let w = xk * &state.sigma_blocks[k];
        for i in 0..cache.n() {
            q[(i, k)] = w.row(i).dot(&xk.row(i));
        }
    }
    q
}

/// E[(x_i' beta)^2] for every observation, decomposed blockwise.
pub(crate) fn predictor_second_moments(
    state: &VariationalState,
    cache: &DesignCache,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> DVector<f64> {
    let groups = cache.groups();
    let mut out = DVector::zeros(cache.n());
    for i in 0..cache.n() {
        let mut u_i = 0.0;
        let mut extra = 0.0;
        for k in 0..groups.num_groups() {
            let g = state.gamma[k];
            u_i += g * c[(i, k)];
            extra += g * (1.0 - g) * c[(i, k)] * c[(i, k)] + g * q[(i, k)];
        }
        out[i] = u_i * u_i + extra;
    }
    out
}

/// E || y - X beta ||^2 under the variational family: the Gram double sum of
/// the Gaussian expected negative log-likelihood, evaluated blockwise.
pub(crate) fn gaussian_nll_bracket(state: &VariationalState, cache: &DesignCache) -> f64 {
    let groups = cache.groups();
    let u = mean_predictor(state, cache);
    let resid = cache.design.y.clone() - &u;
    let mut bracket = resid.norm_squared();
    for k in 0..groups.num_groups() {
        let g = state.gamma[k];
        if g == 0.0 {
            continue;
        }
        let mu_k = state.mu_group(groups, k);
        let h = &cache.gram[k];
        let quad = mu_k.dot(&(h * mu_k));
        let trace = h
            .iter()
            .zip(state.sigma_blocks[k].iter())
            .map(|(x, s)| x * s)
            .sum::<f64>();
        bracket += g * (1.0 - g) * quad + g * trace;
    }
    bracket
}

/// Expected Gaussian negative log-likelihood under the variational family,
/// with the double sum over the Gram matrix evaluated blockwise.
pub fn expected_nll_gaussian(state: &VariationalState, cache: &DesignCache) -> f64 {
    let (a, b) = state.tau.expect("Gaussian state carries (a', b')");
    let n = cache.n() as f64;
    let bracket = gaussian_nll_bracket(state, cache);
    0.5 * n * ((2.0 * std::f64::consts::PI).ln() + b.ln() - digamma(a)) + 0.5 * a / b * bracket
}

/// Trigamma via the recurrence into the asymptotic regime.
pub(crate) fn trigamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 - inv2 / 30.0)))
}

/// Numerically stable log of the logistic sigmoid.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// a(t) = (s(t) - 1/2) / t with the removable singularity at zero replaced
/// by its limit 1/4.
pub fn jaakkola_a(t: f64) -> f64 {
    if t.abs() < 1e-8 {
        0.25
    } else {
        let s = 1.0 / (1.0 + (-t).exp());
        (s - 0.5) / t
    }
}

/// The quadratic lower bound on log s(x) that is tight at x = +-t, returned
/// together with a(t).
pub fn jaakkola_pieces(x: f64, t: f64) -> (f64, f64) {
    let a = jaakkola_a(t);
    let bound = log_sigmoid(t) + 0.5 * (x - t) - 0.5 * a * (x * x - t * t);
    (bound, a)
}

/// Jaakkola upper bound on the expected Binomial negative log-likelihood.
pub fn expected_nll_binomial_bound(state: &VariationalState, cache: &DesignCache) -> f64 {
    let t = state
        .jaakkola_t
        .as_ref()
        .expect("Binomial state carries t");
    let c = group_predictors(state, cache);
    let q = group_quadratics(state, cache);
    let second = predictor_second_moments(state, cache, &c, &q);
    let groups = cache.groups();
    let mut acc = 0.0;
    for i in 0..cache.n() {
        let mut u_i = 0.0;
        for k in 0..groups.num_groups() {
            u_i += state.gamma[k] * c[(i, k)];
        }
        let ti = t[i];
        let a = jaakkola_a(ti);
        acc += (0.5 - cache.design.y[i]) * u_i + 0.5 * ti - log_sigmoid(ti)
            + 0.5 * a * (second[i] - ti * ti);
    }
    acc
}

/// Exact expected Poisson negative log-likelihood. Errors with `MgfOverflow`
/// when any per-group MGF exponent exceeds `cap`.
pub fn expected_nll_poisson_capped(
    state: &VariationalState,
    cache: &DesignCache,
    cap: f64,
) -> Result<f64> {
    let groups = cache.groups();
    let c = group_predictors(state, cache);
    let q = group_quadratics(state, cache);
    let mut acc = 0.0;
    for i in 0..cache.n() {
        let y = cache.design.y[i];
        let mut mgf = 1.0;
        let mut u_i = 0.0;
        for k in 0..groups.num_groups() {
            let g = state.gamma[k];
            let e = c[(i, k)] + 0.5 * q[(i, k)];
            if e > cap {
                return Err(GsvbError::MgfOverflow {
                    row: i,
                    group: k,
                    exponent: e,
                    cap,
                });
            }
            mgf *= g * e.exp() + (1.0 - g);
            u_i += g * c[(i, k)];
        }
        acc += ln_gamma(y + 1.0) + mgf - y * u_i;
    }
    Ok(acc)
}

pub fn expected_nll_poisson(state: &VariationalState, cache: &DesignCache) -> Result<f64> {
    expected_nll_poisson_capped(state, cache, MGF_EXPONENT_CAP)
}

/// Assemble the full surrogate objective for the given family.
pub fn surrogate_objective(
    state: &VariationalState,
    cache: &DesignCache,
    prior: &GsvbPrior,
    family: Family,
) -> Result<ObjectiveValue> {
    let kl = kl_surrogate(state, prior, cache.groups());
    let (hyper, nll) = match family {
        Family::Gaussian => {
            let (a, b) = state.tau.expect("Gaussian state carries (a', b')");
            (
                hyper_kl_gaussian(a, b, prior),
                expected_nll_gaussian(state, cache),
            )
        }
        Family::Binomial => (0.0, expected_nll_binomial_bound(state, cache)),
        Family::Poisson => (0.0, expected_nll_poisson(state, cache)?),
    };
    Ok(ObjectiveValue {
        total: kl + hyper + nll,
        kl_surrogate: kl,
        hyper_kl: hyper,
        expected_nll: nll,
    })
}
