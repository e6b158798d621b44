//! Shared test oracles: Monte Carlo estimators of the exact KL and expected
//! negative log-likelihood (independent of the analytic implementations),
//! quadrature utilities and small random problem generators. Oracles use
//! antithetic slab draws and fixed seeds.

#![allow(dead_code)]

use gsvb::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use statrs::function::gamma::ln_gamma;

pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

fn ln_slab(beta: &[f64], lambda: f64) -> f64 {
    slab_log_density(beta, lambda)
}

fn ln_normal(beta: &DVector<f64>, mu: &DVector<f64>, sigma_inv: &DMatrix<f64>, ln_det: f64) -> f64 {
    let d = beta - mu;
    let quad = d.dot(&(sigma_inv * &d));
    -0.5 * (beta.len() as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det + quad)
}

fn ln_inv_gamma_ratio(x: f64, ap: f64, bp: f64, a: f64, b: f64) -> f64 {
    ap * bp.ln() - a * b.ln() - ln_gamma(ap) + ln_gamma(a) + (a - ap) * x.ln() + (b - bp) / x
}

fn log_lik(family: Family, design: &GroupedDesign, beta: &DVector<f64>, tau2: f64) -> f64 {
    let eta = &design.x * beta;
    let n = design.n();
    match family {
        Family::Gaussian => {
            let rss = (&design.y - &eta).norm_squared();
            -0.5 * n as f64 * (2.0 * std::f64::consts::PI * tau2).ln() - rss / (2.0 * tau2)
        }
        Family::Binomial => (0..n)
            .map(|i| {
                let e = eta[i];
                let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                design.y[i] * e - softplus
            })
            .sum::<f64>(),
        Family::Poisson => (0..n)
            .map(|i| design.y[i] * eta[i] - eta[i].exp() - ln_gamma(design.y[i] + 1.0))
            .sum(),
    }
}

/// Per-group factors prepared for repeated draws.
struct GroupFactors {
    chol_l: Vec<DMatrix<f64>>,
    sigma_inv: Vec<DMatrix<f64>>,
    ln_det: Vec<f64>,
}

impl GroupFactors {
    fn new(state: &VariationalState) -> Self {
        let mut chol_l = Vec::new();
        let mut sigma_inv = Vec::new();
        let mut ln_det = Vec::new();
        for block in &state.sigma_blocks {
            let chol = nalgebra::Cholesky::new(block.clone()).expect("SPD block");
            ln_det.push(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>());
            sigma_inv.push(chol.inverse());
            chol_l.push(chol.l());
        }
        GroupFactors {
            chol_l,
            sigma_inv,
            ln_det,
        }
    }
}

/// Monte Carlo estimate of the exact negative ELBO
/// E_Q[log dQ/dPi] - E_Q[log-likelihood] using antithetic slab draws.
pub fn mc_negative_elbo(
    state: &VariationalState,
    design: &GroupedDesign,
    prior: &GsvbPrior,
    family: Family,
    pairs: usize,
    seed: u64,
) -> McEstimate {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let groups = &design.groups;
    let factors = GroupFactors::new(state);
    let w = prior.w_bar();
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut beta_pos = DVector::zeros(design.p());
    let mut beta_neg = DVector::zeros(design.p());
    for _ in 0..pairs {
        beta_pos.fill(0.0);
        beta_neg.fill(0.0);
        let mut rn_common = 0.0;
        let mut rn_pos = 0.0;
        let mut rn_neg = 0.0;
        for k in 0..groups.num_groups() {
            let g = state.gamma[k];
            let include = g > 0.0 && (g >= 1.0 || rng.random::<f64>() < g);
            if !include {
                rn_common += ((1.0 - g) / (1.0 - w)).ln();
                continue;
            }
            let m = groups.size(k);
            let mu_k = state.mu_group(groups, k).clone_owned();
            let eps = DVector::from_fn(m, |_, _| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            });
            let dev = &factors.chol_l[k] * eps;
            let bp = &mu_k + &dev;
            let bn = &mu_k - &dev;
            rn_common += (g / w).ln();
            for side in 0..2 {
                let b = if side == 0 { &bp } else { &bn };
                let val = ln_normal(b, &mu_k, &factors.sigma_inv[k], factors.ln_det[k])
                    - ln_slab(b.as_slice(), prior.lambda);
                if side == 0 {
                    rn_pos += val;
                } else {
                    rn_neg += val;
                }
            }
            beta_pos.rows_mut(groups.start(k), m).copy_from(&bp);
            beta_neg.rows_mut(groups.start(k), m).copy_from(&bn);
        }
        let (tau2, rn_tau) = match family {
            Family::Gaussian => {
                let (ap, bp) = state.tau.expect("Gaussian state");
                let g = Gamma::new(ap, 1.0 / bp).unwrap().sample(&mut rng);
                let x = 1.0 / g;
                (x, ln_inv_gamma_ratio(x, ap, bp, prior.a, prior.b))
            }
            _ => (1.0, 0.0),
        };
        let v_pos = rn_common + rn_pos + rn_tau - log_lik(family, design, &beta_pos, tau2);
        let v_neg = rn_common + rn_neg + rn_tau - log_lik(family, design, &beta_neg, tau2);
        let v = 0.5 * (v_pos + v_neg);
        sum += v;
        sum2 += v * v;
    }
    let mean = sum / pairs as f64;
    let var = (sum2 / pairs as f64 - mean * mean).max(0.0);
    McEstimate {
        mean,
        se: (var / pairs as f64).sqrt(),
    }
}

/// Monte Carlo estimate of the exact KL(Q || Pi): everything is closed-form
/// except E||beta_Gk|| for included groups, which is estimated from slab
/// draws (antithetic).
pub fn mc_kl_exact(
    state: &VariationalState,
    prior: &GsvbPrior,
    groups: &Groups,
    pairs: usize,
    seed: u64,
) -> McEstimate {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let factors = GroupFactors::new(state);
    let w = prior.w_bar();
    let mut total = 0.0;
    let mut var_total = 0.0;
    for k in 0..groups.num_groups() {
        let g = state.gamma[k];
        if g > 0.0 {
            let m = groups.size(k);
            let mu_k = state.mu_group(groups, k).clone_owned();
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for _ in 0..pairs {
                let eps = DVector::from_fn(m, |_, _| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v
                });
                let dev = &factors.chol_l[k] * eps;
                let v = 0.5 * ((&mu_k + &dev).norm() + (&mu_k - &dev).norm());
                sum += v;
                sum2 += v * v;
            }
            let e_norm = sum / pairs as f64;
            let se_norm =
                ((sum2 / pairs as f64 - e_norm * e_norm).max(0.0) / pairs as f64).sqrt();
            let m_f = m as f64;
            total += g
                * ((g / w).ln()
                    - 0.5 * (m_f * (2.0 * std::f64::consts::PI).ln() + factors.ln_det[k])
                    - 0.5 * m_f
                    - slab_log_normalizer(m)
                    - m_f * prior.lambda.ln()
                    + prior.lambda * e_norm);
            var_total += (g * prior.lambda * se_norm).powi(2);
        }
        if g < 1.0 {
            total += (1.0 - g) * ((1.0 - g) / (1.0 - w)).ln();
        }
    }
    McEstimate {
        mean: total,
        se: var_total.sqrt(),
    }
}

/// Monte Carlo estimate of E_Q[-log-likelihood].
pub fn mc_expected_nll(
    state: &VariationalState,
    design: &GroupedDesign,
    family: Family,
    pairs: usize,
    seed: u64,
) -> McEstimate {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let groups = &design.groups;
    let factors = GroupFactors::new(state);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut beta_pos = DVector::zeros(design.p());
    let mut beta_neg = DVector::zeros(design.p());
    for _ in 0..pairs {
        beta_pos.fill(0.0);
        beta_neg.fill(0.0);
        for k in 0..groups.num_groups() {
            let g = state.gamma[k];
            let include = g > 0.0 && (g >= 1.0 || rng.random::<f64>() < g);
            if !include {
                continue;
            }
            let m = groups.size(k);
            let mu_k = state.mu_group(groups, k).clone_owned();
            let eps = DVector::from_fn(m, |_, _| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            });
            let dev = &factors.chol_l[k] * eps;
            beta_pos.rows_mut(groups.start(k), m).copy_from(&(&mu_k + &dev));
            beta_neg.rows_mut(groups.start(k), m).copy_from(&(&mu_k - &dev));
        }
        let tau2 = match family {
            Family::Gaussian => {
                let (ap, bp) = state.tau.expect("Gaussian state");
                1.0 / Gamma::new(ap, 1.0 / bp).unwrap().sample(&mut rng)
            }
            _ => 1.0,
        };
        let v = -0.5
            * (log_lik(family, design, &beta_pos, tau2) + log_lik(family, design, &beta_neg, tau2));
        sum += v;
        sum2 += v * v;
    }
    let mean = sum / pairs as f64;
    let var = (sum2 / pairs as f64 - mean * mean).max(0.0);
    McEstimate {
        mean,
        se: (var / pairs as f64).sqrt(),
    }
}

/// Random small state consistent with the design and family; gammas stay
/// away from the endpoints so every branch is exercised.
pub fn random_state(
    design: &GroupedDesign,
    family: Family,
    kind: VariationalFamilyKind,
    rng: &mut ChaCha20Rng,
) -> VariationalState {
    let groups = &design.groups;
    let p = design.p();
    let mu = DVector::from_fn(p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let mut sigma_blocks = Vec::new();
    for k in 0..groups.num_groups() {
        let m = groups.size(k);
        let block = match kind {
            VariationalFamilyKind::Diagonal => DMatrix::from_diagonal(&DVector::from_fn(
                m,
                |_, _| 0.2 + 0.8 * rng.random::<f64>(),
            )),
            VariationalFamilyKind::Block => {
                let a = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5);
                let mut s = &a * a.transpose();
                for j in 0..m {
                    s[(j, j)] += 0.3;
                }
                s
            }
        };
        sigma_blocks.push(block);
    }
    let gamma = DVector::from_fn(groups.num_groups(), |_, _| {
        0.05 + 0.9 * rng.random::<f64>()
    });
    let tau = match family {
        Family::Gaussian => Some((0.5 + 2.0 * rng.random::<f64>(), 0.5 + 2.0 * rng.random::<f64>())),
        _ => None,
    };
    let jaakkola_t = match family {
        Family::Binomial => Some(DVector::from_fn(design.n(), |_, _| {
            2.0 * rng.random::<f64>()
        })),
        _ => None,
    };
    VariationalState {
        mu,
        sigma_blocks,
        gamma,
        tau,
        jaakkola_t,
        kind,
    }
}

/// Random small dataset with responses in the family's domain.
pub fn random_design(
    n: usize,
    sizes: &[usize],
    family: Family,
    rng: &mut ChaCha20Rng,
) -> GroupedDesign {
    let p: usize = sizes.iter().sum();
    let x = DMatrix::from_fn(n, p, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        0.7 * v
    });
    let y = DVector::from_fn(n, |_, _| match family {
        Family::Gaussian => {
            let v: f64 = StandardNormal.sample(rng);
            v
        }
        Family::Binomial => f64::from(rng.random::<bool>()),
        Family::Poisson => rng.random_range(0..5) as f64,
    });
    GroupedDesign {
        x,
        y,
        groups: Groups::from_sizes(sizes),
    }
}

/// Kolmogorov-Smirnov statistic of samples against a CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut ks = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        ks = ks.max((f - i as f64 / n).abs());
        ks = ks.max((f - (i as f64 + 1.0) / n).abs());
    }
    ks
}

/// Normal draw helper for tests.
pub fn std_normal(rng: &mut ChaCha20Rng) -> f64 {
    let d = Normal::new(0.0, 1.0).unwrap();
    d.sample(rng)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
