//! Posterior-predictive sampling from a fitted state and per-coordinate
//! marginal credible sets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Poisson, StudentT};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::error::{GsvbError, Result};
use crate::model::{Family, Groups, VariationalState};

/// Exponent cap for Poisson predictive rates, matching the objective's
/// moment-generating-function cap.
pub const POISSON_RATE_EXPONENT_CAP: f64 = 700.0;

/// Draws of a new response at one covariate row, plus the equal-tailed
/// central predictive interval.
#[derive(Debug, Clone)]
pub struct PredictiveSample {
    pub draws: Vec<f64>,
    pub interval: (f64, f64),
}

/// A marginal credible set for one coordinate: {0}, a closed interval, or
/// their union.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CredibleSet {
    pub interval: Option<(f64, f64)>,
    pub atom_zero: bool,
    pub level: f64,
}

impl CredibleSet {
    pub fn contains(&self, v: f64) -> bool {
        if self.atom_zero && v == 0.0 {
            return true;
        }
        match self.interval {
            Some((lo, hi)) => v >= lo && v <= hi,
            None => false,
        }
    }

    pub fn lebesgue(&self) -> f64 {
        match self.interval {
            Some((lo, hi)) => hi - lo,
            None => 0.0,
        }
    }
}

/// Lebesgue measure of the set; atoms contribute nothing.
pub fn set_size(set: &CredibleSet) -> f64 {
    set.lebesgue()
}

/// Pre-factored group covariances for repeated slab draws.
struct SlabSampler {
    chols: Vec<Option<DMatrix<f64>>>,
}

impl SlabSampler {
    fn new(state: &VariationalState) -> Result<Self> {
        let mut chols = Vec::with_capacity(state.sigma_blocks.len());
        for (k, block) in state.sigma_blocks.iter().enumerate() {
            if state.gamma[k] == 0.0 {
                chols.push(None);
                continue;
            }
            let chol = nalgebra::Cholesky::new(block.clone())
                .ok_or(GsvbError::NonPdBlock { group: k })?;
            chols.push(Some(chol.l()));
        }
        Ok(SlabSampler { chols })
    }
}

fn draw_beta(
    state: &VariationalState,
    groups: &Groups,
    sampler: &SlabSampler,
    rng: &mut ChaCha20Rng,
) -> DVector<f64> {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut beta = DVector::zeros(state.mu.len());
    for k in 0..groups.num_groups() {
        let g = state.gamma[k];
        if g == 0.0 || rng.random::<f64>() >= g {
            continue;
        }
        let m = groups.size(k);
        let l = sampler.chols[k].as_ref().expect("factored on construction");
        let eps = DVector::from_fn(m, |_, _| std_normal.sample(rng));
        let mut block = beta.rows_mut(groups.start(k), m);
        block.copy_from(&(state.mu_group(groups, k) + l * eps));
    }
    beta
}

/// Draw one coefficient vector from the fitted variational posterior: per
/// group a Bernoulli(gamma_k) inclusion, then a slab normal via Cholesky.
pub fn sample_variational_beta(
    state: &VariationalState,
    groups: &Groups,
    rng: &mut ChaCha20Rng,
) -> Result<DVector<f64>> {
    let sampler = SlabSampler::new(state)?;
    Ok(draw_beta(state, groups, &sampler, rng))
}

/// Type-7 empirical quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Sample the posterior predictive at `x_star`. Gaussian responses mix a
/// Student-t over the integrated-out noise variance; Binomial and Poisson
/// push each coefficient draw through the link and sample the response.
pub fn posterior_predictive(
    state: &VariationalState,
    groups: &Groups,
    x_star: &DVector<f64>,
    family: Family,
    n_draws: usize,
    alpha: f64,
    rng: &mut ChaCha20Rng,
) -> Result<PredictiveSample> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GsvbError::BadLevel(alpha));
    }
    assert!(n_draws >= 1);
    let sampler = SlabSampler::new(state)?;
    let mut draws = Vec::with_capacity(n_draws);
    match family {
        Family::Gaussian => {
            let (a, b) = state.tau.expect("Gaussian state carries (a', b')");
            let t_dist = StudentT::new(2.0 * a).expect("valid dof");
            let scale = (b / a).sqrt();
            for _ in 0..n_draws {
                let beta = draw_beta(state, groups, &sampler, rng);
                let loc = x_star.dot(&beta);
                draws.push(loc + scale * t_dist.sample(rng));
            }
        }
        Family::Binomial => {
            for _ in 0..n_draws {
                let beta = draw_beta(state, groups, &sampler, rng);
                let p = 1.0 / (1.0 + (-x_star.dot(&beta)).exp());
                draws.push(f64::from(rng.random::<f64>() < p));
            }
        }
        Family::Poisson => {
            for _ in 0..n_draws {
                let beta = draw_beta(state, groups, &sampler, rng);
                let eta = x_star.dot(&beta);
                if eta > POISSON_RATE_EXPONENT_CAP {
                    return Err(GsvbError::PoissonRateOverflow {
                        row: 0,
                        exponent: eta,
                    });
                }
                let rate = eta.exp();
                let draw = if rate == 0.0 {
                    0.0
                } else {
                    Poisson::new(rate)
                        .map_err(|_| GsvbError::PoissonRateOverflow {
                            row: 0,
                            exponent: eta,
                        })?
                        .sample(rng)
                };
                draws.push(draw);
            }
        }
    }
    let mut sorted = draws.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let interval = (
        quantile_sorted(&sorted, alpha / 2.0),
        quantile_sorted(&sorted, 1.0 - alpha / 2.0),
    );
    Ok(PredictiveSample { draws, interval })
}

/// Central interval of the slab normal marginal holding `mass`, around mu_j.
fn central_interval(mu: f64, sd: f64, mass: f64) -> (f64, f64) {
    let std = NormalDist::standard();
    let half = sd * std.inverse_cdf(0.5 * (1.0 + mass));
    (mu - half, mu + half)
}

const MAX_CENTRAL_MASS: f64 = 1.0 - 1e-12;

/// Marginal credible set for coordinate `j` at level `alpha`.
///
/// Three cases: below-level inclusion returns the atom {0}; otherwise a
/// central interval of the slab normal, with the atom joined in whenever the
/// interval alone cannot carry 1 - alpha of the spike-and-slab marginal.
/// Interval masses are chosen so the set always holds at least 1 - alpha of
/// the marginal: alpha_gamma = 1 - alpha/gamma_k with the atom present, and
/// (1 - alpha)/gamma_k for a bare interval.
pub fn marginal_credible_set(
    state: &VariationalState,
    groups: &Groups,
    j: usize,
    alpha: f64,
) -> Result<CredibleSet> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GsvbError::BadLevel(alpha));
    }
    let k = groups.group_of(j);
    let g = state.gamma[k];

    // Case 1: the group is too unlikely for any interval to be needed.
    if g < alpha {
        return Ok(CredibleSet {
            interval: None,
            atom_zero: true,
            level: alpha,
        });
    }

    let local = j - groups.start(k);
    let mu = state.mu[j];
    let sd = state.sigma_blocks[k][(local, local)].max(0.0).sqrt();
    let alpha_gamma = 1.0 - alpha / g;
    let base = central_interval(mu, sd, alpha_gamma.clamp(0.0, MAX_CENTRAL_MASS));

    if base.0 > 0.0 || base.1 < 0.0 {
        // Case 2: zero lies outside the base interval. A bare interval must
        // carry (1 - alpha)/gamma of slab mass to reach the target; when
        // gamma is too small for that, fall back to the atom-joined form.
        let needed = (1.0 - alpha) / g;
        if needed < 1.0 {
            return Ok(CredibleSet {
                interval: Some(central_interval(mu, sd, needed)),
                atom_zero: false,
                level: alpha,
            });
        }
        return Ok(CredibleSet {
            interval: Some(base),
            atom_zero: true,
            level: alpha,
        });
    }

    // Case 3: zero falls inside; widen per the adjusted mass and join the atom.
    let widened = (alpha_gamma + (1.0 - g)).clamp(0.0, MAX_CENTRAL_MASS);
    Ok(CredibleSet {
        interval: Some(central_interval(mu, sd, widened)),
        atom_zero: true,
        level: alpha,
    })
}
