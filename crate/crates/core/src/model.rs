//! Domain types shared by every module: grouped designs, likelihood
//! families, the group spike-and-slab prior and the multivariate
//! double-exponential slab density.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{GsvbError, Result};

/// Likelihood family, each with its canonical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Gaussian responses with identity link and inverse-Gamma noise variance.
    Gaussian,
    /// Bernoulli responses with logit link.
    Binomial,
    /// Count responses with log link.
    Poisson,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
            Family::Poisson => "poisson",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "binomial" => Ok(Family::Binomial),
            "poisson" => Ok(Family::Poisson),
            other => Err(format!("unknown family '{other}'")),
        }
    }
}

/// Variational family: diagonal slab covariance within groups ("GSVB-D")
/// or unrestricted within-group covariance ("GSVB-B").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariationalFamilyKind {
    Diagonal,
    Block,
}

impl std::str::FromStr for VariationalFamilyKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "diag" | "diagonal" | "d" => Ok(VariationalFamilyKind::Diagonal),
            "block" | "b" => Ok(VariationalFamilyKind::Block),
            other => Err(format!("unknown variational kind '{other}'")),
        }
    }
}

/// An ordered list of column ranges. Validation checks that the ranges are
/// disjoint, contiguous and cover `0..p` exactly; `from_sizes` builds a
/// partition that satisfies this by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Groups {
    starts: Vec<usize>,
    sizes: Vec<usize>,
}

impl Groups {
    /// Canonical layout: consecutive ranges with the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut starts = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &m in sizes {
            starts.push(acc);
            acc += m;
        }
        Groups {
            starts,
            sizes: sizes.to_vec(),
        }
    }

    /// Arbitrary ranges; no invariants are checked here.
    pub fn from_ranges(ranges: &[(usize, usize)]) -> Self {
        Groups {
            starts: ranges.iter().map(|r| r.0).collect(),
            sizes: ranges.iter().map(|r| r.1).collect(),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.sizes.len()
    }

    /// Total number of columns covered, assuming a valid partition.
    pub fn p(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn size(&self, k: usize) -> usize {
        self.sizes[k]
    }

    pub fn start(&self, k: usize) -> usize {
        self.starts[k]
    }

    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        self.starts[k]..self.starts[k] + self.sizes[k]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Group containing column `j`. Assumes a validated partition.
    pub fn group_of(&self, j: usize) -> usize {
        match self.starts.binary_search(&j) {
            Ok(k) => k,
            Err(k) => k - 1,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.starts.iter().copied().zip(self.sizes.iter().copied())
    }
}

/// Dense design matrix with a contiguous disjoint column partition and a
/// response vector. Responses are stored as doubles for every family;
/// validation enforces the integer domains.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDesign {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub groups: Groups,
}

impl GroupedDesign {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// View of the columns belonging to group `k`.
    pub fn x_group(&self, k: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.x.columns(self.groups.start(k), self.groups.size(k))
    }
}

/// Group spike-and-slab prior hyperparameters. `a` and `b` parameterize the
/// inverse-Gamma prior on the noise variance and are only read by the
/// Gaussian family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GsvbPrior {
    /// Slab rate of the multivariate double exponential.
    pub lambda: f64,
    /// Beta prior shape on the inclusion weights.
    pub a0: f64,
    /// Beta prior shape on the inclusion weights.
    pub b0: f64,
    /// Inverse-Gamma shape on the noise variance (Gaussian only).
    pub a: f64,
    /// Inverse-Gamma scale on the noise variance (Gaussian only).
    pub b: f64,
}

impl GsvbPrior {
    /// Default hyperparameters: lambda = 1, a0 = 1, b0 = M, a = b = 1e-3.
    pub fn default_for(num_groups: usize) -> Self {
        GsvbPrior {
            lambda: 1.0,
            a0: 1.0,
            b0: num_groups as f64,
            a: 1e-3,
            b: 1e-3,
        }
    }

    /// Prior inclusion weight a0 / (a0 + b0).
    pub fn w_bar(&self) -> f64 {
        self.a0 / (self.a0 + self.b0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("a0", self.a0),
            ("b0", self.b0),
            ("a", self.a),
            ("b", self.b),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(GsvbError::InitFailure(format!(
                    "prior parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Variational parameters: per-group slab mean and covariance, inclusion
/// probabilities, and the family-specific extras (inverse-Gamma parameters
/// for Gaussian noise, per-observation bound tightness for Binomial).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub mu: DVector<f64>,
    pub sigma_blocks: Vec<DMatrix<f64>>,
    pub gamma: DVector<f64>,
    /// (a', b') of the inverse-Gamma noise factor; Gaussian family only.
    pub tau: Option<(f64, f64)>,
    /// Jaakkola bound parameters t_1..t_n; Binomial family only.
    pub jaakkola_t: Option<DVector<f64>>,
    pub kind: VariationalFamilyKind,
}

impl VariationalState {
    pub fn mu_group<'a>(&'a self, groups: &Groups, k: usize) -> nalgebra::DVectorView<'a, f64> {
        self.mu.rows(groups.start(k), groups.size(k))
    }

    pub fn tau_a(&self) -> f64 {
        self.tau.expect("Gaussian state required").0
    }

    pub fn tau_b(&self) -> f64 {
        self.tau.expect("Gaussian state required").1
    }

    /// Total number of scalar parameters (used by the convergence rule).
    pub fn param_len(&self) -> usize {
        let mut len = self.mu.len() + self.gamma.len();
        len += self.sigma_blocks.iter().map(|b| b.len()).sum::<usize>();
        if self.tau.is_some() {
            len += 2;
        }
        if let Some(t) = &self.jaakkola_t {
            len += t.len();
        }
        len
    }

    /// Sum of absolute parameter differences against `other`, covering mu,
    /// the flattened covariance blocks, gamma and the extras.
    pub fn abs_change(&self, other: &VariationalState) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.mu.iter().zip(other.mu.iter()) {
            acc += (a - b).abs();
        }
        for (sa, sb) in self.sigma_blocks.iter().zip(other.sigma_blocks.iter()) {
            for (a, b) in sa.iter().zip(sb.iter()) {
                acc += (a - b).abs();
            }
        }
        for (a, b) in self.gamma.iter().zip(other.gamma.iter()) {
            acc += (a - b).abs();
        }
        match (self.tau, other.tau) {
            (Some((a1, b1)), Some((a2, b2))) => acc += (a1 - a2).abs() + (b1 - b2).abs(),
            (None, None) => {}
            _ => acc = f64::INFINITY,
        }
        match (&self.jaakkola_t, &other.jaakkola_t) {
            (Some(t1), Some(t2)) => {
                for (a, b) in t1.iter().zip(t2.iter()) {
                    acc += (a - b).abs();
                }
            }
            (None, None) => {}
            _ => acc = f64::INFINITY,
        }
        acc
    }
}

/// Check every `GroupedDesign` invariant for the given family and hand the
/// design back unchanged on success.
pub fn validate_grouped_design(design: GroupedDesign, family: Family) -> Result<GroupedDesign> {
    let n = design.x.nrows();
    let p = design.x.ncols();
    let groups = &design.groups;
    if n == 0 || groups.num_groups() == 0 {
        return Err(GsvbError::EmptyDesign);
    }
    if design.y.len() != n {
        return Err(GsvbError::ShapeMismatch {
            expected: format!("{n} responses"),
            got: format!("{}", design.y.len()),
        });
    }
    if groups.sizes.contains(&0) {
        return Err(GsvbError::EmptyDesign);
    }
    if groups.starts[0] != 0 {
        return Err(GsvbError::CoverageGap { column: 0 });
    }
    let mut end = groups.sizes[0];
    for k in 1..groups.num_groups() {
        let start = groups.starts[k];
        if start < end {
            return Err(GsvbError::OverlappingGroups {
                group: k,
                column: start,
            });
        }
        if start > end {
            return Err(GsvbError::NonContiguousGroups {
                group: k,
                column: end,
            });
        }
        end = start + groups.sizes[k];
    }
    if end != p {
        return Err(GsvbError::CoverageGap {
            column: end.min(p),
        });
    }

    const INT_TOL: f64 = 1e-9;
    match family {
        Family::Gaussian => {}
        Family::Binomial => {
            for (row, &v) in design.y.iter().enumerate() {
                if !((v - 0.0).abs() <= INT_TOL || (v - 1.0).abs() <= INT_TOL) {
                    return Err(GsvbError::BadResponseDomain {
                        row,
                        value: v,
                        family: "binomial",
                    });
                }
            }
        }
        Family::Poisson => {
            for (row, &v) in design.y.iter().enumerate() {
                if v < -INT_TOL || (v - v.round()).abs() > INT_TOL {
                    return Err(GsvbError::BadResponseDomain {
                        row,
                        value: v,
                        family: "poisson",
                    });
                }
            }
        }
    }
    Ok(design)
}

/// Map arbitrary per-column group labels to the canonical contiguous layout.
/// Groups are ordered by first occurrence of their label. Returns the column
/// permutation (`perm[new] = old`) and the canonical partition; apply the
/// permutation to the design columns before fitting.
pub fn canonicalize_groups(labels: &[usize]) -> (Vec<usize>, Groups) {
    let mut order: Vec<usize> = Vec::new();
    for &l in labels {
        if !order.contains(&l) {
            order.push(l);
        }
    }
    let mut perm = Vec::with_capacity(labels.len());
    let mut sizes = Vec::with_capacity(order.len());
    for &l in &order {
        let before = perm.len();
        for (j, &lj) in labels.iter().enumerate() {
            if lj == l {
                perm.push(j);
            }
        }
        sizes.push(perm.len() - before);
    }
    (perm, Groups::from_sizes(&sizes))
}

/// log C_m for the m-dimensional double-exponential slab,
/// C_m = [2^m pi^{(m-1)/2} Gamma((m+1)/2)]^{-1}, evaluated through
/// log-Gamma so large m cannot overflow.
pub fn slab_log_normalizer(m: usize) -> f64 {
    let m = m as f64;
    -(m * std::f64::consts::LN_2
        + 0.5 * (m - 1.0) * std::f64::consts::PI.ln()
        + ln_gamma(0.5 * (m + 1.0)))
}

/// Log density of the multivariate double-exponential slab:
/// log C_m + m log lambda - lambda * ||beta||_2.
pub fn slab_log_density(beta_g: &[f64], lambda: f64) -> f64 {
    let m = beta_g.len();
    let norm = beta_g.iter().map(|b| b * b).sum::<f64>().sqrt();
    slab_log_normalizer(m) + m as f64 * lambda.ln() - lambda * norm
}
