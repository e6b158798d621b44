use thiserror::Error;

/// Errors surfaced by the library. Column, row and group indices are 0-based.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GsvbError {
    #[error("group {group} overlaps an earlier group at column {column}")]
    OverlappingGroups { group: usize, column: usize },

    #[error("group {group} does not start where the previous group ends (column {column} skipped)")]
    NonContiguousGroups { group: usize, column: usize },

    #[error("groups do not cover the design columns exactly (first problem at column {column})")]
    CoverageGap { column: usize },

    #[error("response at row {row} ({value}) is outside the domain of the {family} family")]
    BadResponseDomain {
        row: usize,
        value: f64,
        family: &'static str,
    },

    #[error("design has no rows or no groups")]
    EmptyDesign,

    #[error("moment generating function exponent {exponent:.1} exceeds cap {cap:.1} (row {row}, group {group})")]
    MgfOverflow {
        row: usize,
        group: usize,
        exponent: f64,
        cap: f64,
    },

    #[error("covariance block for group {group} is not positive definite")]
    NonPdBlock { group: usize },

    #[error("initialization failed: {0}")]
    InitFailure(String),

    #[error("Poisson rate exp({exponent:.1}) exceeds the overflow cap at row {row}")]
    PoissonRateOverflow { row: usize, exponent: f64 },

    #[error("credible level {0} must lie strictly inside (0, 1)")]
    BadLevel(f64),

    #[error("AUC is undefined: all groups share a single label")]
    AucUndefined,

    #[error("Wishart draw remained numerically singular after {attempts} attempts")]
    WishartDegenerate { attempts: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
}

pub type Result<T> = std::result::Result<T, GsvbError>;
