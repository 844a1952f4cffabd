use thiserror::Error;

/// Everything that can go wrong in the library.
///
/// `is_validation` splits the variants into input problems (bad data, bad
/// configuration) and numerical failures; the CLI maps them to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing cell: unit {unit} has no row for period {period}")]
    MissingCell { unit: String, period: String },
    #[error("duplicate cell: unit {unit}, period {period}")]
    DuplicateCell { unit: String, period: String },
    #[error("column {column} varies over time within unit {unit}")]
    NonConstantTimeInvariant { column: String, unit: String },
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("unit {unit} is already treated in the first period")]
    AlreadyTreatedAtStart { unit: String },
    #[error("invalid value in column {column}: {value}")]
    InvalidValue { column: String, value: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("panel is not a two-period panel with a single treated group: {0}")]
    NotTwoPeriod(String),
    #[error("empty subset")]
    EmptySubset,
    #[error("design matrix is rank deficient (columns {columns:?}, condition {condition:.3e})")]
    RankDeficient { columns: Vec<usize>, condition: f64 },
    #[error("denominator is numerically zero")]
    DegenerateDenominator,
    #[error("treatment indicator has no variation")]
    NoVariationInD,
    #[error("treatment has no variation left after projection on the covariates")]
    NoResidualTreatmentVariation,
    #[error("fit mode does not match the data: {0}")]
    ModeMismatch(String),
    #[error("wrong weight variant: {0}")]
    WrongWeightVariant(String),
    #[error("unknown covariate function {0}")]
    UnknownFunction(String),
    #[error("no comparison units for cell (g={g}, t={t})")]
    EmptyComparison { g: usize, t: usize },
    #[error("no treated units for cell (g={g}, t={t})")]
    EmptyTreated { g: usize, t: usize },
    #[error(
        "outcome regression design is rank deficient in cell (g={g}, t={t}) (columns {columns:?})"
    )]
    RankDeficientOr {
        g: usize,
        t: usize,
        columns: Vec<usize>,
    },
    #[error(
        "propensity score design is rank deficient in cell (g={g}, t={t}) (columns {columns:?})"
    )]
    RankDeficientGps {
        g: usize,
        t: usize,
        columns: Vec<usize>,
    },
    #[error("fitted propensity {max_score:.9} is within 1e-6 of one for a comparison unit")]
    PropensityNearOne { max_score: f64 },
    #[error("no estimate for cell (g={g}, t={t})")]
    MissingGroupTime { g: usize, t: usize },
    #[error("cell (g={g}, t={t}) is outside the post-treatment support")]
    InvalidCell { g: usize, t: usize },
    #[error("generalized propensity score separates the sample in cell (g={g}, t={t})")]
    PerfectSeparation { g: usize, t: usize },
    #[error("generalized propensity score did not converge in cell (g={g}, t={t})")]
    NotConverged { g: usize, t: usize },
    #[error(
        "overlap violation in cell (g={g}, t={t}): fitted score {max_score:.6} exceeds 1 - trim"
    )]
    OverlapViolation { g: usize, t: usize, max_score: f64 },
    #[error("result carries no {0} fit")]
    MissingNuisance(&'static str),
    #[error("no group is eligible for event time {0}")]
    NoEligibleGroup(i64),
    #[error("no group-time estimates supplied")]
    NoResults,
    #[error("bootstrap needs at least {min} draws, got {got}")]
    TooFewDraws { got: usize, min: usize },
    #[error("influence columns have inconsistent lengths")]
    InconsistentInfluence,
    #[error("overlap-violating assignment configuration: {0}")]
    OverlapConfigError(String),
    #[error("configuration does not match the dataset: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown preset {0}")]
    UnknownPreset(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingCell { .. } => "MissingCell",
            Error::DuplicateCell { .. } => "DuplicateCell",
            Error::NonConstantTimeInvariant { .. } => "NonConstantTimeInvariant",
            Error::UnknownColumn(_) => "UnknownColumn",
            Error::AlreadyTreatedAtStart { .. } => "AlreadyTreatedAtStart",
            Error::InvalidValue { .. } => "InvalidValue",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NotTwoPeriod(_) => "NotTwoPeriod",
            Error::EmptySubset => "EmptySubset",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::DegenerateDenominator => "DegenerateDenominator",
            Error::NoVariationInD => "NoVariationInD",
            Error::NoResidualTreatmentVariation => "NoResidualTreatmentVariation",
            Error::ModeMismatch(_) => "ModeMismatch",
            Error::WrongWeightVariant(_) => "WrongWeightVariant",
            Error::UnknownFunction(_) => "UnknownFunction",
            Error::EmptyComparison { .. } => "EmptyComparison",
            Error::EmptyTreated { .. } => "EmptyTreated",
            Error::RankDeficientOr { .. } => "RankDeficientOr",
            Error::RankDeficientGps { .. } => "RankDeficientGps",
            Error::PropensityNearOne { .. } => "PropensityNearOne",
            Error::MissingGroupTime { .. } => "MissingGroupTime",
            Error::InvalidCell { .. } => "InvalidCell",
            Error::PerfectSeparation { .. } => "PerfectSeparation",
            Error::NotConverged { .. } => "NotConverged",
            Error::OverlapViolation { .. } => "OverlapViolation",
            Error::MissingNuisance(_) => "MissingNuisance",
            Error::NoEligibleGroup(_) => "NoEligibleGroup",
            Error::NoResults => "NoResults",
            Error::TooFewDraws { .. } => "TooFewDraws",
            Error::InconsistentInfluence => "InconsistentInfluence",
            Error::OverlapConfigError(_) => "OverlapConfigError",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::UnknownPreset(_) => "UnknownPreset",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }

    /// True for problems with the input rather than with the numerics.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::RankDeficient { .. }
                | Error::RankDeficientOr { .. }
                | Error::RankDeficientGps { .. }
                | Error::PropensityNearOne { .. }
                | Error::DegenerateDenominator
                | Error::NoResidualTreatmentVariation
                | Error::PerfectSeparation { .. }
                | Error::NotConverged { .. }
                | Error::OverlapViolation { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
