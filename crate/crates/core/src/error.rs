use thiserror::Error;

/// Failures surfaced by the library. Each variant names the violated hypothesis
/// or the numerical condition that could not be met.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("no common set of return times with gcd 1 (gcd = {gcd})")]
    NoCommonReturnTimes { gcd: u32 },
    #[error("no exponential envelope fits the return-time tail of symbol {symbol}")]
    TailViolation { symbol: usize },
    #[error("no cover partition for eps = {eps}, s = {s}")]
    AscovFailure { eps: f64, s: usize },
    #[error("weighted floor sum {sum} exceeds the bound {bound}")]
    WeightTooLarge { sum: f64, bound: f64 },
    #[error("orbit climbed to floor {floor} above the truncation height {l_max}")]
    TruncationEscape { floor: usize, l_max: usize },
    #[error("cylinder count exceeds the cap {cap}")]
    CombinatorialBlowup { cap: usize },
    #[error("functions live on different grids: {0}")]
    ResolutionMismatch(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("bound {bound} violated at floor {floor}: lhs {lhs} > rhs {rhs}")]
    BoundViolation {
        bound: &'static str,
        floor: usize,
        lhs: f64,
        rhs: f64,
    },
    #[error("degenerate ratio: a functional vanishes on a strict member")]
    DegenerateRatio,
    #[error("cone certification failed with {failures} witnesses")]
    CertificationFailure { failures: usize },
    #[error("no positive complex radius satisfies the contraction condition")]
    NoPositiveRadius,
    #[error("variance {0} too small for a normalized limit theorem")]
    DegenerateVariance(f64),
    #[error("observable is not lattice valued with span {span}")]
    LatticeMismatch { span: f64 },
    #[error("deviation level {eps} outside the window {window}")]
    WindowExceeded { eps: f64, window: f64 },
}

impl Error {
    /// Stable variant name for machine-readable output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::NoCommonReturnTimes { .. } => "NoCommonReturnTimes",
            Error::TailViolation { .. } => "TailViolation",
            Error::AscovFailure { .. } => "AscovFailure",
            Error::WeightTooLarge { .. } => "WeightTooLarge",
            Error::TruncationEscape { .. } => "TruncationEscape",
            Error::CombinatorialBlowup { .. } => "CombinatorialBlowup",
            Error::ResolutionMismatch(_) => "ResolutionMismatch",
            Error::NoConvergence(_) => "NoConvergence",
            Error::BoundViolation { .. } => "BoundViolation",
            Error::DegenerateRatio => "DegenerateRatio",
            Error::CertificationFailure { .. } => "CertificationFailure",
            Error::NoPositiveRadius => "NoPositiveRadius",
            Error::DegenerateVariance(_) => "DegenerateVariance",
            Error::LatticeMismatch { .. } => "LatticeMismatch",
            Error::WindowExceeded { .. } => "WindowExceeded",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
