use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("NonzeroAverage: average {average:e} exceeds tolerance {tolerance:e}")]
    NonzeroAverage { average: f64, tolerance: f64 },

    #[error("ResonantMode(k={k:?}): divisor {divisor:e} below floor")]
    ResonantMode { k: Vec<i32>, divisor: f64 },

    #[error("ZeroDivisor: k={k:?}, l={l} gives an exact resonance")]
    ZeroDivisor { k: Vec<i32>, l: i64 },

    #[error("DegreeOverflow: requested degree {requested} but data is known to degree {known}")]
    DegreeOverflow { requested: usize, known: usize },

    #[error("SingularB: {0}")]
    SingularB(String),

    #[error("SingularBlock at order {order}: inverse norm {norm:e} exceeds cap")]
    SingularBlock { order: usize, norm: f64 },

    #[error("OrderRegression at step {step}: {component} coefficient of x^{order} has norm {norm:e}")]
    OrderRegression {
        step: usize,
        component: String,
        order: usize,
        norm: f64,
    },

    #[error("hypothesis violation: {0}")]
    Hypothesis(String),

    #[error("WindowTooWide: residual at rounding floor on [{x_min:e}, {x_max:e}]")]
    WindowTooWide { x_min: f64, x_max: f64 },

    #[error("BoundViolated at step {k}: |x_k| = {modulus:e} > bound {bound:e}")]
    BoundViolated { k: usize, modulus: f64, bound: f64 },

    #[error("EscapedSector at step {k}")]
    EscapedSector { k: usize },

    #[error("OrbitLeftDomain at step {k}")]
    OrbitLeftDomain { k: usize },

    #[error("StepUnderflow at t = {t}: step {h:e}")]
    StepUnderflow { t: f64, h: f64 },

    #[error("InsufficientTorusData: {0}")]
    InsufficientTorusData(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Hypothesis(_)
            | Error::InsufficientTorusData(_)
            | Error::SingularB(_)
            | Error::Invalid(_)
            | Error::DimensionMismatch(_) => 2,
            Error::ResonantMode { .. } | Error::ZeroDivisor { .. } => 3,
            Error::Io(_) | Error::Format(_) => 5,
            _ => 4,
        }
    }

    /// Short machine-readable tag naming the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::NonzeroAverage { .. } => "NonzeroAverage",
            Error::ResonantMode { .. } => "ResonantMode",
            Error::ZeroDivisor { .. } => "ZeroDivisor",
            Error::DegreeOverflow { .. } => "DegreeOverflow",
            Error::SingularB(_) => "SingularB",
            Error::SingularBlock { .. } => "SingularBlock",
            Error::OrderRegression { .. } => "OrderRegression",
            Error::Hypothesis(_) => "HypothesisViolation",
            Error::WindowTooWide { .. } => "WindowTooWide",
            Error::BoundViolated { .. } => "BoundViolated",
            Error::EscapedSector { .. } => "EscapedSector",
            Error::OrbitLeftDomain { .. } => "OrbitLeftDomain",
            Error::StepUnderflow { .. } => "StepUnderflow",
            Error::InsufficientTorusData(_) => "InsufficientTorusData",
            Error::Invalid(_) => "Invalid",
            Error::Io(_) => "Io",
            Error::Format(_) => "Format",
        }
    }
}
