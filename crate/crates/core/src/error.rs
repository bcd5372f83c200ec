use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit reports. Validation failures carry the numbers
/// that triggered them so callers can print actionable messages.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("bad grid: {0}")]
    BadGrid(String),

    #[error("consecutive torus samples {index} and {} are {gap} apart (limit 0.5)", index + 1)]
    StepTooLarge { index: usize, gap: f64 },

    #[error("one-form{} is not closed: defect {defect:e} exceeds tolerance {tolerance:e}", leaf_suffix(*leaf))]
    NotClosed {
        leaf: Option<usize>,
        defect: f64,
        tolerance: f64,
    },

    #[error("syntax error at position {position}: {message}")]
    SyntaxError { position: usize, message: String },

    #[error("unknown identifier `{name}` at position {position}")]
    UnknownIdentifier { name: String, position: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("domain error in `{op}` at position {position}")]
    DomainError { op: &'static str, position: usize },

    #[error("bad parameters: {0}")]
    BadParameters(String),

    #[error("Newton iteration diverged in {context} after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence {
        context: String,
        iterations: usize,
        residual: f64,
    },

    #[error("leaves {first} and {second} intersect (min separation {separation:e})")]
    LeavesIntersect {
        first: usize,
        second: usize,
        separation: f64,
    },

    #[error("file format error: {0}")]
    FileFormat(String),

    #[error("cohomology map is degenerate at leaf {leaf} (condition number {condition:e})")]
    DegenerateCMap { leaf: usize, condition: f64 },

    #[error("rotation vector is resonant: <{k:?}, rho> is within {margin:e} of an integer")]
    ResonantRotation { k: Vec<i64>, margin: f64 },

    #[error("integral is inconsistent with the foliation (gamma variation {gamma_defect:e}, tangency defect {tangency_defect:e})")]
    NonConstantGamma {
        gamma_defect: f64,
        tangency_defect: f64,
    },

    #[error("energy is not constant on leaf {leaf} (variation {variation:e})")]
    NonConstantEnergy { leaf: usize, variation: f64 },

    #[error("leaf location failed: {0}")]
    LeafLocationFailure(String),

    #[error("mollification radius {eps} does not fit the action domain (half-width {half_width})")]
    DomainTooSmall { eps: f64, half_width: f64 },

    #[error("matrix of momentum derivatives is singular at q={q:?}, p={p:?}")]
    SingularM { q: Vec<f64>, p: Vec<f64> },

    #[error("iterate left the momentum window: p={p:?}")]
    OutOfWindow { p: Vec<f64> },

    #[error("model `{0}` is not separable; splitting integrator unavailable")]
    NotSeparable(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("I/O error: {0}")]
    Io(String),
}

fn leaf_suffix(leaf: Option<usize>) -> String {
    match leaf {
        Some(i) => format!(" (leaf {i})"),
        None => String::new(),
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::FileFormat(e.to_string())
    }
}
