use thiserror::Error;

/// Every failure the toolkit reports. Variants map one-to-one onto the
/// typed error entries written into reports.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum IcsError {
    #[error("dimension {0} is too small, at least 2 states are required")]
    BadDimension(usize),
    #[error("state index {index} out of range for dimension {dimension}")]
    IndexOutOfRange { index: usize, dimension: usize },
    #[error("invalid rate {value} for transition {from} -> {to}")]
    InvalidRate { from: usize, to: usize, value: f64 },
    #[error("detector transition {from} -> {to} has no positive rate")]
    MissingDetectorRate { from: usize, to: usize },
    #[error("hamiltonian is not hermitian at entry ({row}, {col})")]
    NonHermitianHamiltonian { row: usize, col: usize },
    #[error("classical model carries a nonzero hamiltonian")]
    ClassicalWithHamiltonian,
    #[error("operation requires a {expected} model")]
    WrongKind { expected: &'static str },
    #[error("steady state is not unique (zero-eigenvalue multiplicity {0})")]
    NonUniqueSteadyState(usize),
    #[error("generator has no numerical null vector")]
    NoSteadyState,
    #[error("characteristic polynomial coefficient {index} has imaginary residue {residue:e}")]
    ComplexResidue { index: usize, residue: f64 },
    #[error("matrix dimension {0} exceeds the supported maximum of 64")]
    Overflow(usize),
    #[error("characteristic polynomial is not affine in exp(xi): deviation {0:e}")]
    AffinityViolated(f64),
    #[error("coefficient a_1 vanishes; the zero eigenvalue is not simple")]
    DegenerateA1,
    #[error("cumulant order {0} outside the supported range")]
    BadOrder(usize),
    #[error("finite-difference step {0} outside [1e-3, 1e-1]")]
    BadStep(f64),
    #[error("eigenvalue branch tracking failed at xi = {0}")]
    BranchTrackingFailed(f64),
    #[error("zero eigenvalue of the generator is not simple")]
    NonSimpleZero,
    #[error("{needed} cumulants required, {available} available")]
    InsufficientCumulants { needed: usize, available: usize },
    #[error("linear system for the characteristic polynomial is singular")]
    SingularSystem,
    #[error("characteristic polynomial is not unique (null space of dimension {nullity})")]
    NonUnique { nullity: usize },
    #[error("no real solution: {0}")]
    NoRealSolution(String),
    #[error("{unknowns} unknowns exceed the {rank} independent conditions")]
    Underdetermined { unknowns: usize, rank: usize },
    #[error("no multistart run converged")]
    NoSolutionFound,
    #[error("state {0} has zero exit rate")]
    AbsorbingState(usize),
    #[error("{windows} windows available, at least {required} required")]
    TooFewWindows { windows: usize, required: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl IcsError {
    /// Stable machine-readable tag used in serialized reports.
    pub fn kind(&self) -> &'static str {
        match self {
            IcsError::BadDimension(_) => "BadDimension",
            IcsError::IndexOutOfRange { .. } => "IndexOutOfRange",
            IcsError::InvalidRate { .. } => "InvalidRate",
            IcsError::MissingDetectorRate { .. } => "MissingDetectorRate",
            IcsError::NonHermitianHamiltonian { .. } => "NonHermitianHamiltonian",
            IcsError::ClassicalWithHamiltonian => "ClassicalWithHamiltonian",
            IcsError::WrongKind { .. } => "WrongKind",
            IcsError::NonUniqueSteadyState(_) => "NonUniqueSteadyState",
            IcsError::NoSteadyState => "NoSteadyState",
            IcsError::ComplexResidue { .. } => "ComplexResidue",
            IcsError::Overflow(_) => "Overflow",
            IcsError::AffinityViolated(_) => "AffinityViolated",
            IcsError::DegenerateA1 => "DegenerateA1",
            IcsError::BadOrder(_) => "BadOrder",
            IcsError::BadStep(_) => "BadStep",
            IcsError::BranchTrackingFailed(_) => "BranchTrackingFailed",
            IcsError::NonSimpleZero => "NonSimpleZero",
            IcsError::InsufficientCumulants { .. } => "InsufficientCumulants",
            IcsError::SingularSystem => "SingularSystem",
            IcsError::NonUnique { .. } => "NonUnique",
            IcsError::NoRealSolution(_) => "NoRealSolution",
            IcsError::Underdetermined { .. } => "Underdetermined",
            IcsError::NoSolutionFound => "NoSolutionFound",
            IcsError::AbsorbingState(_) => "AbsorbingState",
            IcsError::TooFewWindows { .. } => "TooFewWindows",
            IcsError::InvalidInput(_) => "InvalidInput",
        }
    }
}

pub type Result<T> = std::result::Result<T, IcsError>;
