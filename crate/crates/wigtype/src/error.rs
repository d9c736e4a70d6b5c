use num_complex::Complex64;
use thiserror::Error;

/// Every failure the library can report.
///
/// Variants split into input/contract problems and numerical failures; the
/// CLI maps them to distinct exit codes through [`Error::is_numerical`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("test function data contract violated: {0}")]
    DataContractViolation(String),
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("support has more than one component ({components} found)")]
    MultiCut { components: usize },
    #[error("interior density minimum {value:.3e} at E = {energy:.6} looks like a cusp")]
    CuspSuspect { energy: f64, value: f64 },
    #[error("energy grid does not bracket the support")]
    InsufficientGrid,
    #[error("energy {0} outside the solved grid")]
    OutOfGrid(f64),
    #[error("edge-fit window too narrow: {0}")]
    WindowTooNarrow(String),
    #[error("stencil out of range: {0}")]
    StencilOutOfRange(String),

    #[error("QVE solver did not converge at z = {z}: residual {residual:.3e}")]
    NonConvergence { z: Complex64, residual: f64 },
    #[error("iterate left the upper half-plane at z = {z}")]
    HalfPlaneViolation { z: Complex64 },
    #[error("power iteration stalled after {iterations} steps (residual {residual:.3e})")]
    PowerIterationStall { iterations: usize, residual: f64 },
    #[error("stability operator nearly singular: denominator {0:.3e}")]
    NearSingular(f64),
    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergence(String),
    #[error("eigenvalue decomposition failed: {0}")]
    EigenFailure(String),
    #[error("particle collision in DBM at t = {0}")]
    ParticleCollision(f64),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of a numerical routine on admissible input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::HalfPlaneViolation { .. }
                | Error::PowerIterationStall { .. }
                | Error::NearSingular(_)
                | Error::QuadratureNonConvergence(_)
                | Error::EigenFailure(_)
                | Error::ParticleCollision(_)
        )
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::InvalidProfile(_) => "InvalidProfile",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::DataContractViolation(_) => "DataContractViolation",
            Error::AssumptionViolated(_) => "AssumptionViolated",
            Error::MultiCut { .. } => "MultiCut",
            Error::CuspSuspect { .. } => "CuspSuspect",
            Error::InsufficientGrid => "InsufficientGrid",
            Error::OutOfGrid(_) => "OutOfGrid",
            Error::WindowTooNarrow(_) => "WindowTooNarrow",
            Error::StencilOutOfRange(_) => "StencilOutOfRange",
            Error::NonConvergence { .. } => "NonConvergence",
            Error::HalfPlaneViolation { .. } => "HalfPlaneViolation",
            Error::PowerIterationStall { .. } => "PowerIterationStall",
            Error::NearSingular(_) => "NearSingular",
            Error::QuadratureNonConvergence(_) => "QuadratureNonConvergence",
            Error::EigenFailure(_) => "EigenFailure",
            Error::ParticleCollision(_) => "ParticleCollision",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
