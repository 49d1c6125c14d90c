use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("line {line}: unresolved reference to {kind} `{id}`")]
    UnresolvedReference {
        kind: &'static str,
        id: String,
        line: usize,
    },
    #[error("line {line}: unsupported flow units `{token}`")]
    UnsupportedUnits { token: String, line: usize },
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("missing section: {0}")]
    MissingSection(String),
    #[error("line {line}: unsupported feature: {what}")]
    UnsupportedFeature { what: String, line: usize },
    #[error("degenerate geometry on `{id}`: {message}")]
    DegenerateGeometry { id: String, message: String },
    #[error("network has no nodes or no links")]
    EmptyNetwork,
    #[error("pump `{id}` speed {speed} is below the floor {floor}")]
    SpeedBelowFloor { id: String, speed: f64, floor: f64 },
    #[error("valve `{id}` ({kind}) is in an active regulating mode")]
    UnsupportedValveMode { id: String, kind: String },
    #[error("Newton iteration failed after {iterations} iterations (residual {residual:.3e}){}", time.map(|t| format!(" at t = {t} s")).unwrap_or_default())]
    NewtonDivergence {
        iterations: usize,
        residual: f64,
        time: Option<f64>,
    },
    #[error("algebraic Jacobian is singular (rcond {rcond:.3e})")]
    SingularAlgebraicJacobian { rcond: f64 },
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("smoothing width {tau_s} s is not below the breakpoint gap {gap} s")]
    WindowTooWide { tau_s: f64, gap: f64 },
    #[error("operating point is not an equilibrium (residual {residual:.3e})")]
    NotAnEquilibrium { residual: f64 },
    #[error("junction elimination pivot is singular (rcond {rcond:.3e})")]
    SingularAlgebraicPivot { rcond: f64 },
    #[error("step matrix E - tA is singular")]
    SingularStepMatrix,
    #[error("equilibrium Jacobian is singular")]
    SingularJx,
    #[error("trajectory grids do not overlap")]
    GridMismatch,
    #[error("config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
