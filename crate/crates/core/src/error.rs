use thiserror::Error;

/// Errors raised across the controller design and simulation pipeline.
#[derive(Debug, Error)]
pub enum MpcError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("integration failure at RK4 stage {stage}: non-finite derivative")]
    Integration { stage: usize },

    #[error("model domain violation: {0}")]
    Domain(String),

    #[error("no equilibrium for output {output:?}: {reason}")]
    NoEquilibrium { output: Vec<f64>, reason: String },

    #[error("equilibrium for output {output:?} violates the constraint margin")]
    InfeasibleEquilibrium { output: Vec<f64> },

    #[error("setpoint region is empty")]
    EmptyRegion,

    #[error("dynamics are not Lipschitz on the sampling region (row {row}, residual {residual:e})")]
    NotLipschitz { row: usize, residual: f64 },

    #[error("tightened constraint set is empty at stage {stage}")]
    HorizonTooLong { stage: usize },

    #[error("terminal gain synthesis failed: {0}")]
    SynthesisFailed(String),

    #[error("terminal design failed: {0}")]
    TerminalDesignFailed(String),

    #[error("cost evaluation failed: {0}")]
    CostEvaluation(String),

    #[error("optimal control problem is infeasible from the given state")]
    InfeasibleProblem,

    #[error("scenario infeasible: {0}")]
    ScenarioInfeasible(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MpcError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(MpcError::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
