use std::path::PathBuf;

use thiserror::Error;

use crate::network::ValidationReport;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid feeder:\n{0}")]
    Invalid(ValidationReport),
    #[error("invalid base {name} = {value}")]
    InvalidBase { name: &'static str, value: f64 },
    #[error("hour {hour}: scenario has {found} nodal entries, feeder has {expected} nodes")]
    ScenarioShape { hour: usize, expected: usize, found: usize },
}

/// Malformed conic program.
#[derive(Debug, Error, PartialEq)]
pub enum ProgramError {
    #[error("duplicate constraint label `{0}`")]
    DuplicateLabel(String),
    #[error("duplicate variable name `{0}`")]
    DuplicateVariable(String),
    #[error("constraint `{label}` references unknown variable #{index}")]
    UnknownVariable { label: String, index: usize },
    #[error("cone `{0}`: head variables must carry a nonnegative lower bound")]
    ConeHeadUnbounded(String),
    #[error("no equality labelled `{0}`")]
    UnknownLabel(String),
    #[error("non-finite coefficient in `{0}`")]
    NonFinite(String),
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("solver setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Error)]
pub enum DistflowError {
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error("line ({from},{to}) is flagged but its anchor current is {l0}; the linearization needs l0 > 0")]
    ZeroAnchor { from: usize, to: usize, l0: f64 },
    #[error("no MCC factor for flagged line ({from},{to})")]
    MissingMcc { from: usize, to: usize },
    #[error("anchor references line ({from},{to}) which is not in the feeder")]
    UnknownLine { from: usize, to: usize },
    #[error("LMV vector has {found} entries for {expected} nodes")]
    LmvShape { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("load flow diverged after {iterations} iterations (residual {residual:e})")]
    Diverged { iterations: usize, residual: f64 },
    #[error("singular Jacobian at iteration {0}")]
    Singular(usize),
    #[error("non-smooth point: perturbation changed the active overload set")]
    NonSmooth,
    #[error("perturbed program not optimal: {0}")]
    PerturbedNotOptimal(String),
    #[error(transparent)]
    Distflow(#[from] DistflowError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{step}, hour {hour}: relaxation not exact (max cone gap {gap:e} pu² on line ({from},{to}))")]
    Inexact { step: &'static str, hour: usize, gap: f64, from: usize, to: usize },
    #[error("{step}, hour {hour}: {source}")]
    Build {
        step: &'static str,
        hour: usize,
        #[source]
        source: DistflowError,
    },
    #[error("{step}, hour {hour}: {source}")]
    Solve {
        step: &'static str,
        hour: usize,
        #[source]
        source: SolveError,
    },
    #[error("{step}, hour {hour}: solver returned {status}")]
    NotSolved { step: &'static str, hour: usize, status: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("MCC: overloaded line ({from},{to}) has no upgrade entry in the investment")]
    MissingUpgrade { from: usize, to: usize },
    #[error("MCC: {0}")]
    InvalidProject(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("step {step} needs the results of step {needs}")]
    MissingStep { step: &'static str, needs: &'static str },
}

impl PipelineError {
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            PipelineError::Solve { .. }
                | PipelineError::NotSolved { .. }
                | PipelineError::Inexact { .. }
        )
    }
}

/// Failures while reading or writing on-disk formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{location}: parse error: {message}")]
    Parse { location: String, message: String },
    #[error("{}{message}", located(.location))]
    Validation { location: String, message: String },
    #[error("invalid feeder in {path}:\n{report}")]
    Feeder { path: PathBuf, report: ValidationReport },
}

impl FormatError {
    pub fn is_validation(&self) -> bool {
        matches!(self, FormatError::Validation { .. } | FormatError::Feeder { .. })
    }
}

fn located(location: &str) -> String {
    if location.is_empty() {
        String::new()
    } else {
        format!("{location}: ")
    }
}
