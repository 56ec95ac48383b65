use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("metric is not positive definite at grid point {point}")]
    NotPositiveDefinite { point: usize },
    #[error("2-form is degenerate at grid point {point}")]
    DegenerateForm { point: usize },
    #[error("{what} residual {residual:.3e} exceeds tolerance {tolerance:.1e}")]
    Residual {
        what: &'static str,
        residual: f64,
        tolerance: f64,
    },
    #[error(
        "canonical connection failed verification: metric {metric:.3e}, complex {complex:.3e}, torsion(1,1) {torsion:.3e}"
    )]
    ConnectionConstruction { metric: f64, complex: f64, torsion: f64 },
    #[error("time step {dt} exceeds the stability bound {bound:.4}")]
    Cfl { dt: f64, bound: f64 },
    #[error("singularity gauge {gauge:.3e} exceeded ceiling {ceiling:.3e} at t = {t}")]
    Singularity { t: f64, gauge: f64, ceiling: f64 },
    #[error("amplitude {amplitude} is too large: {reason}")]
    AmplitudeTooLarge { amplitude: f64, reason: String },
    #[error("iteration did not converge: {0}")]
    NonConvergence(String),
    #[error("degenerate fit window: {0}")]
    DegenerateWindow(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag, used in error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidLattice(_) => "invalid_lattice",
            Error::InvalidInput(_) => "invalid_input",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::DegenerateForm { .. } => "degenerate_form",
            Error::Residual { .. } => "residual",
            Error::ConnectionConstruction { .. } => "connection_construction",
            Error::Cfl { .. } => "cfl",
            Error::Singularity { .. } => "singularity",
            Error::AmplitudeTooLarge { .. } => "amplitude_too_large",
            Error::NonConvergence(_) => "non_convergence",
            Error::DegenerateWindow(_) => "degenerate_window",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
